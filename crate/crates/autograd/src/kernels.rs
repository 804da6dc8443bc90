//! Raw CPU kernels over contiguous row-major buffers. Batched kernels
//! parallelize over the leading (batch) axis only.

use crate::par;

/// Upper bound on im2col scratch size, in elements.
const COL_BUDGET: usize = 1 << 21;

/// `c[m×n] = a[m×k] · b[k×n]` with optional transposed operands.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds views of `a` (m·k), `b` (k·n), `c` (m·n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn rows_per_tile(ck2: usize, w: usize, h: usize) -> usize {
    (COL_BUDGET / (ck2 * w).max(1)).clamp(1, h)
}

/// Writes the im2col block for output rows `r0..r0+rows` into `col`,
/// laid out as `(c·k·k) × (rows·w)`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, r0: usize, rows: usize, col: &mut [f64]) {
    let p = k / 2;
    let tw = rows * w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * tw..(row + 1) * tw];
                // valid output columns: 0 <= xx + kj - p < w
                let x_lo = p.saturating_sub(kj);
                let x_hi = (w + p).saturating_sub(kj).min(w);
                for yy in 0..rows {
                    let y = r0 + yy;
                    let d = &mut dst[yy * w..(yy + 1) * w];
                    let sy = y + ki;
                    if sy < p || sy - p >= h || x_lo >= x_hi {
                        d.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[(sy - p) * w..(sy - p + 1) * w];
                    d[..x_lo].fill(0.0);
                    d[x_hi..].fill(0.0);
                    let s0 = x_lo + kj - p;
                    d[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Stride-1 "same" convolution (odd square kernels, zero padding).
///
/// `x`: `n×c×h×w`, `weight`: `o×c×k×k`, output `n×o×h×w`.
pub fn conv2d(x: &[f64], xs: [usize; 4], weight: &[f64], ws: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [o, wc, k, k2] = ws;
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d needs square kernels");
    assert!(k % 2 == 1, "conv2d needs odd kernel size");
    let hw = h * w;
    let ck2 = c * k * k;
    let mut out = vec![0.0; n * o * hw];
    par::for_each_chunk(&mut out, o * hw, |ni, out_n| {
        let x_n = &x[ni * c * hw..(ni + 1) * c * hw];
        if k == 1 {
            out_n.copy_from_slice(&matmul(weight, x_n, o, c, hw, false, false));
            return;
        }
        let tile = rows_per_tile(ck2, w, h);
        let mut col = vec![0.0; ck2 * tile * w];
        let mut r0 = 0;
        while r0 < h {
            let rows = tile.min(h - r0);
            let tw = rows * w;
            im2col(x_n, c, h, w, k, r0, rows, &mut col[..ck2 * tw]);
            // SAFETY: the output view is o rows of tw columns starting at
            // column r0·w with row stride hw, all inside out_n.
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    ck2,
                    tw,
                    1.0,
                    weight.as_ptr(),
                    ck2 as isize,
                    1,
                    col.as_ptr(),
                    tw as isize,
                    1,
                    0.0,
                    out_n.as_mut_ptr().add(r0 * w),
                    hw as isize,
                    1,
                );
            }
            r0 += rows;
        }
    });
    out
}

/// Weight gradient of [`conv2d`]: `dW[o,c,i,j] = Σ g[n,o,y,x]·x[n,c,y+i-p,x+j-p]`.
pub fn conv2d_weight_grad(x: &[f64], xs: [usize; 4], g: &[f64], out_channels: usize, k: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let o = out_channels;
    let hw = h * w;
    let ck2 = c * k * k;
    let per_image: Vec<Vec<f64>> = par::map_collect(n, |ni| {
        let x_n = &x[ni * c * hw..(ni + 1) * c * hw];
        let g_n = &g[ni * o * hw..(ni + 1) * o * hw];
        if k == 1 {
            return matmul(g_n, x_n, o, hw, c, false, true);
        }
        let mut dw = vec![0.0; o * ck2];
        let tile = rows_per_tile(ck2, w, h);
        let mut col = vec![0.0; ck2 * tile * w];
        let mut r0 = 0;
        while r0 < h {
            let rows = tile.min(h - r0);
            let tw = rows * w;
            im2col(x_n, c, h, w, k, r0, rows, &mut col[..ck2 * tw]);
            // SAFETY: g view is o×tw with row stride hw; col is read as its
            // transpose (tw×ck2); dw is o×ck2.
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    tw,
                    ck2,
                    1.0,
                    g_n.as_ptr().add(r0 * w),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    tw as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    ck2 as isize,
                    1,
                );
            }
            r0 += rows;
        }
        dw
    });
    let mut total = vec![0.0; o * ck2];
    for part in &per_image {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// `out[c,o,i,j] = w[o,c,k-1-i,k-1-j]`. Maps a conv kernel to the kernel of
/// its input-gradient convolution. The map is its own adjoint.
pub fn flip_transpose(weight: &[f64], ws: [usize; 4]) -> Vec<f64> {
    let [o, c, k, _] = ws;
    let mut out = vec![0.0; weight.len()];
    for oi in 0..o {
        for ci in 0..c {
            for i in 0..k {
                for j in 0..k {
                    out[((ci * o + oi) * k + (k - 1 - i)) * k + (k - 1 - j)] = weight[((oi * c + ci) * k + i) * k + j];
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 average pooling over `n×c×h×w` (h, w even).
pub fn avg_pool2(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    par::for_each_chunk(&mut out, c * ho * wo, |ni, out_n| {
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst = &mut out_n[ci * ho * wo..(ci + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let a = plane[2 * y * w + 2 * xx];
                    let b = plane[2 * y * w + 2 * xx + 1];
                    let cc = plane[(2 * y + 1) * w + 2 * xx];
                    let d = plane[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = 0.25 * (a + b + cc + d);
                }
            }
        }
    });
    out
}

/// Adjoint of [`avg_pool2`]: spreads each value over its 2×2 window, scaled by ¼.
/// `xs` is the pooled (input) shape.
pub fn avg_pool2_adjoint(g: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    par::for_each_chunk(&mut out, c * ho * wo, |ni, out_n| {
        for ci in 0..c {
            let src = &g[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst = &mut out_n[ci * ho * wo..(ci + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = 0.25 * src[(y / 2) * w + xx / 2];
                }
            }
        }
    });
    out
}

/// Interpolation taps for 2× bilinear upsampling (half-pixel centers,
/// edge-clamped): output index `i` reads `w0·src[i0] + w1·src[i1]`.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// 2× bilinear upsampling of `n×c×h×w`.
pub fn upsample_bilinear2(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (ho, wo) = (2 * h, 2 * w);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut out = vec![0.0; n * c * ho * wo];
    par::for_each_chunk(&mut out, c * ho * wo, |ni, out_n| {
        let mut rowbuf = vec![0.0; wo];
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst = &mut out_n[ci * ho * wo..(ci + 1) * ho * wo];
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let top = wx0 * r0[x0] + wx1 * r0[x1];
                    let bot = wx0 * r1[x0] + wx1 * r1[x1];
                    rowbuf[xx] = wy0 * top + wy1 * bot;
                }
                dst[y * wo..(y + 1) * wo].copy_from_slice(&rowbuf);
            }
        }
    });
    out
}

/// Adjoint of [`upsample_bilinear2`]. `xs` is the low-resolution shape.
pub fn upsample_bilinear2_adjoint(g: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (ho, wo) = (2 * h, 2 * w);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut out = vec![0.0; n * c * h * w];
    par::for_each_chunk(&mut out, c * h * w, |ni, out_n| {
        for ci in 0..c {
            let src = &g[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            let dst = &mut out_n[ci * h * w..(ci + 1) * h * w];
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = src[y * wo + xx];
                    dst[y0 * w + x0] += wy0 * wx0 * v;
                    dst[y0 * w + x1] += wy0 * wx1 * v;
                    dst[y1 * w + x0] += wy1 * wx0 * v;
                    dst[y1 * w + x1] += wy1 * wx1 * v;
                }
            }
        }
    });
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Numpy-style broadcast of `shape` against `target`; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source strides of `shape` viewed inside `target` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let own = strides(shape);
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        if i + shape.len() >= rank {
            let j = i + shape.len() - rank;
            *o = if shape[j] == 1 { 0 } else { own[j] };
        }
    }
    out
}

/// Materializes `x` (shape `xs`) broadcast to `target`.
pub fn broadcast_to(x: &[f64], xs: &[usize], target: &[usize]) -> Vec<f64> {
    let n: usize = target.iter().product();
    if xs == target {
        return x.to_vec();
    }
    let bs = broadcast_strides(xs, target);
    let rank = target.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.push(x[0]);
        return out;
    }
    let inner = target[rank - 1];
    let inner_stride = bs[rank - 1];
    let mut idx = vec![0usize; rank];
    let outer = n.checked_div(inner).unwrap_or(0);
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|d| idx[d] * bs[d]).sum();
        if inner_stride == 0 {
            let v = x[base];
            out.extend(std::iter::repeat_n(v, inner));
        } else {
            out.extend_from_slice(&x[base..base + inner]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sums `x` (shape `xs`) down to `target`, the adjoint of [`broadcast_to`].
pub fn sum_to(x: &[f64], xs: &[usize], target: &[usize]) -> Vec<f64> {
    if xs == target {
        return x.to_vec();
    }
    let m: usize = target.iter().product();
    let mut out = vec![0.0; m];
    let bs = broadcast_strides(target, xs);
    let rank = xs.len();
    if rank == 0 {
        out[0] = x[0];
        return out;
    }
    let inner = xs[rank - 1];
    let inner_stride = bs[rank - 1];
    let mut idx = vec![0usize; rank];
    let outer = x.len().checked_div(inner).unwrap_or(0);
    for o in 0..outer {
        let base: usize = (0..rank - 1).map(|d| idx[d] * bs[d]).sum();
        let row = &x[o * inner..(o + 1) * inner];
        if inner_stride == 0 {
            out[base] += row.iter().sum::<f64>();
        } else {
            for (t, v) in out[base..base + inner].iter_mut().zip(row) {
                *t += v;
            }
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < xs[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
