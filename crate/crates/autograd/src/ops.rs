//! Differentiable tensor operations.

use crate::array::Array;
use crate::kernels;
use crate::par;
use crate::tensor::{Op, Tensor};

fn shape4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64 + Sync + Send, op: impl Op + 'static) -> Tensor {
    let data = par::map_slice(x.data(), f);
    Tensor::from_op(Array::new(x.shape(), data), vec![x.clone()], op)
}

fn mask_of(x: &Tensor, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
    Tensor::constant(Array::new(x.shape(), par::map_slice(x.data(), f)))
}

fn want(inputs: &[Tensor], i: usize) -> bool {
    inputs[i].requires_grad()
}

struct Neg;
impl Op for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.neg())]
    }
}

struct Exp;
impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(out))]
    }
}

struct Log;
impl Op for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.div(&inputs[0]))]
    }
}

struct Tanh;
impl Op for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&out.mul(out).neg().add_scalar(1.0)))]
    }
}

struct Sigmoid;
impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(out).mul(&out.neg().add_scalar(1.0)))]
    }
}

struct Sqrt;
impl Op for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.div(out).mul_scalar(0.5))]
    }
}

struct Powf(f64);
impl Op for Powf {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let p = self.0;
        vec![Some(g.mul(&inputs[0].powf(p - 1.0)).mul_scalar(p))]
    }
}

struct Masked(&'static str, fn(f64, f64) -> f64, f64);
impl Op for Masked {
    fn name(&self) -> &'static str {
        self.0
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (f, a) = (self.1, self.2);
        vec![Some(g.mul(&mask_of(&inputs[0], move |v| f(v, a))))]
    }
}

struct MulScalar(f64);
impl Op for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul_scalar(self.0))]
    }
}

struct AddScalar;
impl Op for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct Add;
impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Sub;
impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), want(inputs, 1).then(|| g.neg())]
    }
}

struct Mul;
impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            want(inputs, 0).then(|| g.mul(&inputs[1])),
            want(inputs, 1).then(|| g.mul(&inputs[0])),
        ]
    }
}

struct Div;
impl Op for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            want(inputs, 0).then(|| g.div(&inputs[1])),
            want(inputs, 1).then(|| g.mul(out).div(&inputs[1]).neg()),
        ]
    }
}

struct Reshape;
impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct BroadcastTo;
impl Op for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(inputs[0].shape()))]
    }
}

struct SumTo;
impl Op for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(inputs[0].shape()))]
    }
}

struct Transpose;
impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.t())]
    }
}

struct MatMul;
impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            want(inputs, 0).then(|| g.matmul(&b.t())),
            want(inputs, 1).then(|| a.t().matmul(g)),
        ]
    }
}

struct Concat {
    axis: usize,
}
impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let len = t.dim(self.axis);
                let r = t.requires_grad().then(|| g.narrow(self.axis, offset, len));
                offset += len;
                r
            })
            .collect()
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}
impl Op for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_axis(self.axis, self.start, inputs[0].dim(self.axis)))]
    }
}

struct PadAxis {
    axis: usize,
    start: usize,
}
impl Op for PadAxis {
    fn name(&self) -> &'static str {
        "pad_axis"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.narrow(self.axis, self.start, inputs[0].dim(self.axis)))]
    }
}

struct IndexSelect {
    ids: Vec<usize>,
}
impl Op for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.index_add(&self.ids, inputs[0].dim(0)))]
    }
}

struct IndexAdd {
    ids: Vec<usize>,
}
impl Op for IndexAdd {
    fn name(&self) -> &'static str {
        "index_add"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.index_select(&self.ids))]
    }
}

struct Conv2d;
impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        vec![
            want(inputs, 0).then(|| g.conv2d(&w.flip_transpose())),
            want(inputs, 1).then(|| x.conv2d_weight_grad(g, w.dim(2))),
        ]
    }
}

struct Conv2dWeightGrad;
impl Op for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let (x, g) = (&inputs[0], &inputs[1]);
        vec![
            want(inputs, 0).then(|| g.conv2d(&up.flip_transpose())),
            want(inputs, 1).then(|| x.conv2d(up)),
        ]
    }
}

struct FlipTranspose;
impl Op for FlipTranspose {
    fn name(&self) -> &'static str {
        "flip_transpose"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.flip_transpose())]
    }
}

struct AvgPool2;
impl Op for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.avg_pool2_adjoint())]
    }
}

struct AvgPool2Adjoint;
impl Op for AvgPool2Adjoint {
    fn name(&self) -> &'static str {
        "avg_pool2_adjoint"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.avg_pool2())]
    }
}

struct Upsample2;
impl Op for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample_bilinear2"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.upsample_bilinear2_adjoint())]
    }
}

struct Upsample2Adjoint;
impl Op for Upsample2Adjoint {
    fn name(&self) -> &'static str {
        "upsample_bilinear2_adjoint"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.upsample_bilinear2())]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(&self, other: &Tensor, f: fn(f64, f64) -> f64, op: impl Op + 'static) -> Tensor {
        if self.shape() == other.shape() {
            let data = par::zip_slice(self.data(), other.data(), f);
            return Tensor::from_op(Array::new(self.shape(), data), vec![self.clone(), other.clone()], op);
        }
        let shape = kernels::broadcast_shape(self.shape(), other.shape())
            .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", self.shape(), other.shape()));
        let a = self.broadcast_to(&shape);
        let b = other.broadcast_to(&shape);
        a.binary(&b, f, op)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b, Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b, Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b, Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a / b, Div)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |v| -v, Neg)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, Exp)
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, Log)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |v| 1.0 / (1.0 + (-v).exp()), Sigmoid)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, Sqrt)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, move |v| v.powf(p), Powf(p))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            Masked("leaky_relu", |v, s| if v > 0.0 { 1.0 } else { s }, slope),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(
            self,
            |v| v.max(0.0),
            Masked("relu", |v, _| if v > 0.0 { 1.0 } else { 0.0 }, 0.0),
        )
    }

    /// `max(x, lo)`; gradient flows only where `x > lo`.
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        unary(
            self,
            move |v| v.max(lo),
            Masked("clamp_min", |v, lo| if v > lo { 1.0 } else { 0.0 }, lo),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        unary(self, move |v| v * s, MulScalar(s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, move |v| v + s, AddScalar)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape() {
            return self.clone();
        }
        let value = self.value().clone().reshaped(shape);
        Tensor::from_op(value, vec![self.clone()], Reshape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape() {
            return self.clone();
        }
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Tensor::from_op(Array::new(shape, data), vec![self.clone()], BroadcastTo)
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape() {
            return self.clone();
        }
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Tensor::from_op(Array::new(shape, data), vec![self.clone()], SumTo)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keep(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keep(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keep(axes).mul_scalar(1.0 / count as f64)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "t() needs a matrix, got {:?}", self.shape());
        let (r, c) = (self.dim(0), self.dim(1));
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op(Array::new(&[c, r], out), vec![self.clone()], Transpose)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.ndim() == 2 && other.ndim() == 2 && self.dim(1) == other.dim(0),
            "matmul shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.dim(0), self.dim(1), other.dim(1));
        let data = kernels::matmul(self.data(), other.data(), m, k, n, false, false);
        Tensor::from_op(Array::new(&[m, n], data), vec![self.clone(), other.clone()], MatMul)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, n, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= n, "narrow {start}+{len} exceeds axis size {n}");
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(Array::new(&shape, out), vec![self.clone()], Narrow { axis, start })
    }

    /// Embeds `self` at `start` inside a zero tensor of size `full` along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= full);
        let src = self.data();
        let mut out = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Tensor::from_op(Array::new(&shape, out), vec![self.clone()], PadAxis { axis, start })
    }

    /// Gathers rows of a 2-D table.
    pub fn index_select(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (rows, cols) = (self.dim(0), self.dim(1));
        let src = self.data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            assert!(i < rows, "index {i} out of range for {rows} rows");
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Tensor::from_op(
            Array::new(&[ids.len(), cols], out),
            vec![self.clone()],
            IndexSelect { ids: ids.to_vec() },
        )
    }

    /// Scatter-adds row `k` of `self` into row `ids[k]` of a `rows`-row zero table.
    pub fn index_add(&self, ids: &[usize], rows: usize) -> Tensor {
        assert_eq!(self.ndim(), 2);
        assert_eq!(self.dim(0), ids.len());
        let cols = self.dim(1);
        let src = self.data();
        let mut out = vec![0.0; rows * cols];
        for (k, &i) in ids.iter().enumerate() {
            for (t, v) in out[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(&src[k * cols..(k + 1) * cols])
            {
                *t += v;
            }
        }
        Tensor::from_op(
            Array::new(&[rows, cols], out),
            vec![self.clone()],
            IndexAdd { ids: ids.to_vec() },
        )
    }

    /// Stride-1 same-padded convolution; `weight` is `o×c×k×k` with odd `k`.
    pub fn conv2d(&self, weight: &Tensor) -> Tensor {
        let xs = shape4(self.shape());
        let ws = shape4(weight.shape());
        let data = kernels::conv2d(self.data(), xs, weight.data(), ws);
        Tensor::from_op(
            Array::new(&[xs[0], ws[0], xs[2], xs[3]], data),
            vec![self.clone(), weight.clone()],
            Conv2d,
        )
    }

    /// Weight gradient of a conv with input `self` and output gradient `g`.
    pub fn conv2d_weight_grad(&self, g: &Tensor, k: usize) -> Tensor {
        let xs = shape4(self.shape());
        let o = g.dim(1);
        let data = kernels::conv2d_weight_grad(self.data(), xs, g.data(), o, k);
        Tensor::from_op(
            Array::new(&[o, xs[1], k, k], data),
            vec![self.clone(), g.clone()],
            Conv2dWeightGrad,
        )
    }

    pub fn flip_transpose(&self) -> Tensor {
        let ws = shape4(self.shape());
        let data = kernels::flip_transpose(self.data(), ws);
        Tensor::from_op(
            Array::new(&[ws[1], ws[0], ws[2], ws[3]], data),
            vec![self.clone()],
            FlipTranspose,
        )
    }

    pub fn avg_pool2(&self) -> Tensor {
        let xs = shape4(self.shape());
        assert!(
            xs[2].is_multiple_of(2) && xs[3].is_multiple_of(2),
            "avg_pool2 needs even spatial dims, got {xs:?}"
        );
        let data = kernels::avg_pool2(self.data(), xs);
        Tensor::from_op(
            Array::new(&[xs[0], xs[1], xs[2] / 2, xs[3] / 2], data),
            vec![self.clone()],
            AvgPool2,
        )
    }

    pub fn avg_pool2_adjoint(&self) -> Tensor {
        let xs = shape4(self.shape());
        let data = kernels::avg_pool2_adjoint(self.data(), xs);
        Tensor::from_op(
            Array::new(&[xs[0], xs[1], xs[2] * 2, xs[3] * 2], data),
            vec![self.clone()],
            AvgPool2Adjoint,
        )
    }

    pub fn upsample_bilinear2(&self) -> Tensor {
        let xs = shape4(self.shape());
        let data = kernels::upsample_bilinear2(self.data(), xs);
        Tensor::from_op(
            Array::new(&[xs[0], xs[1], xs[2] * 2, xs[3] * 2], data),
            vec![self.clone()],
            Upsample2,
        )
    }

    pub fn upsample_bilinear2_adjoint(&self) -> Tensor {
        let s = shape4(self.shape());
        assert!(s[2].is_multiple_of(2) && s[3].is_multiple_of(2));
        let xs = [s[0], s[1], s[2] / 2, s[3] / 2];
        let data = kernels::upsample_bilinear2_adjoint(self.data(), xs);
        Tensor::from_op(Array::new(&xs, data), vec![self.clone()], Upsample2Adjoint)
    }
}

/// Concatenates tensors along `axis`.
pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
    assert!(!tensors.is_empty(), "concat of zero tensors");
    let first = tensors[0].shape().to_vec();
    let (outer, _, inner) = split_axis(&first, axis);
    let mut total = 0;
    for t in tensors {
        let s = t.shape();
        assert!(
            s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
            "concat shape mismatch: {:?} vs {:?}",
            s,
            first
        );
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in tensors {
            let len = t.dim(axis) * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first;
    shape[axis] = total;
    Tensor::from_op(Array::new(&shape, out), tensors.to_vec(), Concat { axis })
}
