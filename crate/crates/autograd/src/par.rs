//! Data-parallel helpers. With the `parallel` feature these run on the rayon
//! pool; without it they fall back to plain sequential loops. Every helper
//! partitions work by index so results are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized pieces of `out`.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Evaluates `f` for `0..n` and collects the results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Elementwise map over a slice; large inputs are split into fixed chunks.
pub fn map_slice<F>(src: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    const CHUNK: usize = 1 << 15;
    let mut out = vec![0.0; src.len()];
    if src.len() < CHUNK {
        for (o, &s) in out.iter_mut().zip(src) {
            *o = f(s);
        }
        return out;
    }
    for_each_chunk(&mut out, CHUNK, |i, c| {
        let base = i * CHUNK;
        for (j, o) in c.iter_mut().enumerate() {
            *o = f(src[base + j]);
        }
    });
    out
}

/// Elementwise combination of two equally sized slices.
pub fn zip_slice<F>(a: &[f64], b: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    const CHUNK: usize = 1 << 15;
    let mut out = vec![0.0; a.len()];
    if a.len() < CHUNK {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return out;
    }
    for_each_chunk(&mut out, CHUNK, |i, c| {
        let base = i * CHUNK;
        for (j, o) in c.iter_mut().enumerate() {
            *o = f(a[base + j], b[base + j]);
        }
    });
    out
}

/// Whether kernels were compiled with rayon support.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
