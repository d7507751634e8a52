//! Execution policy for the data-parallel kernels.
//!
//! Every kernel in the crate goes through the helpers here. With the
//! `parallel` feature enabled the work is spread over the rayon pool;
//! [`set_parallel`] switches to the sequential path at runtime (the benches
//! use this to compare both). Reductions are evaluated over fixed-size
//! chunks whose partial sums are combined in index order, so both paths
//! produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

/// Chunk length for deterministic reductions.
pub const REDUCE_CHUNK: usize = 1024;

/// Below this many items the pool overhead outweighs the work.
pub const MIN_PARALLEL_LEN: usize = 2048;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable parallel execution (no effect without the `parallel` feature).
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

/// Whether kernels currently run on the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Build a vector `v[i] = f(i)` for `i in 0..n`.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Overwrite `out[i] = f(i)` in place.
pub fn fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, x)| *x = f(i));
        return;
    }
    for (i, x) in out.iter_mut().enumerate() {
        *x = f(i);
    }
}

/// Per-chunk evaluation; parallel when the underlying item count is large.
fn map_chunks<T, F>(n: usize, chunks: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        return (0..chunks).into_par_iter().map(f).collect();
    }
    let _ = n;
    (0..chunks).map(f).collect()
}

/// Deterministic sum of `f(i)` over `0..n`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let [s] = sum_n(n, |i| [f(i)]);
    s
}

/// Deterministic component-wise sum of `f(i)` over `0..n`.
pub fn sum_n<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial = |c: usize| {
        let mut acc = [0.0; K];
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            let v = f(i);
            for k in 0..K {
                acc[k] += v[k];
            }
        }
        acc
    };
    let parts = map_chunks(n, chunks, partial);
    let mut total = [0.0; K];
    for p in parts {
        for k in 0..K {
            total[k] += p[k];
        }
    }
    total
}

/// Deterministic maximum of `f(i)` over `0..n` (`-inf` when empty).
pub fn max<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let parts = map_chunks(n, chunks, |c| {
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        (c * REDUCE_CHUNK..end).map(&f).fold(f64::NEG_INFINITY, f64::max)
    });
    parts.into_iter().fold(f64::NEG_INFINITY, f64::max)
}
