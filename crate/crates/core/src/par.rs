//! Runtime switch for the rayon-backed kernels.
//!
//! With the `parallel` feature disabled the crate has no rayon dependency and
//! every kernel runs sequentially. With the feature enabled, parallelism can
//! still be turned off at runtime (used by the benches to compare both paths
//! and by the acceptance suite to time the single-threaded pipeline).

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Applies `f` to each fixed-size row of `out`, in parallel when enabled and
/// the workload is large enough to amortize the fork/join overhead.
///
/// Each row is touched by exactly one closure invocation, so the result is
/// bitwise identical to the sequential path.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, min_rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && out.len() / row_len >= min_rows {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = min_rows;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n` collecting the results in index order, in parallel
/// when enabled.
pub fn map_indices<T, F>(n: usize, min_items: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n >= min_items {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = min_items;
    (0..n).map(f).collect()
}
