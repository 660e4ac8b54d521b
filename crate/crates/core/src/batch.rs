//! Data-parallel helpers for per-sentence work (decoding, evaluation,
//! per-example gradients).
//!
//! With the `parallel` feature (default) the indexed map runs on rayon;
//! without it, the same code path degrades to a sequential loop. Results
//! are always collected in input order, so outputs are identical either
//! way. [`map_serial`] is always available for benchmarks comparing the
//! two and for latency measurements that must stay single-threaded.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_items<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Applies `f` to every item, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_items<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Sequential reference implementation of [`map_items`].
pub fn map_serial<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}
