//! Execution strategy for the embarrassingly parallel phases of training:
//! candidate-pool scoring and per-episode adaptation.
//!
//! Work items are mapped independently — each closure builds its own tape —
//! and results are collected in input order, so the parallel path is
//! bit-identical to the sequential one. The `parallel` feature (on by
//! default) routes [`map_collect`] through rayon; without it the crate has
//! no threading at all. [`seq_map`] and [`par_map`] stay available for
//! side-by-side comparison.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential map, always available.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Data-parallel map over a rayon thread pool, preserving input order.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// The crate-wide default: parallel when the `parallel` feature is enabled,
/// sequential otherwise. Identical results either way.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par_map(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}
