//! Data-parallel map with a sequential fallback.
//!
//! Everything batch-shaped in this crate (sample rendering, per-sample
//! gradient passes) funnels through [`map_collect`], which preserves input
//! order. Reductions over the results must then be written in that order,
//! which is what makes the parallel feature bitwise-identical to the
//! sequential build: the same floating-point additions happen in the same
//! sequence, only the element work is spread across threads.

/// How batch-shaped work is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    /// Parallel when the `parallel` feature is compiled in, otherwise
    /// sequential. [`map_collect`] silently degrades to sequential when the
    /// feature is absent, so `Parallel` is always safe to request.
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Applies `f` to every item and returns the results in input order.
pub fn map_collect<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => map_collect_seq(items, f),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => map_collect_seq(items, f),
    }
}

/// The plain sequential path, also used directly by code that must not
/// spawn threads (for example the determinism checks).
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
