//! Data-parallel map helpers.
//!
//! All hot loops in this crate are order-preserving maps over independent
//! items, so the parallel and sequential paths produce bit-identical output.
//! The `parallel` feature (default) routes them through rayon; without it
//! they fall back to plain iterators.

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Sequential map with the same shape as [`maybe_par_map`]; always built so
/// benchmarks can compare both paths in one binary.
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Map `f` over an index range, preserving order.
#[cfg(feature = "parallel")]
pub fn maybe_par_map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over an index range, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    F: Fn(usize) -> O,
{
    (0..n).map(f).collect()
}

/// Sequential counterpart of [`maybe_par_map_range`].
pub fn seq_map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    F: Fn(usize) -> O,
{
    (0..n).map(f).collect()
}
