//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper here produces bit-identical results with and without the
//! `parallel` feature: work is split on fixed chunk boundaries (never on
//! thread count), outputs are collected in input order, and reductions run
//! sequentially over the ordered partials.

/// Chunk size used for deterministic partial reductions.
pub const REDUCE_CHUNK: usize = 4096;

/// Minimum number of rows before a matmul is dispatched to the parallel path.
pub const PAR_MIN_ROWS: usize = 32;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order (sequential fallback).
#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sum `f(item)` over `items` via fixed-size chunk partials reduced in order.
///
/// The chunk partition depends only on `REDUCE_CHUNK`, so the floating-point
/// summation order is identical regardless of thread count or feature flags.
pub fn chunked_sum<T, F>(items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    let partials = chunk_partials(items, |chunk| chunk.iter().map(&f).sum::<f64>());
    partials.into_iter().sum()
}

/// Apply `g` to each fixed-size chunk of `items` and return the per-chunk
/// results in chunk order.
#[cfg(feature = "parallel")]
pub fn chunk_partials<T, U, G>(items: &[T], g: G) -> Vec<U>
where
    T: Sync,
    U: Send,
    G: Fn(&[T]) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_chunks(REDUCE_CHUNK).map(|c| g(c)).collect()
}

/// Sequential fallback of [`chunk_partials`] over the same chunk boundaries.
#[cfg(not(feature = "parallel"))]
pub fn chunk_partials<T, U, G>(items: &[T], g: G) -> Vec<U>
where
    G: Fn(&[T]) -> U,
{
    items.chunks(REDUCE_CHUNK).map(|c| g(c)).collect()
}
