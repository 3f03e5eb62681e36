//! Thin switch between rayon and sequential iteration.
//!
//! Every data-parallel loop in the crate goes through these helpers, so the
//! `parallel` feature is the single point where rayon enters. The helpers only
//! ever hand a task disjoint data (a chunk, or an index range mapped to an
//! owned output slot), which keeps results bitwise identical to the
//! sequential fallback.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f` over consecutive chunks of `data`, chunk index first.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map indices `0..n` to owned results, preserving order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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
