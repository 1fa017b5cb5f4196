//! Data-parallel loop shims. With the `parallel` feature (default) the hot
//! loops fan out through rayon; without it they compile to plain iterators.
//!
//! Floating-point reductions are kept sequential everywhere so that results
//! are bit-identical regardless of thread count; only pure element maps go
//! parallel.

#[cfg(feature = "parallel")]
pub(crate) use rayon::prelude::*;

/// Map `f` over `0..len` into a fresh `Vec`, in parallel when enabled.
pub(crate) fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Apply `f` to each (index, element) of a mutable slice, in parallel when
/// enabled.
pub(crate) fn for_each_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        data.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
}

/// Apply `f` to contiguous chunks `(chunk_index, chunk)` of a mutable
/// slice, in parallel when enabled. Used for per-particle state blocks.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
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
