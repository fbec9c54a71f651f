//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces output in input order, so results are identical with
//! the `parallel` feature on or off. The `*_seq` variants are always compiled;
//! the benches use them to compare both lanes in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items, collecting in order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential map, available regardless of features.
#[doc(hidden)]
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Run `f` on each `width`-sized chunk of `out`, passing the chunk index.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    out.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(out: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, chunk) in out.chunks_mut(width).enumerate() {
        f(i, chunk);
    }
}

/// Sequential chunk loop, available regardless of features.
#[doc(hidden)]
pub fn for_each_chunk_seq<T, F>(out: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, chunk) in out.chunks_mut(width).enumerate() {
        f(i, chunk);
    }
}
