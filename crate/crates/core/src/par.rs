//! Thin switch between rayon and sequential iteration.
//!
//! Every helper preserves input order in its output, so callers get the same
//! result regardless of the `parallel` feature or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
#[cfg(feature = "parallel")]
pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    F: Fn(&A) -> T,
{
    items.iter().map(f).collect()
}

/// Applies `f` to each `chunk`-sized row of `data` together with its row index.
#[cfg(feature = "parallel")]
pub fn for_each_row_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    if chunk == 0 {
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
