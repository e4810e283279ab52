//! Data-parallel helpers.
//!
//! With the `parallel` feature these fan out over rayon's pool; without it
//! they run the same closures sequentially. Results are always collected in
//! index order so reductions downstream are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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

/// Map `f` over a mutable slice, returning results in slice order.
pub fn map_slice_mut<A, T, F>(items: &mut [A], f: F) -> Vec<T>
where
    A: Send,
    T: Send,
    F: Fn(usize, &mut A) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter_mut()
            .enumerate()
            .map(|(i, a)| f(i, a))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().map(|(i, a)| f(i, a)).collect()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
