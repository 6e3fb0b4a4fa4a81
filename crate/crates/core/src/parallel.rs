//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default), the helpers fan work out via
//! rayon; without it they run sequentially. Results are always merged in
//! index order so outputs are identical either way.

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Same as [`map_indexed`] but never parallel; kept for benchmarking the
/// two execution paths against each other.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Run `f` over disjoint row chunks of `out`.
///
/// Each chunk is `chunk_rows * row_len` elements; `f` receives the chunk
/// index and the mutable slice. Writes are disjoint, so the result does not
/// depend on scheduling.
pub fn for_each_row_chunk<F>(out: &mut [f64], row_len: usize, chunk_rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunk = chunk_rows * row_len;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(idx, slice)| f(idx, slice));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk)
            .enumerate()
            .for_each(|(idx, slice)| f(idx, slice));
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
