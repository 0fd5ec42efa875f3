//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it the same functions run sequentially. Reductions are always done
//! over fixed-size chunks combined in chunk order, so results are bit-identical
//! regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per reduction chunk. Fixed so that float sums never depend on scheduling.
pub const CHUNK: usize = 1024;

/// `items.iter().map(f).collect()`, possibly in parallel. Order is preserved.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel. Order is preserved.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Folds each `CHUNK`-sized slice with `fold` and combines the partials in order.
pub fn chunked_reduce<T, A, I, F, C>(items: &[T], init: I, fold: F, combine: C) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, &T) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let fold_chunk = |chunk: &[T]| chunk.iter().fold(init(), &fold);
    #[cfg(feature = "parallel")]
    let partials: Vec<A> = items.par_chunks(CHUNK).map(fold_chunk).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = items.chunks(CHUNK).map(fold_chunk).collect();
    partials.into_iter().fold(init(), combine)
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential_fold_of_chunks() {
        let xs: Vec<f64> = (0..5000).map(|i| (i as f64).sin()).collect();
        let got = chunked_reduce(&xs, || 0.0, |a, x| a + x, |a, b| a + b);
        let want = xs
            .chunks(CHUNK)
            .map(|c| c.iter().fold(0.0, |a, x| a + x))
            .fold(0.0, |a, b| a + b);
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
