//! Data-parallel map helpers with a sequential fallback.
//!
//! Work items must be independent and draw randomness only from streams they
//! derive themselves; the helpers then return results in index order, so the
//! parallel and sequential builds produce bit-identical output.

/// Map `f` over `0..n`, preserving index order in the result.
/// Dispatches to rayon when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential reference path; always available so benches and tests can
/// compare against the parallel path within one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Explicit rayon path, available only with the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise() {
        let root = RngStream::root(42);
        let job = |i: usize| {
            let mut rng = root.derive(i as u64);
            (0..100).map(|_| rng.gaussian()).sum::<f64>()
        };
        let a = map_indexed(1000, job);
        let b = map_indexed_seq(1000, job);
        assert_eq!(a, b);
    }
}
