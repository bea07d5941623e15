//! Data-parallel fan-out with a sequential fallback.
//!
//! Independent work items (test samples during evaluation, `(method, K,
//! seed)` protocol runs, gradient-check instances) map through
//! [`ordered_map`]: with the `parallel` feature (default) items run on the
//! rayon pool, without it they run in order on the calling thread. Results
//! come back in input order either way and every item is a pure function
//! of its input, so the feature flag never changes a single output byte.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order in the output.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ordered_map_sequential(items, f)
    }
}

/// Always-sequential variant; the benchmark suite compares this against
/// [`ordered_map_parallel`] on identical workloads.
pub fn ordered_map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Always-parallel variant (only with the `parallel` feature).
#[cfg(feature = "parallel")]
pub fn ordered_map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let squares = ordered_map(&xs, |&x| x * x);
        assert_eq!(squares, xs.iter().map(|&x| x * x).collect::<Vec<_>>());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let xs: Vec<f64> = (0..512).map(|i| (i as f64).sin()).collect();
        let f = |x: &f64| x.exp().ln_1p();
        assert_eq!(ordered_map_parallel(&xs, f), ordered_map_sequential(&xs, f));
    }
}
