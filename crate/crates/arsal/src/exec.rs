//! Batch execution helpers: data-parallel over scenarios/images/traces when
//! the `parallel` feature is enabled, with an always-available sequential
//! path for comparison and for feature-less builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when built with the `parallel` feature.
pub fn map_batch<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Sequential twin of [`map_batch`]; the benchmark suite compares the two.
pub fn map_batch_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over index range `0..n`, in parallel when enabled.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
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

/// Number of worker threads the parallel path will use.
pub fn parallelism() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configures the global thread pool. Call once, before any parallel work;
/// later calls fail harmlessly if the pool already started.
#[cfg(feature = "parallel")]
pub fn init_thread_pool(jobs: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..100).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(map_batch(&xs, f), map_batch_seq(&xs, f));
        assert_eq!(map_indices(10, |i| i * 2), (0..10).map(|i| i * 2).collect::<Vec<_>>());
    }
}
