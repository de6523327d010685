//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature, work is spread over a rayon pool sized by
//! [`Jobs`]; without it (or with `Jobs::SEQUENTIAL`) every helper degrades to
//! a plain sequential loop. Results always come back in input order so that
//! callers can reduce in a fixed order and stay bit-reproducible.

use std::num::NonZeroUsize;

/// Worker-count bound for per-example stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Jobs(NonZeroUsize);

impl Jobs {
    pub const SEQUENTIAL: Jobs = Jobs(NonZeroUsize::MIN);

    pub fn new(n: usize) -> Self {
        Jobs(NonZeroUsize::new(n.max(1)).unwrap())
    }

    /// One worker per available core.
    pub fn all() -> Self {
        Jobs::new(
            std::thread::available_parallelism()
                .map(NonZeroUsize::get)
                .unwrap_or(1),
        )
    }

    pub fn get(self) -> usize {
        self.0.get()
    }
}

impl Default for Jobs {
    fn default() -> Self {
        Jobs::SEQUENTIAL
    }
}

#[cfg(feature = "parallel")]
mod pool {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    use rayon::ThreadPool;

    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();

    pub fn get(threads: usize) -> Arc<ThreadPool> {
        let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = pools.lock().unwrap();
        guard
            .entry(threads)
            .or_insert_with(|| {
                Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .expect("failed to build rayon pool"),
                )
            })
            .clone()
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map<T, U, F>(items: &[T], jobs: Jobs, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs.get() > 1 && items.len() > 1 {
        use rayon::prelude::*;
        return pool::get(jobs.get()).install(|| items.par_iter().map(&f).collect());
    }
    let _ = jobs;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<U, F>(n: usize, jobs: Jobs, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs.get() > 1 && n > 1 {
        use rayon::prelude::*;
        return pool::get(jobs.get()).install(|| (0..n).into_par_iter().map(&f).collect());
    }
    let _ = jobs;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map`]; the first error in input order wins.
pub fn try_map<T, U, E, F>(items: &[T], jobs: Jobs, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map(items, jobs, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map(&xs, Jobs::SEQUENTIAL, |x| x * x);
        let par = map(&xs, Jobs::new(4), |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(map_range(10, Jobs::new(3), |i| i), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_jobs_means_one() {
        assert_eq!(Jobs::new(0).get(), 1);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> =
            try_map(&xs, Jobs::new(2), |&x| if x >= 3 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
