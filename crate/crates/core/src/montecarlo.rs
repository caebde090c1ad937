//! Independent runs over many seeds. Runs share nothing mutable, so with
//! the `parallel` feature they are spread over the rayon pool; results are
//! always returned in seed order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn run_seeds_sequential<T, F>(seeds: &[u64], job: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.iter().map(|&s| job(s)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_seeds_parallel<T, F>(seeds: &[u64], job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    seeds.par_iter().map(|&s| job(s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_seeds_parallel<T, F>(seeds: &[u64], job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    run_seeds_sequential(seeds, job)
}

/// Parallel when the `parallel` feature is enabled, sequential otherwise.
pub fn run_seeds<T, F>(seeds: &[u64], job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    run_seeds_parallel(seeds, job)
}

/// Same as [`run_seeds`] over arbitrary work items.
pub fn map_items<I, T, F>(items: &[I], job: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(job).collect()
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
