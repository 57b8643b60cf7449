//! Order-preserving map over independent jobs.
//!
//! With the `parallel` feature (default) jobs run on the rayon pool; without
//! it they run sequentially. Results come back in input order either way, so
//! outputs do not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential reference used by benchmarks and equivalence tests.
pub fn map_sequential<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

/// Worker count override, read from `SCHEMANET_WORKERS`.
pub const WORKERS_ENV: &str = "SCHEMANET_WORKERS";

/// Sizes the global pool from [`WORKERS_ENV`] if set. Safe to call more than once.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = map((0..100).collect(), |x: u64| x * x);
        assert_eq!(out, map_sequential((0..100).collect(), |x: u64| x * x));
    }
}
