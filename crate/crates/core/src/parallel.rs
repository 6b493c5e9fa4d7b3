//! Optional data parallelism, capped by the `CSAT_THREADS` environment variable.
//!
//! `CSAT_THREADS=0` (or unset) runs everything on the calling thread. Any other
//! value runs order-preserving maps on a private pool of that many threads.
//! Results are collected in input order, so output is bit-identical either way.

use rayon::prelude::*;

pub const THREADS_ENV: &str = "CSAT_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Maps `f` over `items`, preserving order.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let threads = thread_count();
    if threads == 0 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let xs: Vec<u64> = (0..100).collect();
        let ys = ordered_map(&xs, |x| x * x);
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
    }
}
