//! Bounded data parallelism over independent tasks.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maps `f` over `items` on at most `parallelism` threads. Output order matches
/// input order, so results are independent of scheduling as long as `f` only
/// draws from task-keyed RNG streams.
pub fn map<T, U, F>(parallelism: usize, items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    if parallelism <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::config(format!("cannot start {parallelism} worker threads: {e}")))?;
    pool.install(|| items.into_par_iter().map(f).collect())
}
