//! Explicit control over the degree of parallelism.
//!
//! Every parallel routine in the crate runs on the ambient rayon pool, so
//! wrapping a call in [`with_threads`] pins how many workers it may use.
//! Results never depend on the thread count.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "PRNU_MATCH_THREADS";

/// Explicit value, else `PRNU_MATCH_THREADS`, else the available cores.
pub fn resolve_threads(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 { Err(Error::config("thread count must be >= 1")) } else { Ok(n) };
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        };
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Run `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
