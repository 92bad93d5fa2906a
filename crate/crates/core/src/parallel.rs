//! Thread-count control. Results never depend on the thread count; only speed does.

use crate::error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "HIMAMBA_THREADS";

/// Thread cap from `HIMAMBA_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `f` under the `HIMAMBA_THREADS` cap when set, otherwise on the global pool.
pub fn with_env_threads<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads_from_env() {
        Some(n) => with_threads(n, f),
        None => Ok(f()),
    }
}
