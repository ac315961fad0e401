//! Worker pool for batch-parallel evaluation and scoring.
//!
//! `NPP_THREADS` caps the worker count; unset or invalid values fall back to
//! the machine default. Work is split so each output is produced by exactly
//! one task with a fixed internal order, so thread count never changes
//! results.

use once_cell::sync::Lazy;
use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: Lazy<ThreadPool> = Lazy::new(|| {
    let threads = std::env::var("NPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0); // 0 = rayon default
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("worker pool")
});

/// Run `f` inside the shared pool.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    POOL.install(f)
}
