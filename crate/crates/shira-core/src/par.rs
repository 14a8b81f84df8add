//! Thread-budget plumbing for the optional rayon backend.
//!
//! `SHIRA_THREADS` caps internal parallelism. When it is unset, general
//! operations may use all available cores; benchmark harnesses default to a
//! single thread for timing stability. Every parallel kernel in this crate
//! partitions work so that each output element is produced by exactly the
//! same sequence of floating-point operations as the sequential fallback,
//! so results are bit-identical regardless of the thread count.

use std::sync::OnceLock;

/// Thread cap for general operations: `SHIRA_THREADS` if set and valid,
/// otherwise the number of available cores.
pub fn thread_budget() -> usize {
    static BUDGET: OnceLock<usize> = OnceLock::new();
    *BUDGET.get_or_init(|| match env_threads() {
        Some(n) => n,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    })
}

/// Thread cap for benchmark harnesses: `SHIRA_THREADS` if set, otherwise 1.
pub fn bench_thread_budget() -> usize {
    env_threads().unwrap_or(1)
}

fn env_threads() -> Option<usize> {
    std::env::var("SHIRA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

#[cfg(feature = "parallel")]
pub(crate) fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_budget())
            .build()
            .expect("failed to build thread pool")
    })
}

/// Runs `f` under the crate's thread pool when the `parallel` feature is
/// enabled and more than one thread is budgeted; otherwise runs it inline.
pub fn run<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if thread_budget() > 1 {
            return pool().install(f);
        }
    }
    f()
}

/// True when parallel kernels should be used.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && thread_budget() > 1
}
