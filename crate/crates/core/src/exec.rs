//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan out over rayon's
//! pool; without it, or while [`force_sequential`] is set, they run on the
//! calling thread. Results always come back in input order, so callers see
//! identical output either way.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

thread_local! {
    static LOCAL_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PHASE_CURATOR_THREADS";

/// Route every helper through the sequential path (process wide).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) && !LOCAL_SEQUENTIAL.with(Cell::get)
}

/// Run `f` with the sequential path on the current thread only.
///
/// Sequential helpers never leave the calling thread, so the override
/// covers all nested work without touching other threads.
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            LOCAL_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(LOCAL_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

/// Configure the global pool from `PHASE_CURATOR_THREADS`, if set.
///
/// Returns the thread cap that was applied. Calling this after the pool
/// has been initialised is harmless; the existing pool is kept.
pub fn init_threads_from_env() -> Option<usize> {
    let cap = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
    let cap = cap.max(1);
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cap).build_global();
    }
    Some(cap)
}

/// Map `f` over `items`, preserving order.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to consecutive `chunk`-sized pieces of `data`, passing the chunk
/// index. Each chunk is written by exactly one task.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
