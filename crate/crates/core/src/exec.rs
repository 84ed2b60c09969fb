//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to
//! rayon; without it every mode runs sequentially. Callers that need
//! bit-identical output across modes must only use order-preserving
//! combinators, which is all this module offers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `jobs == 1` means sequential; anything else uses the current pool.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indices<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over fixed-size chunks of `items`, results in chunk order.
    pub fn map_chunks<I, T, F>(self, items: &[I], chunk: usize, f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&[I]) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_chunks(chunk).map(f).collect(),
            _ => items.chunks(chunk).map(f).collect(),
        }
    }
}

/// Runs `f` inside a pool of `jobs` threads (0 = all cores).
#[cfg(feature = "parallel")]
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<T: Send>(_jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}
