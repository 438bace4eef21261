//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper preserves input order in its output, so results are identical
//! under [`Exec::Sequential`] and [`Exec::Parallel`]. Without the `parallel`
//! feature, `Exec::Parallel` runs sequentially.

/// Execution strategy for batch-style loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if is_parallel_available() {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

impl Exec {
    /// Map over a slice.
    pub fn map<T, U, F>(self, data: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                data.par_iter().map(f).collect()
            }
            _ => data.iter().map(f).collect(),
        }
    }

    /// Map over `0..count`.
    pub fn map_indexed<U, F>(self, count: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..count).into_par_iter().map(f).collect()
            }
            _ => (0..count).map(f).collect(),
        }
    }

    /// Map over fixed-size chunks. Chunk boundaries do not depend on the
    /// strategy, which keeps batch-dependent kernels deterministic.
    pub fn map_chunks<T, U, F>(self, data: &[T], chunk: usize, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &[T]) -> U + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                data.par_chunks(chunk)
                    .enumerate()
                    .map(|(i, c)| f(i, c))
                    .collect()
            }
            _ => data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
        }
    }
}
