//! Index-ordered map over work items, parallel when the `parallel` feature
//! is enabled. Results are always returned in index order, so any reduction
//! over them is independent of scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Parallelism {
    Sequential,
    /// A dedicated pool with this many worker threads.
    Threads(usize),
    /// The global rayon pool.
    #[default]
    Auto,
}

impl Parallelism {
    pub fn from_threads(threads: Option<usize>) -> Self {
        match threads {
            None => Parallelism::Auto,
            Some(0) | Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Threads(n),
        }
    }
}

pub fn map_indexed<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Auto => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(feature = "parallel")]
        Parallelism::Threads(k) => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(_) => (0..n).map(f).collect(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        _ => (0..n).map(f).collect(),
    }
}
