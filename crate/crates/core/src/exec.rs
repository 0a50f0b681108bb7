//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) `Execution::Parallel` runs on the
//! rayon pool; without it every call is sequential. Results are always
//! collected in index order, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `f(0..n)` collected in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// `f(i, &mut items[i])` for every item.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items
                .par_iter_mut()
                .enumerate()
                .for_each(|(i, item)| f(i, item)),
            _ => items.iter_mut().enumerate().for_each(|(i, item)| f(i, item)),
        }
    }
}

/// Size the global pool. Has no effect without the `parallel` feature, and
/// only the first call wins.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
