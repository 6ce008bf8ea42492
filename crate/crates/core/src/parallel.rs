//! Data-parallel map over independent work items.
//!
//! Results always come back in input order, so reductions done afterwards
//! are identical for both modes.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon thread pool; falls back to sequential without the `parallel`
    /// feature.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
        }
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}
