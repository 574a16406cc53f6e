//! Sample-level data parallelism.
//!
//! Every ensemble loop in the crate goes through [`map_indexed`], which runs on
//! the rayon pool when the `parallel` feature is compiled in and the caller
//! asks for [`Execution::Parallel`]. Results are always collected in index
//! order and reduced sequentially afterwards, so the numbers do not depend on
//! the execution mode or the thread count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..len`, returning results in index order.
pub fn map_indexed<T, F>(len: usize, mode: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode.is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = mode;
    (0..len).map(f).collect()
}

/// Maps `f` over a slice, returning results in order.
pub fn map_slice<S, T, F>(items: &[S], mode: Execution, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(items.len(), mode, |i| f(&items[i]))
}

/// Sizes the global rayon pool. Has no effect without the `parallel` feature
/// or once the pool has been initialised.
pub fn set_threads(threads: usize) -> bool {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let seq = map_indexed(100, Execution::Sequential, |i| i * i);
        let par = map_indexed(100, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
