//! Data-parallel helpers. With the `parallel` feature the parallel mode runs
//! on rayon; without it every mode runs sequentially. Results always come
//! back in index order, so reductions over them are deterministic.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map<T, U, F>(exec: Execution, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
