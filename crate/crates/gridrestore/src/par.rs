//! Data-parallel fan-out helpers.
//!
//! Chromosome fitness evaluations, per-subsystem QP solves, and oracle
//! enumeration sweeps are all independent item-wise maps. With the
//! `parallel` feature they run on the rayon pool; without it (or with
//! [`ExecMode::Sequential`]) they run as plain loops. Results are collected
//! in input order, so the execution mode never changes the output.

/// Execution mode for fan-out loops. `Parallel` degrades to sequential
/// when the crate is built without the `parallel` feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

impl Default for ExecMode {
    fn default() -> Self {
        ExecMode::Parallel
    }
}

#[cfg(feature = "parallel")]
pub fn map_items<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        ExecMode::Sequential => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, U, F>(_mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Map over indices `0..count`; used where the work items are not a slice.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(mode: ExecMode, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => (0..count).into_par_iter().map(f).collect(),
        ExecMode::Sequential => (0..count).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(_mode: ExecMode, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..100).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(
            map_items(ExecMode::Parallel, &items, f),
            map_items(ExecMode::Sequential, &items, f)
        );
        assert_eq!(
            map_range(ExecMode::Parallel, 50, |i| i * 3),
            map_range(ExecMode::Sequential, 50, |i| i * 3)
        );
    }
}
