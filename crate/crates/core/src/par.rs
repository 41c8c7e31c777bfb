//! Data-parallel map helpers.
//!
//! All parallel inner loops in the crate go through [`map_indexed`], which
//! dispatches to rayon when the `parallel` feature is enabled and to a plain
//! sequential loop otherwise. Outputs are collected in index order, so the
//! two paths produce bit-identical results; any reduction over the outputs
//! must likewise run in index order (the callers here all do).
//!
//! [`map_indexed_seq`] is always sequential regardless of features; the
//! criterion bench suite uses it as the baseline when comparing both paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`], available under every feature set.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let par: Vec<usize> = map_indexed(100, |i| i * i);
        let seq: Vec<usize> = map_indexed_seq(100, |i| i * i);
        assert_eq!(par, seq);
    }
}
