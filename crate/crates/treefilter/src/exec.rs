//! Execution-mode switch between sequential and data-parallel evaluation.
//!
//! The DP sweeps write each node's slot exactly once and read only slots that
//! earlier levels finished, so the parallel schedule produces bit-identical
//! results to the sequential one. Parallelism requires the `parallel` feature;
//! without it [`Exec::parallel`] silently degrades to sequential.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunks below this many nodes are not worth a rayon task.
#[cfg(feature = "parallel")]
const MIN_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    parallel: bool,
}

impl Exec {
    pub fn sequential() -> Self {
        Exec { parallel: false }
    }

    pub fn parallel() -> Self {
        Exec {
            parallel: cfg!(feature = "parallel"),
        }
    }

    pub fn is_parallel(self) -> bool {
        self.parallel
    }
}

impl Default for Exec {
    fn default() -> Self {
        Exec::sequential()
    }
}

/// Runs `f` over the per-node rows of one tree level and sums its returns.
///
/// `rows` is the level's numerator region (one `width`-wide row per node),
/// `dens` the matching denominator scalars; `f` receives the node offset
/// within the level. Returns the summed per-node work counters.
pub(crate) fn level_sweep<F>(
    rows: &mut [f64],
    dens: &mut [f64],
    width: usize,
    exec: Exec,
    f: F,
) -> u64
where
    F: Fn(usize, &mut [f64], &mut f64) -> u64 + Sync + Send,
{
    debug_assert_eq!(rows.len(), dens.len() * width);
    #[cfg(feature = "parallel")]
    if exec.parallel {
        return rows
            .par_chunks_mut(width)
            .zip(dens.par_iter_mut())
            .enumerate()
            .with_min_len(MIN_CHUNK)
            .map(|(k, (row, den))| f(k, row, den))
            .sum();
    }
    let _ = exec;
    rows.chunks_mut(width)
        .zip(dens.iter_mut())
        .enumerate()
        .map(|(k, (row, den))| f(k, row, den))
        .sum()
}

/// Maps `f` over group indices, in parallel when requested.
pub(crate) fn for_each_group<T, F>(groups: usize, exec: Exec, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.parallel {
        return (0..groups).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..groups).map(f).collect()
}
