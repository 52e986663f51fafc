//! Data-parallel execution with a deterministic merge order.
//!
//! Work is always cut into fixed-size chunks and partial results are merged
//! in chunk order, so sequential and parallel modes give bit-identical
//! results regardless of thread count.

use serde::{Deserialize, Serialize};

/// Items per reduction chunk. Changing it changes floating-point summation
/// order, hence results; it is deliberately not configurable.
pub const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Self::Parallel
        } else {
            Self::Sequential
        }
    }
}

impl std::str::FromStr for ExecMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(format!("unknown execution mode {other:?}")),
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

/// Order-preserving map.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Folds each [`CHUNK`]-sized slice with `fold` (items in order, starting
/// from `init()`), then merges the chunk results left to right.
pub fn chunked_reduce<T, A, I, F, M>(mode: ExecMode, items: &[T], init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, usize, &T) -> A + Sync + Send,
    M: Fn(A, A) -> A,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let partials = map(mode, &chunks, |ci, chunk| {
        chunk
            .iter()
            .enumerate()
            .fold(init(), |acc, (j, t)| fold(acc, ci * CHUNK + j, t))
    });
    partials.into_iter().fold(init(), merge)
}
