//! Execution-mode switch for the data-parallel inner loops.
//!
//! Every parallel loop in the crate partitions *independent* outputs (matrix
//! rows, image planes, samples). Each output is computed by the same
//! sequential instruction stream in either mode, so sequential and parallel
//! runs are bit-identical. Without the `parallel` feature everything runs on
//! the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{config_err, Result};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

pub fn exec_mode() -> ExecMode {
    if PARALLEL.load(Ordering::Relaxed) {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

pub fn set_exec_mode(mode: ExecMode) -> Result<()> {
    if mode == ExecMode::Parallel && !cfg!(feature = "parallel") {
        return Err(config_err!(
            "parallel execution requested but the crate was built without the `parallel` feature"
        ));
    }
    PARALLEL.store(mode == ExecMode::Parallel, Ordering::Relaxed);
    Ok(())
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, in parallel when enabled. Output order is the
/// index order in both modes.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
