//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always collected in input order, so reductions over them
//! are bit-identical whichever execution mode produced them.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static DEFAULT: AtomicU8 = AtomicU8::new(UNSET);

impl Execution {
    /// Process-wide mode: `Parallel` when the `parallel` feature is on,
    /// unless overridden with [`set_default`].
    pub fn current() -> Execution {
        match DEFAULT.load(Ordering::Relaxed) {
            SEQ => Execution::Sequential,
            PAR => Execution::Parallel,
            _ if cfg!(feature = "parallel") => Execution::Parallel,
            _ => Execution::Sequential,
        }
    }

    /// Parallel degrades to sequential when the feature is off.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

pub fn set_default(exec: Execution) {
    let v = match exec {
        Execution::Sequential => SEQ,
        Execution::Parallel => PAR,
    };
    DEFAULT.store(v, Ordering::Relaxed);
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// `f(i)` for `i in 0..n`, in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized slices of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
