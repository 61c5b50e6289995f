//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to rayon.
//! Without it every call runs sequentially. Callers only split work into
//! disjoint, order-independent pieces, so both modes produce identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

static DEFAULT_EXEC: AtomicU8 = AtomicU8::new(1);

/// Execution mode used by tensor ops that do not take an explicit [`Exec`].
pub fn default_exec() -> Exec {
    match DEFAULT_EXEC.load(Ordering::Relaxed) {
        0 => Exec::Sequential,
        _ => Exec::Parallel,
    }
}

pub fn set_default_exec(exec: Exec) {
    let v = match exec {
        Exec::Sequential => 0,
        Exec::Parallel => 1,
    };
    DEFAULT_EXEC.store(v, Ordering::Relaxed);
}

/// True when this build can actually run work on more than one thread.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}
