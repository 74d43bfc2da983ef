//! Execution policy for data-parallel inner loops.
//!
//! Every helper splits work into chunks whose boundaries depend only on the
//! input size, never on the thread count, and returns per-chunk results in
//! chunk order. Callers reduce those results sequentially, so the parallel
//! and sequential paths agree bit for bit.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Selects the process-wide execution mode. Without the `parallel` feature
/// this is a no-op and everything runs sequentially.
pub fn set_mode(mode: ExecMode) {
    FORCE_SEQUENTIAL.store(mode == ExecMode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Number of worker threads available to the parallel path.
pub fn workers() -> usize {
    match mode() {
        ExecMode::Sequential => 1,
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => rayon::current_num_threads(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => 1,
    }
}

/// `f(i)` for every `i in 0..n`, collected in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(offset, chunk)` for consecutive chunks of `data` and returns the
/// results in chunk order. `offset` is the index of the chunk's first element.
pub fn map_chunks_mut<A, R, F>(data: &mut [A], chunk: usize, f: F) -> Vec<R>
where
    A: Send,
    R: Send,
    F: Fn(usize, &mut [A]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        return data
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(i, c)| f(i * chunk, c))
            .collect();
    }
    data.chunks_mut(chunk)
        .enumerate()
        .map(|(i, c)| f(i * chunk, c))
        .collect()
}

pub fn for_each_chunk_mut<A, F>(data: &mut [A], chunk: usize, f: F)
where
    A: Send,
    F: Fn(usize, &mut [A]) + Sync + Send,
{
    map_chunks_mut(data, chunk, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_offsets_cover_the_slice() {
        let mut v = vec![0usize; 23];
        let offsets = map_chunks_mut(&mut v, 5, |off, c| {
            for (k, x) in c.iter_mut().enumerate() {
                *x = off + k;
            }
            off
        });
        assert_eq!(offsets, vec![0, 5, 10, 15, 20]);
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
