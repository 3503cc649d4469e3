//! Scoped-thread helpers for batch-parallel kernels.
//!
//! All parallel loops in this crate split work into units (rows or items)
//! whose results are computed independently and written to disjoint output
//! slices, so results are bit-identical for any thread count. Accumulating
//! reductions are never performed across threads; each output element is
//! produced by exactly one thread with a fixed summation order.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Worker count: `CNNIC_THREADS` if set, else the available parallelism.
pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        if let Ok(v) = std::env::var("CNNIC_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Below this many elements the spawn overhead outweighs the work.
const MIN_PARALLEL_ELEMS: usize = 1 << 13;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized pieces of
/// `data`, fanned out over scoped threads. `data.len()` must be a multiple of
/// `chunk_len`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "for_each_chunk: zero chunk length");
    assert_eq!(data.len() % chunk_len, 0, "for_each_chunk: ragged data");
    let n_chunks = data.len() / chunk_len;
    let workers = threads().min(n_chunks.max(1));
    if workers <= 1 || data.len() < MIN_PARALLEL_ELEMS {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let per_worker = n_chunks.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = data;
        let mut start = 0;
        while start < n_chunks {
            let take = per_worker.min(n_chunks - start);
            let (head, tail) = rest.split_at_mut(take * chunk_len);
            rest = tail;
            let f = &f;
            scope.spawn(move || {
                for (k, chunk) in head.chunks_mut(chunk_len).enumerate() {
                    f(start + k, chunk);
                }
            });
            start += take;
        }
    });
}
