//! Data-parallel primitives with a sequential fallback.
//!
//! Built with the `parallel` feature (the default) these run on rayon;
//! without it they degrade to plain loops with identical semantics. All
//! call sites are structured so results are bitwise independent of the
//! worker count: work is split into index-owned chunks and no reduction
//! order ever varies.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Worker count of the ambient thread pool (1 without the feature).
pub fn max_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` inside a dedicated pool of `workers` threads. With the
/// feature disabled the pool size is ignored and `f` runs inline.
pub fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    assert!(workers >= 1, "need at least one worker");
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

/// Applies `f` to consecutive chunks of `data`; `f` receives the chunk
/// index. Chunk boundaries depend only on `chunk_len`, never on workers.
pub fn for_each_chunk_mut<T: Send>(
    data: &mut [T],
    chunk_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Index-ordered parallel map; element i of the result is `f(i)`.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_cover_everything_once() {
        let mut data = vec![0u32; 1000];
        for_each_chunk_mut(&mut data, 64, |ci, chunk| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (ci * 64 + j) as u32;
            }
        });
        for (i, v) in data.iter().enumerate() {
            assert_eq!(*v, i as u32);
        }
    }

    #[test]
    fn map_preserves_index_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out[7], 49);
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn pool_size_does_not_change_results() {
        let work = || map_indexed(257, |i| (i as f64).sin());
        let a = with_pool(1, work);
        let b = with_pool(3, work);
        assert_eq!(a, b);
    }
}
