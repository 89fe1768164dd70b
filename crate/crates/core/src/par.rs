//! Data-parallel primitives with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan work out over a rayon
//! pool; without it they run the same code serially. Reductions are chunked
//! into a fixed number of independently-accumulated pieces that are combined
//! in index order, so results are bit-identical regardless of feature flags
//! or thread count.

/// Number of independent accumulation chunks used by [`fold_chunked`].
/// Fixed (not derived from thread count) so the reduction tree — and hence
/// the floating-point result — never depends on parallelism.
pub const REDUCE_CHUNKS: usize = 8;

/// Caps the worker pool at `n` threads (0 = all available cores). Call once,
/// before any parallel work; later calls are ignored. No-op in serial builds.
pub fn init_workers(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Splits `0..n` into [`REDUCE_CHUNKS`] contiguous ranges, folds each chunk
/// serially with `fold`, then combines the per-chunk accumulators in chunk
/// index order with `merge`. The chunk boundaries depend only on `n`, so the
/// result is identical in serial and parallel builds.
pub fn fold_chunked<A, Fold, Merge>(n: usize, init: impl Fn() -> A + Sync, fold: Fold, merge: Merge) -> A
where
    A: Send,
    Fold: Fn(A, usize) -> A + Sync,
    Merge: Fn(A, A) -> A,
{
    let n_chunks = REDUCE_CHUNKS.min(n.max(1));
    let bounds: Vec<(usize, usize)> = (0..n_chunks)
        .map(|c| (c * n / n_chunks, (c + 1) * n / n_chunks))
        .collect();
    let partials = map_indexed(n_chunks, |c| {
        let (lo, hi) = bounds[c];
        let mut acc = init();
        for i in lo..hi {
            acc = fold(acc, i);
        }
        acc
    });
    let mut it = partials.into_iter();
    let first = it.next().expect("at least one chunk");
    it.fold(first, merge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_index_order() {
        let v = map_indexed(100, |i| i * i);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i * i);
        }
    }

    #[test]
    fn fold_chunked_matches_serial_sum_exactly() {
        // Floating-point sum in a fixed chunked order must reproduce the
        // same chunked order computed by hand, for several sizes including
        // n < REDUCE_CHUNKS and n = 0-adjacent edge cases.
        for n in [1usize, 3, 7, 8, 9, 100, 1003] {
            let xs: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
            let got = fold_chunked(n, || 0.0f64, |a, i| a + xs[i], |a, b| a + b);
            let n_chunks = REDUCE_CHUNKS.min(n);
            let mut expect = 0.0;
            let mut partials = Vec::new();
            for c in 0..n_chunks {
                let (lo, hi) = (c * n / n_chunks, (c + 1) * n / n_chunks);
                let mut acc = 0.0;
                for i in lo..hi {
                    acc += xs[i];
                }
                partials.push(acc);
            }
            for p in partials {
                expect += p;
            }
            assert_eq!(got, expect, "n = {n}");
        }
    }

    #[test]
    fn fold_chunked_collects_structures() {
        let got = fold_chunked(
            10,
            Vec::new,
            |mut acc: Vec<usize>, i| {
                acc.push(i);
                acc
            },
            |mut a, b| {
                a.extend(b);
                a
            },
        );
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }
}
