//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper either writes disjoint output slots or reduces in a fixed
//! chunk order, so results never depend on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by the ordered reductions.
const REDUCE_CHUNK: usize = 4096;

/// Evaluates `f` for every index in `0..n` and collects the results in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps every element of `items` through `f`, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized pieces of
/// `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Runs two closures, potentially concurrently.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Sum of `f(i)` over `0..n`, reduced in fixed-size chunks whose partial sums
/// are then added left to right.
pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_range(chunks, |c| {
        let start = c * REDUCE_CHUNK;
        let end = (start + REDUCE_CHUNK).min(n);
        (start..end).map(&f).sum::<f64>()
    });
    partials.into_iter().sum()
}

/// Dot product with the [`ordered_sum`] reduction order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    ordered_sum(a.len(), |i| a[i] * b[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_sum_matches_chunked_sequential_sum() {
        let n = 3 * REDUCE_CHUNK + 17;
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let expected: f64 = (0..n.div_ceil(REDUCE_CHUNK))
            .map(|c| {
                (c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n))
                    .map(f)
                    .sum::<f64>()
            })
            .sum();
        assert_eq!(ordered_sum(n, f).to_bits(), expected.to_bits());
    }

    #[test]
    fn map_range_preserves_order() {
        assert_eq!(map_range(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(ordered_sum(0, |_| 1.0), 0.0);
    }
}
