//! Execution helpers for data-parallel inner loops.
//!
//! With the `parallel` feature (default) the hot loops run on rayon; without
//! it the same helpers run sequentially. Reductions always use a fixed chunk
//! structure folded in chunk order, so results are bitwise identical across
//! thread counts and between the parallel and sequential builds.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of accumulation chunks for deterministic reductions. Fixed, not
/// thread-count dependent, so floating-point association never varies.
pub const ACCUM_CHUNKS: usize = 16;

/// Split `0..n` into at most `k` contiguous near-equal ranges.
pub fn chunk_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    let k = k.max(1).min(n.max(1));
    let base = n / k;
    let rem = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Run independent tasks over disjoint data.
pub fn run_tasks<T, F>(tasks: Vec<T>, f: F)
where
    T: Send,
    F: Fn(T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    tasks.into_par_iter().for_each(f);
    #[cfg(not(feature = "parallel"))]
    tasks.into_iter().for_each(f);
}

/// Visit every `width`-sized row of `buf` with its row index. Rows are
/// disjoint, so the result is bitwise identical to the sequential order.
pub fn for_each_row_mut<F>(buf: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && buf.len() % width == 0);
    #[cfg(feature = "parallel")]
    buf.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    buf.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Accumulate contributions from `0..n_items` into a shared flat buffer of
/// length `acc_len`. `body` adds the contributions of one item range into a
/// private buffer; the private buffers are then folded in fixed chunk order.
pub fn accumulate_chunked<F>(n_items: usize, acc_len: usize, body: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let ranges = chunk_ranges(n_items, ACCUM_CHUNKS);
    let partials: Vec<Vec<f64>> = {
        #[cfg(feature = "parallel")]
        {
            ranges
                .into_par_iter()
                .map(|r| {
                    let mut buf = vec![0.0; acc_len];
                    body(r, &mut buf);
                    buf
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ranges
                .into_iter()
                .map(|r| {
                    let mut buf = vec![0.0; acc_len];
                    body(r, &mut buf);
                    buf
                })
                .collect()
        }
    };
    let mut acc = vec![0.0; acc_len];
    for part in partials {
        for (a, p) in acc.iter_mut().zip(&part) {
            *a += p;
        }
    }
    acc
}
