//! Data-parallel reductions over voxel ranges.

use rayon::prelude::*;

/// Voxels per work item in deterministic mode. Fixed so results do not
/// depend on the number of threads.
pub const CHUNK: usize = 2048;

/// How partial results of a parallel loop are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Fixed-size chunks merged in index order: bitwise reproducible for any thread count.
    #[default]
    Deterministic,
    /// Work-stealing fold/reduce; merge order depends on scheduling.
    Fast,
}

/// Folds `fold(acc, i)` over `0..n` in parallel and merges the partial accumulators.
pub fn reduce<T, I, F, M>(n: usize, mode: Reduction, identity: I, fold: F, merge: M) -> T
where
    T: Send,
    I: Fn() -> T + Sync + Send,
    F: Fn(&mut T, usize) + Sync + Send,
    M: Fn(&mut T, T) + Sync + Send,
{
    match mode {
        Reduction::Deterministic => {
            let partials: Vec<T> = (0..n.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let mut acc = identity();
                    for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        fold(&mut acc, i);
                    }
                    acc
                })
                .collect();
            let mut out = identity();
            for p in partials {
                merge(&mut out, p);
            }
            out
        }
        Reduction::Fast => (0..n)
            .into_par_iter()
            .fold(&identity, |mut acc, i| {
                fold(&mut acc, i);
                acc
            })
            .reduce(&identity, |mut a, b| {
                merge(&mut a, b);
                a
            }),
    }
}

/// Sum that does not depend on the order of `xs` (sorts in place first).
/// Used for sums over classes so that relabelling classes is exact.
pub fn sum_unordered(xs: &mut [f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        _ => {
            xs.sort_unstable_by(f64::total_cmp);
            xs.iter().sum()
        }
    }
}

/// Elementwise `a += b`.
pub fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}
