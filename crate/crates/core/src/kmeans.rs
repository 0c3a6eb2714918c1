//! Lloyd Kmeans.
//!
//! Centres start at `k` distinct data points. Each iteration assigns every
//! point to its nearest centre (squared Euclidean distance in `f32`, ties to
//! the lowest centre index) and then moves each centre to the mean of its
//! members; a centre without members stays put. The loop ends when the summed
//! absolute coordinate displacement drops below `tol` or after `max_iter`
//! iterations, whichever comes first.
//!
//! Means are computed with [`CenterSums`], whose fixed-point accumulation is
//! independent of summation order, so backends that split the assignment
//! differently still produce bitwise-identical centres and labels.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cancel::Cancel;
use crate::dataset::{squared_distance, Dataset};
use crate::error::ClusterError;
use crate::exact::{CenterSums, FixedScale};
use crate::params::KmeansParams;

/// How the initial centres are picked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KmeansInit {
    /// `k` distinct point indices sampled uniformly without replacement from
    /// a ChaCha8 stream seeded with this value.
    Seed(u64),
    /// Explicit, distinct point indices.
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<u16>,
    /// `k × d`, row-major.
    pub centers: Vec<f32>,
    pub iterations: usize,
    /// `true` when the displacement test ended the loop, `false` when the
    /// iteration cap did.
    pub converged: bool,
}

/// Snapshot handed to observers after each assignment step.
#[derive(Debug, Clone, Copy)]
pub struct Iteration<'a> {
    /// 1-based iteration number.
    pub index: usize,
    /// Centres the assignment used.
    pub centers: &'a [f32],
    pub labels: &'a [u16],
}

/// Performs the assignment step.
pub trait Assigner {
    type Error;

    /// Writes the nearest-centre index of every point into `labels` and adds
    /// every point to `sums` under its new label. `sums` arrives cleared.
    fn assign(
        &mut self,
        centers: &[f32],
        labels: &mut [u16],
        sums: &mut CenterSums,
    ) -> Result<(), Self::Error>;
}

/// Index of the nearest centre; the first minimum wins.
#[inline]
pub fn nearest_center(point: &[f32], centers: &[f32]) -> u16 {
    let d = point.len();
    let mut best = 0usize;
    let mut best_dist = f32::INFINITY;
    for (j, c) in centers.chunks_exact(d).enumerate() {
        let dist = squared_distance(point, c);
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best as u16
}

/// Assigns the points of `range`; `labels` covers exactly that range.
pub fn assign_range(
    ds: &Dataset,
    centers: &[f32],
    range: Range<usize>,
    labels: &mut [u16],
    sums: &mut CenterSums,
) {
    debug_assert_eq!(range.len(), labels.len());
    for (i, label) in range.zip(labels.iter_mut()) {
        let p = ds.point(i);
        *label = nearest_center(p, centers);
        sums.add(usize::from(*label), p);
    }
}

/// Single-threaded assignment over the whole dataset.
#[derive(Debug, Clone, Copy)]
pub struct ScanAssigner<'a> {
    pub ds: &'a Dataset,
}

impl Assigner for ScanAssigner<'_> {
    type Error = core::convert::Infallible;

    fn assign(
        &mut self,
        centers: &[f32],
        labels: &mut [u16],
        sums: &mut CenterSums,
    ) -> Result<(), Self::Error> {
        assign_range(self.ds, centers, 0..self.ds.len(), labels, sums);
        Ok(())
    }
}

/// Copies the chosen initial points into a `k × d` centre matrix.
pub fn initial_centers<E>(
    ds: &Dataset,
    k: usize,
    init: &KmeansInit,
) -> Result<Vec<f32>, ClusterError<E>> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(ClusterError::InvalidParams("k must be in 1..=n"));
    }
    let indices: Vec<usize> = match init {
        KmeansInit::Seed(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
        KmeansInit::Indices(idx) => {
            if idx.len() != k {
                return Err(ClusterError::InvalidParams("initial index count differs from k"));
            }
            if idx.iter().any(|&i| i >= n) {
                return Err(ClusterError::InvalidParams("initial index out of range"));
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(ClusterError::InvalidParams("initial indices are not distinct"));
            }
            idx.clone()
        }
    };
    let mut centers = Vec::with_capacity(k * ds.features());
    for i in indices {
        centers.extend_from_slice(ds.point(i));
    }
    Ok(centers)
}

/// Within-cluster sum of squares, evaluated in `f64`.
pub fn wcss(ds: &Dataset, labels: &[u16], centers: &[f32]) -> f64 {
    let d = ds.features();
    ds.rows()
        .zip(labels)
        .map(|(p, &l)| {
            let c = &centers[usize::from(l) * d..(usize::from(l) + 1) * d];
            p.iter()
                .zip(c)
                .map(|(&x, &y)| {
                    let t = f64::from(x) - f64::from(y);
                    t * t
                })
                .sum::<f64>()
        })
        .sum()
}

/// Upper bound on how much rounding may raise the sum of squares from one
/// Lloyd iteration to the next: storing a mean in `f32` moves it by at most
/// one ulp per coordinate, and single-precision distance comparisons can pick
/// a centre whose exact distance is larger by a relative `(d + 2)·2^-23`.
pub fn rounding_slack(counts: &[u64], centers: &[f32], features: usize, sse: f64) -> f64 {
    let mean_shift: f64 = counts
        .iter()
        .zip(centers.chunks_exact(features))
        .map(|(&count, c)| {
            let ulp2: f64 = c.iter().map(|&v| ulp(v) * ulp(v)).sum();
            count as f64 * ulp2
        })
        .sum();
    let compare = (features as f64 + 2.0) * libm::ldexp(1.0, -22) * sse;
    mean_shift + compare
}

fn ulp(v: f32) -> f64 {
    let a = libm::fabsf(v);
    f64::from(f32::from_bits(a.to_bits() + 1)) - f64::from(a)
}

/// Runs the Lloyd loop from explicit initial centres.
pub fn lloyd<A, C, O>(
    ds: &Dataset,
    params: &KmeansParams,
    mut centers: Vec<f32>,
    assigner: &mut A,
    cancel: &C,
    mut observe: O,
) -> Result<KmeansResult, ClusterError<A::Error>>
where
    A: Assigner + ?Sized,
    C: Cancel + ?Sized,
    O: FnMut(&Iteration<'_>),
{
    params.validate(ds.len())?;
    let d = ds.features();
    if centers.len() != params.k * d {
        return Err(ClusterError::InvalidParams("centre matrix is not k × d"));
    }
    let mut labels = vec![0u16; ds.len()];
    let mut sums = CenterSums::new(FixedScale::for_dataset(ds), params.k, d);
    let mut iterations = 0;
    let mut converged = false;
    #[cfg(debug_assertions)]
    let mut bound = f64::INFINITY;

    loop {
        if cancel.is_cancelled() {
            return Err(ClusterError::Aborted);
        }
        sums.clear();
        assigner.assign(&centers, &mut labels, &mut sums).map_err(ClusterError::Backend)?;
        iterations += 1;
        observe(&Iteration { index: iterations, centers: &centers, labels: &labels });

        #[cfg(debug_assertions)]
        let sse = {
            let sse = wcss(ds, &labels, &centers);
            debug_assert!(sse <= bound, "sum of squares rose from {bound} to {sse}");
            sse
        };

        let moved = sums.update_centers(&mut centers);

        #[cfg(debug_assertions)]
        {
            bound = sse + rounding_slack(sums.counts(), &centers, d, sse);
        }

        if moved < params.tol {
            converged = true;
            break;
        }
        if iterations >= params.max_iter {
            break;
        }
    }

    Ok(KmeansResult { labels, centers, iterations, converged })
}

/// Reference single-threaded Kmeans.
pub fn kmeans_single<C: Cancel + ?Sized>(
    ds: &Dataset,
    params: &KmeansParams,
    init: &KmeansInit,
    cancel: &C,
) -> Result<KmeansResult, ClusterError> {
    params.validate(ds.len())?;
    let centers = initial_centers(ds, params.k, init)?;
    lloyd(ds, params, centers, &mut ScanAssigner { ds }, cancel, |_| {})
}
