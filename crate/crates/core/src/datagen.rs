//! Seeded synthetic Gaussian blobs.
//!
//! Generation protocol, in RNG draw order:
//!
//! 1. For every cluster: `d` centre coordinates drawn uniformly from
//!    [`CENTER_RANGE`], then `d` per-feature standard deviations drawn
//!    uniformly from [`SD_RANGE`], then the cluster's points, each coordinate
//!    an independent normal sample around the centre.
//! 2. The concatenated points are permuted with a Fisher-Yates shuffle.
//!
//! Samples are produced in `f64` and rounded to `f32` for storage. The RNG is
//! ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), whose output stream is
//! fixed across platforms, so a spec and seed always reproduce the same bytes.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, GroundTruth, MAX_FEATURES};
use crate::error::DataError;

pub const CENTER_RANGE: (f64, f64) = (0.0, 10.0);
pub const SD_RANGE: (f64, f64) = (0.25, 1.25);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub features: usize,
    pub cluster_sizes: Vec<usize>,
    pub seed: u64,
}

impl DatasetSpec {
    /// `clusters` blobs of `size` points each.
    pub fn uniform(features: usize, clusters: usize, size: usize, seed: u64) -> Self {
        DatasetSpec { features, cluster_sizes: alloc::vec![size; clusters], seed }
    }

    pub fn total_points(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features == 0 || self.features > MAX_FEATURES {
            return Err(DataError::Features { got: self.features, max: MAX_FEATURES });
        }
        if self.cluster_sizes.is_empty() {
            return Err(DataError::NoClusters);
        }
        if let Some(index) = self.cluster_sizes.iter().position(|&s| s == 0) {
            return Err(DataError::EmptyCluster { index });
        }
        Ok(())
    }
}

/// Parameters the generator drew for one blob.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub center: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub blobs: Vec<BlobParams>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Generated, DataError> {
    spec.validate()?;
    let d = spec.features;
    let n = spec.total_points();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut raw = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut blobs = Vec::with_capacity(spec.cluster_sizes.len());

    for (cluster, &size) in spec.cluster_sizes.iter().enumerate() {
        let center: Vec<f64> =
            (0..d).map(|_| rng.random_range(CENTER_RANGE.0..=CENTER_RANGE.1)).collect();
        let sd: Vec<f64> = (0..d).map(|_| rng.random_range(SD_RANGE.0..=SD_RANGE.1)).collect();
        let normals: Vec<Normal<f64>> = center
            .iter()
            .zip(&sd)
            .map(|(&mu, &s)| Normal::new(mu, s).expect("sd range is positive"))
            .collect();
        for _ in 0..size {
            for dist in &normals {
                raw.push(dist.sample(&mut rng) as f32);
            }
            labels.push(cluster as u32);
        }
        blobs.push(BlobParams { center, sd });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n);
    for &src in &order {
        data.extend_from_slice(&raw[src * d..(src + 1) * d]);
        truth.push(labels[src]);
    }

    let dataset = Dataset::new(data, d)?;
    Ok(Generated { dataset, truth: GroundTruth(truth), blobs })
}
