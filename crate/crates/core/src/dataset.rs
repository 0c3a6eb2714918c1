//! Row-major single-precision point matrix.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::DataError;

/// Upper bound on the feature count accepted anywhere in the suite.
pub const MAX_FEATURES: usize = 64;

/// `n × d` matrix of `f32`, row-major, immutable once built.
///
/// The storage is reference counted and never reallocated, so device buffers
/// may alias it for as long as they hold a clone of [`Dataset::shared`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    data: Arc<[f32]>,
    n: usize,
    d: usize,
}

impl Dataset {
    pub fn new(data: Vec<f32>, features: usize) -> Result<Self, DataError> {
        if features == 0 || features > MAX_FEATURES {
            return Err(DataError::Features { got: features, max: MAX_FEATURES });
        }
        if data.is_empty() {
            return Err(DataError::Empty);
        }
        if !data.len().is_multiple_of(features) {
            return Err(DataError::Shape { len: data.len(), features });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { index });
        }
        let n = data.len() / features;
        Ok(Dataset { data: data.into(), n, d: features })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn features(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Shared handle to the backing storage.
    pub fn shared(&self) -> Arc<[f32]> {
        Arc::clone(&self.data)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Generated cluster index of every point, in dataset order. Reporting only;
/// no algorithm reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(pub Vec<u32>);

/// Squared Euclidean distance, accumulated feature by feature in `f32`.
///
/// Every backend (and the OpenCL kernels) performs exactly this sequence of
/// single-precision operations: subtract, square, add, in feature order,
/// without fused multiply-add.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        acc += t * t;
    }
    acc
}
