//! Algorithm parameters and their derivation from the feature count.

use crate::error::ClusterError;

/// DBSCAN radius and density threshold.
///
/// `min_pts` counts neighbours strictly: the query point itself is not part
/// of its own neighbourhood, so a point is a core point when at least
/// `min_pts` *other* points lie within `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f32,
    pub min_pts: usize,
}

impl DbscanParams {
    /// `min_pts = 10·d`, `eps = √d`.
    pub fn derive(features: usize) -> Self {
        assert!(features >= 1, "feature count must be positive");
        DbscanParams { eps: libm::sqrtf(features as f32), min_pts: 10 * features }
    }

    /// Squared radius in single precision; every backend compares against
    /// this exact value.
    #[inline]
    pub fn eps2(&self) -> f32 {
        self.eps * self.eps
    }

    pub fn validate<E>(&self) -> Result<(), ClusterError<E>> {
        if self.eps.is_nan() || self.eps <= 0.0 || self.eps.is_infinite() {
            return Err(ClusterError::InvalidParams("eps must be positive and finite"));
        }
        if self.min_pts < 1 {
            return Err(ClusterError::InvalidParams("min_pts must be at least 1"));
        }
        Ok(())
    }
}

/// Lloyd iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansParams {
    pub k: usize,
    /// Stop once the summed absolute centre displacement falls below this.
    pub tol: f32,
    pub max_iter: usize,
}

impl KmeansParams {
    pub const DEFAULT_TOL: f32 = 1e-6;
    pub const DEFAULT_MAX_ITER: usize = 100_000;

    pub fn new(k: usize) -> Self {
        KmeansParams { k, tol: Self::DEFAULT_TOL, max_iter: Self::DEFAULT_MAX_ITER }
    }

    pub fn validate<E>(&self, n: usize) -> Result<(), ClusterError<E>> {
        if self.k < 1 {
            return Err(ClusterError::InvalidParams("k must be at least 1"));
        }
        if self.k > n {
            return Err(ClusterError::InvalidParams("k exceeds the number of points"));
        }
        if self.k > usize::from(u16::MAX) + 1 {
            return Err(ClusterError::InvalidParams("k does not fit a 16-bit label"));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(ClusterError::InvalidParams("tol must be positive"));
        }
        if self.max_iter < 1 {
            return Err(ClusterError::InvalidParams("max_iter must be at least 1"));
        }
        Ok(())
    }
}
