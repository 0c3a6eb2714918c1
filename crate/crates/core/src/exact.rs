//! Order-independent centre accumulation for Lloyd updates.
//!
//! Each coordinate is converted to a fixed-point `i128` with a scale chosen
//! from the dataset's magnitude and point count, so that per-cluster sums
//! cannot overflow. Integer addition is associative, which makes the
//! resulting means bitwise identical no matter how the points are split
//! across workers or in which order partial sums are merged. Bits below the
//! scale (magnitudes under roughly `2^-(100)` for typical data) are
//! truncated deterministically.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::Dataset;

/// Fixed-point scale: a value `v` is stored as `trunc(v · 2^frac_bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedScale {
    frac_bits: i32,
}

impl FixedScale {
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::for_range(ds.max_abs(), ds.len())
    }

    /// Scale able to sum `count` values of magnitude at most `max_abs`.
    pub fn for_range(max_abs: f32, count: usize) -> Self {
        let int_bits = if max_abs == 0.0 { 0 } else { libm::ilogbf(max_abs) + 1 };
        let count_bits = (usize::BITS - count.max(1).saturating_sub(1).leading_zeros()) as i32;
        // one bit of headroom below the i128 sign bit
        FixedScale { frac_bits: 126 - 1 - int_bits - count_bits }
    }

    pub fn frac_bits(self) -> i32 {
        self.frac_bits
    }

    #[inline]
    pub fn to_fixed(self, v: f32) -> i128 {
        let bits = v.to_bits();
        let exp_field = ((bits >> 23) & 0xff) as i32;
        let frac = bits & 0x7f_ffff;
        let (mantissa, exp) =
            if exp_field == 0 { (frac, -149) } else { (frac | 0x80_0000, exp_field - 150) };
        if mantissa == 0 {
            return 0;
        }
        let shift = exp + self.frac_bits;
        let magnitude = if shift >= 0 {
            i128::from(mantissa) << shift
        } else if shift > -32 {
            i128::from(mantissa >> (-shift))
        } else {
            0
        };
        if bits >> 31 == 1 {
            -magnitude
        } else {
            magnitude
        }
    }

    #[inline]
    pub fn to_f64(self, fixed: i128) -> f64 {
        (fixed as f64) * pow2(-self.frac_bits)
    }
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((1023 + e) as u64) << 52)
}

/// Per-centre coordinate sums and member counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterSums {
    scale: FixedScale,
    features: usize,
    sums: Vec<i128>,
    counts: Vec<u64>,
}

impl CenterSums {
    pub fn new(scale: FixedScale, k: usize, features: usize) -> Self {
        CenterSums { scale, features, sums: vec![0; k * features], counts: vec![0; k] }
    }

    pub fn clear(&mut self) {
        self.sums.fill(0);
        self.counts.fill(0);
    }

    #[inline]
    pub fn add(&mut self, label: usize, point: &[f32]) {
        let row = &mut self.sums[label * self.features..(label + 1) * self.features];
        for (acc, &v) in row.iter_mut().zip(point) {
            *acc += self.scale.to_fixed(v);
        }
        self.counts[label] += 1;
    }

    pub fn merge(&mut self, other: &CenterSums) {
        debug_assert_eq!(self.scale, other.scale);
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Replaces every non-empty centre by the mean of its members (empty
    /// centres keep their position) and returns the summed absolute
    /// coordinate displacement, accumulated in `f32` in centre-major order.
    pub fn update_centers(&self, centers: &mut [f32]) -> f32 {
        let d = self.features;
        let mut displacement = 0.0f32;
        for (c, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            for f in 0..d {
                let mean = self.scale.to_f64(self.sums[c * d + f]) / count as f64;
                let new = mean as f32;
                let old = centers[c * d + f];
                displacement += (new - old).abs();
                centers[c * d + f] = new;
            }
        }
        displacement
    }
}
