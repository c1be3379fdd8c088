//! Scalar fields that can be queried in batches.

use crate::geometry::Vec3;
use crate::scene::{analytic_sdf, Shape};

/// A signed distance field queried at many points at once.
pub trait SdfField {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64>;
}

/// Analytic field, evaluated at points clamped into `[-1, 1]³` like the triplane.
impl SdfField for Shape {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points
            .iter()
            .map(|p| analytic_sdf(self, &p.map(|u| u.clamp(-1.0, 1.0))))
            .collect()
    }
}

/// Field that is zero everywhere; conditioning on it removes the SDF signal.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl SdfField for ZeroField {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        vec![0.0; points.len()]
    }
}

/// Adapts a pointwise closure.
pub struct FnField<F>(pub F);

impl<F: Fn(&Vec3) -> f64> SdfField for FnField<F> {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(&self.0).collect()
    }
}
