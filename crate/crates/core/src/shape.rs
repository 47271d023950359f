use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n x 3` set of point coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    /// Rejects empty input and non-finite coordinates.
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite coordinate".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn from_f64(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn to_f64(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Row-major `n * 3` coordinate vector.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                m[k] += p[k] as f64;
            }
        }
        m.map(|x| x / self.len() as f64)
    }

    /// Variance of all `3n` coordinate residuals about the per-axis mean.
    pub fn residual_variance(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self
            .points
            .iter()
            .map(|p| (0..3).map(|k| (p[k] as f64 - m[k]).powi(2)).sum::<f64>())
            .sum();
        ss / (3 * self.len()) as f64
    }

    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud { points: perm.iter().map(|&i| self.points[i]).collect() }
    }
}

/// Translates to zero per-axis mean and scales uniformly so the `3n`
/// coordinate residuals have unit variance.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.len() < 2 {
        return Err(Error::DegenerateCloud("need at least two points".into()));
    }
    let var = cloud.residual_variance();
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    let m = cloud.mean();
    let s = 1.0 / var.sqrt();
    let points = cloud
        .points
        .iter()
        .map(|p| [((p[0] as f64 - m[0]) * s) as f32, ((p[1] as f64 - m[1]) * s) as f32, ((p[2] as f64 - m[2]) * s) as f32])
        .collect();
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn removes_translation() {
        let base = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, -1.0], [0.0, -2.0, 1.0]];
        let shifted: Vec<[f64; 3]> = base.iter().map(|p| [p[0] + 1.0, p[1] + 2.0, p[2] + 3.0]).collect();
        let out = normalize_cloud(&PointCloud::from_f64(&shifted).unwrap()).unwrap();
        for k in 0..3 {
            assert!(out.mean()[k].abs() < 1e-6);
        }
    }

    #[test]
    fn four_point_cross_has_unit_residual_variance() {
        // Residuals: two coordinates of magnitude 1 per pair of points, so the
        // raw variance is 4 / 12 = 1/3 and the scale factor is sqrt(3).
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let c = PointCloud::from_f64(&pts).unwrap();
        assert!((c.residual_variance() - 1.0 / 3.0).abs() < 1e-12);
        let out = normalize_cloud(&c).unwrap();
        assert!((out.residual_variance() - 1.0).abs() < 1e-6);
        assert!((out.point(0)[0] - 3f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let once = normalize_cloud(&PointCloud::from_f64(&pts).unwrap()).unwrap();
        let twice = normalize_cloud(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let c = PointCloud::from_f64(&[[0.5, 0.5, 0.5]; 5]).unwrap();
        assert!(matches!(normalize_cloud(&c), Err(Error::DegenerateCloud(_))));
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(pts in proptest::collection::vec(prop::array::uniform3(-50.0f64..50.0), 3..40)) {
            let c = PointCloud::from_f64(&pts).unwrap();
            prop_assume!(c.residual_variance() > 1e-3);
            let once = normalize_cloud(&c).unwrap();
            let m = once.mean();
            prop_assert!(m.iter().all(|x| x.abs() < 1e-6));
            prop_assert!((once.residual_variance() - 1.0).abs() < 1e-6);
            let twice = normalize_cloud(&once).unwrap();
            for (a, b) in once.points().iter().zip(twice.points()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }
}
