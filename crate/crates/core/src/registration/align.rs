//! Coarse alignment hypotheses from centroids and principal axes.

use super::cloud::PointCloud;
use super::rotation::RigidTransform;
use super::RegistrationError;
use crate::linalg::{symmetric_eigen, Mat3, Point3};
use crate::scalar::Real;

/// Centroid and principal axes (columns, descending variance, right-handed).
pub fn principal_frame<T: Real>(cloud: &PointCloud<T>) -> Result<(Point3<T>, Mat3<T>), RegistrationError> {
    let c = cloud.centroid().ok_or(RegistrationError::EmptyCloud)?;
    let mut cov = [[T::zero(); 3]; 3];
    for p in cloud.points() {
        let d = *p - c;
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = cov[i][j] + d[i] * d[j];
            }
        }
    }
    let (_, vecs) = symmetric_eigen(cov);
    let col = |k: usize| Point3::new(vecs[0][k], vecs[1][k], vecs[2][k]);
    let (a, b) = (col(2), col(1));
    Ok((c, Mat3::from_cols(a, b, a.cross(&b))))
}

/// The four proper rotations taking the source principal frame onto the target's,
/// each with centroids aligned.
pub fn principal_hypotheses<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
) -> Result<Vec<RigidTransform<T>>, RegistrationError> {
    let (cs, fs) = principal_frame(source)?;
    let (ct, ft) = principal_frame(target)?;
    let (o, m) = (T::one(), -T::one());
    let flips = [[o, o, o], [m, m, o], [m, o, m], [o, m, m]];
    Ok(flips
        .iter()
        .map(|f| {
            let mut d = Mat3::zeros();
            for k in 0..3 {
                d.m[k][k] = f[k];
            }
            let r = ft.mul_mat(&d).mul_mat(&fs.transpose());
            RigidTransform::new(r, ct - r.mul_vec(&cs))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::rotation::rotation_error;

    #[test]
    fn hypotheses_contain_truth_for_asymmetric_cloud() {
        let src: Vec<_> = (0..200)
            .map(|i| {
                let t = i as f64 / 200.0;
                Point3::new(0.1 * (t * 40.0).sin(), 0.04 * (t * 17.0).cos(), 0.01 * (t * 5.0).sin())
            })
            .collect();
        let truth = RigidTransform::new(Mat3::from_axis_angle(&Point3::new(0.3, -1.0, 0.2), 0.8), Point3::new(0.02, 0.0, 0.4));
        let source = PointCloud::new(src);
        let target = source.transformed(&truth);
        let hyps = principal_hypotheses(&source, &target).unwrap();
        assert_eq!(hyps.len(), 4);
        for h in &hyps {
            assert!(rotation_error(&h.rotation) < 1e-9);
        }
        let best = hyps.iter().map(|h| h.rotation.frobenius_distance(&truth.rotation)).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-6, "{best}");
    }
}
