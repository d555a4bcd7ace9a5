//! Fast Point Feature Histograms: 3 x 11 bins over the Darboux-frame angle triple.

use rayon::prelude::*;

use super::cloud::PointCloud;
use super::kdtree::KdTree;
use super::RegistrationError;
use crate::linalg::Point3;
use crate::scalar::Real;

pub const FPFH_BINS: usize = 33;
const SUB: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fpfh33<T: Real> {
    pub bins: [T; FPFH_BINS],
}

impl<T: Real> Fpfh33<T> {
    pub fn zero() -> Self {
        Self { bins: [T::zero(); FPFH_BINS] }
    }

    pub fn distance_squared(&self, o: &Self) -> T {
        self.bins.iter().zip(&o.bins).map(|(a, b)| (*a - *b) * (*a - *b)).sum()
    }

    pub fn sub_sums(&self) -> [T; 3] {
        std::array::from_fn(|s| self.bins[s * SUB..(s + 1) * SUB].iter().copied().sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpfhFeatures<T: Real> {
    pub descriptors: Vec<Fpfh33<T>>,
    /// Points without any neighbor in the radius; their descriptor is zero.
    pub isolated: Vec<bool>,
}

/// `(alpha, phi, theta, distance)` for a point pair, source chosen by the smaller normal angle.
pub fn pair_features<T: Real>(p1: &Point3<T>, n1: &Point3<T>, p2: &Point3<T>, n2: &Point3<T>) -> [T; 4] {
    let zero = [T::zero(); 4];
    let mut dp = *p2 - *p1;
    let f4 = dp.norm();
    if f4 == T::zero() {
        return zero;
    }
    let (mut a, mut b) = (*n1, *n2);
    let angle1 = a.dot(&dp) / f4;
    let angle2 = b.dot(&dp) / f4;
    let f3;
    if angle1.abs().min(T::one()).acos() > angle2.abs().min(T::one()).acos() {
        std::mem::swap(&mut a, &mut b);
        dp = -dp;
        f3 = -angle2;
    } else {
        f3 = angle1;
    }
    let Some(v) = dp.cross(&a).normalized() else {
        return zero;
    };
    let w = a.cross(&v);
    let f2 = v.dot(&b);
    let f1 = w.dot(&b).atan2(a.dot(&b));
    [f1, f2, f3, f4]
}

fn bin_index<T: Real>(x: T) -> usize {
    let i = x.floor().to_i64().unwrap_or(0);
    i.clamp(0, SUB as i64 - 1) as usize
}

/// Bin indices in the 33-vector for one pair feature.
pub fn feature_bins<T: Real>(f: &[T; 4]) -> [usize; 3] {
    let n = T::lit(SUB as f64);
    let half = T::lit(0.5);
    [
        bin_index(n * (f[0] + T::PI()) / T::TAU()),
        SUB + bin_index(n * (f[1] + T::one()) * half),
        2 * SUB + bin_index(n * (f[2] + T::one()) * half),
    ]
}

fn spfh<T: Real>(points: &[Point3<T>], normals: &[Point3<T>], i: usize, nbrs: &[(usize, T)]) -> Fpfh33<T> {
    let mut h = Fpfh33::zero();
    let others: Vec<usize> = nbrs.iter().map(|e| e.0).filter(|&j| j != i).collect();
    if others.is_empty() {
        return h;
    }
    let incr = T::lit(100.0) / T::from_usize_lossy(others.len());
    for j in others {
        let f = pair_features(&points[i], &normals[i], &points[j], &normals[j]);
        for b in feature_bins(&f) {
            h.bins[b] = h.bins[b] + incr;
        }
    }
    h
}

pub fn compute_fpfh<T: Real>(cloud: &PointCloud<T>, radius: T) -> Result<FpfhFeatures<T>, RegistrationError> {
    let normals = cloud.normals().ok_or(RegistrationError::MissingNormals)?;
    if !(radius > T::zero()) || !radius.is_finite() {
        return Err(RegistrationError::InvalidParameter(format!("feature radius {radius}")));
    }
    let points = cloud.points();
    let tree = KdTree::new(points);
    let neighborhoods: Vec<Vec<(usize, T)>> = points.par_iter().map(|p| tree.within_radius(p, radius)).collect();
    let spfhs: Vec<Fpfh33<T>> = (0..points.len())
        .into_par_iter()
        .map(|i| spfh(points, normals, i, &neighborhoods[i]))
        .collect();
    let results: Vec<(Fpfh33<T>, bool)> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let others: Vec<(usize, T)> = neighborhoods[i].iter().copied().filter(|e| e.0 != i).collect();
            if others.is_empty() {
                return (Fpfh33::zero(), true);
            }
            let mut acc = Fpfh33::<T>::zero();
            for &(j, d2) in &others {
                if d2 == T::zero() {
                    continue;
                }
                let w = T::one() / d2.sqrt();
                for b in 0..FPFH_BINS {
                    acc.bins[b] = acc.bins[b] + w * spfhs[j].bins[b];
                }
            }
            let k = T::from_usize_lossy(others.len());
            let mut f = spfhs[i];
            for b in 0..FPFH_BINS {
                f.bins[b] = f.bins[b] + acc.bins[b] / k;
            }
            let sums = f.sub_sums();
            for b in 0..FPFH_BINS {
                let s = sums[b / SUB];
                if s > T::zero() {
                    f.bins[b] = f.bins[b] * T::lit(100.0) / s;
                }
            }
            (f, false)
        })
        .collect();
    let (descriptors, isolated) = results.into_iter().unzip();
    Ok(FpfhFeatures { descriptors, isolated })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Points on the x axis with normals tilted by `a` in the x-z plane.
    ///
    /// By hand: for a neighbor to the right the Darboux frame gives alpha = 0, phi = 0,
    /// theta = sin a; to the left theta = -sin a. With a = 30 deg, theta = +-0.5 lands in
    /// third-histogram bins 8 and 2; alpha and phi land in the middle bin 5.
    #[test]
    fn collinear_hand_computed() {
        let a = 30f64.to_radians();
        let n = Point3::new(a.sin(), 0.0, a.cos());
        let pts: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::with_normals(pts, vec![n; 5]).unwrap();
        let feats = compute_fpfh(&cloud, 4.5).unwrap();
        assert!(feats.isolated.iter().all(|&b| !b));

        let spfh_theta = |i: usize| -> (f64, f64) { (25.0 * i as f64, 25.0 * (4 - i) as f64) };
        for i in 0..5 {
            let (mut left, mut right) = spfh_theta(i);
            let (mut acc_l, mut acc_r) = (0.0, 0.0);
            for j in (0..5).filter(|&j| j != i) {
                let w = 1.0 / (i as f64 - j as f64).abs();
                let (l, r) = spfh_theta(j);
                acc_l += w * l;
                acc_r += w * r;
            }
            left += acc_l / 4.0;
            right += acc_r / 4.0;
            let s = left + right;
            let mut want = [0.0; 33];
            want[5] = 100.0;
            want[16] = 100.0;
            want[24] = 100.0 * left / s;
            want[30] = 100.0 * right / s;
            for b in 0..33 {
                assert!((feats.descriptors[i].bins[b] - want[b]).abs() < 1e-9, "point {i} bin {b}");
            }
        }
    }

    #[test]
    fn isolated_point_flagged() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.001, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let n = Point3::new(0.0, 0.0, 1.0);
        let cloud = PointCloud::with_normals(pts, vec![n; 3]).unwrap();
        let f = compute_fpfh(&cloud, 0.01).unwrap();
        assert_eq!(f.isolated, vec![false, false, true]);
        assert_eq!(f.descriptors[2], Fpfh33::zero());
        assert!(matches!(compute_fpfh(&PointCloud::<f64>::new(vec![n]), 0.1), Err(RegistrationError::MissingNormals)));
    }

    #[test]
    fn planar_patch_concentrates_in_middle_bins() {
        let pts: Vec<_> = (0..400).map(|i| Point3::new((i % 20) as f64 * 0.002, (i / 20) as f64 * 0.002, 0.5)).collect();
        let n = Point3::new(0.0, 0.0, -1.0);
        let cloud = PointCloud::with_normals(pts.clone(), vec![n; 400]).unwrap();
        let f = compute_fpfh(&cloud, 0.01).unwrap();
        for d in &f.descriptors {
            let s = d.sub_sums();
            for v in s {
                assert!((v - 100.0).abs() < 1e-6);
            }
            assert!((d.bins[5] - 100.0).abs() < 1e-9);
            assert!((d.bins[16] - 100.0).abs() < 1e-9);
            assert!((d.bins[27] - 100.0).abs() < 1e-9);
        }
        // Direct angle check on one pair: coplanar normals give zero angles.
        let f0 = pair_features(&pts[0], &n, &pts[21], &n);
        assert!(f0[0].abs() < 1e-12 && f0[1].abs() < 1e-12 && f0[2].abs() < 1e-12);
    }

    #[test]
    fn pair_features_invariant_under_rigid_motion() {
        use crate::linalg::Mat3;
        let (p1, n1) = (Point3::new(0.1, 0.0, 0.2), Point3::new(0.0, 0.6, 0.8));
        let (p2, n2) = (Point3::new(0.0, 0.05, 0.21), Point3::new(0.36, 0.0, 0.933).normalized().unwrap());
        let r = Mat3::from_axis_angle(&Point3::new(1.0, -2.0, 0.5), 0.7);
        let t = Point3::new(0.3, -0.1, 0.05);
        let a: [f64; 4] = pair_features(&p1, &n1, &p2, &n2);
        let b = pair_features(&(r.mul_vec(&p1) + t), &r.mul_vec(&n1), &(r.mul_vec(&p2) + t), &r.mul_vec(&n2));
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
}
