//! Point clouds, voxel-grid downsampling and PCA normal estimation.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::kdtree::KdTree;
use super::rotation::RigidTransform;
use super::RegistrationError;
use crate::linalg::{symmetric_eigen, Point3};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T: Real> {
    points: Vec<Point3<T>>,
    normals: Option<Vec<Point3<T>>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Point3<T>>, normals: Vec<Point3<T>>) -> Result<Self, RegistrationError> {
        if normals.len() != points.len() {
            return Err(RegistrationError::NormalsLength { points: points.len(), normals: normals.len() });
        }
        Ok(Self { points, normals: Some(normals) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point3<T>]> {
        self.normals.as_deref()
    }

    pub fn set_normals(&mut self, normals: Vec<Point3<T>>) -> Result<(), RegistrationError> {
        if normals.len() != self.points.len() {
            return Err(RegistrationError::NormalsLength { points: self.points.len(), normals: normals.len() });
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn clear_normals(&mut self) {
        self.normals = None;
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Point3<T>> {
        Point3::centroid(&self.points)
    }

    /// Axis-aligned bounding-box diagonal.
    pub fn extent(&self) -> T {
        let mut lo = Point3::new(T::infinity(), T::infinity(), T::infinity());
        let mut hi = -lo;
        for p in &self.points {
            lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        if self.points.is_empty() {
            T::zero()
        } else {
            hi.distance(&lo)
        }
    }

    /// Flips normals so that each points toward `viewpoint`.
    pub fn orient_normals_toward(&mut self, viewpoint: &Point3<T>) {
        if let Some(ns) = self.normals.as_mut() {
            for (n, p) in ns.iter_mut().zip(&self.points) {
                if n.dot(&(*viewpoint - *p)) < T::zero() {
                    *n = -*n;
                }
            }
        }
    }

    /// Flips normals so that each points away from `center`.
    pub fn orient_normals_away_from(&mut self, center: &Point3<T>) {
        if let Some(ns) = self.normals.as_mut() {
            for (n, p) in ns.iter_mut().zip(&self.points) {
                if n.dot(&(*p - *center)) < T::zero() {
                    *n = -*n;
                }
            }
        }
    }
}

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key<T: Real>(p: &Point3<T>, voxel: T) -> VoxelKey {
    let k = |v: T| (v / voxel).floor().to_i64().unwrap_or(i64::MAX);
    (k(p.x), k(p.y), k(p.z))
}

/// One centroid per occupied voxel, in ascending voxel-key order.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, voxel: T) -> Result<PointCloud<T>, RegistrationError> {
    if cloud.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    if !(voxel > T::zero()) || !voxel.is_finite() {
        return Err(RegistrationError::InvalidParameter(format!("voxel size {voxel}")));
    }
    let mut cells: BTreeMap<VoxelKey, (Point3<T>, Point3<T>, usize)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let e = cells.entry(voxel_key(p, voxel)).or_insert((Point3::zero(), Point3::zero(), 0));
        e.0 += *p;
        if let Some(ns) = &cloud.normals {
            e.1 += ns[i];
        }
        e.2 += 1;
    }
    let points = cells.values().map(|(s, _, n)| *s / T::from_usize_lossy(*n)).collect();
    let normals = cloud.normals.as_ref().map(|_| {
        cells.values().map(|(_, s, _)| s.normalized().unwrap_or(Point3::new(T::zero(), T::zero(), T::one()))).collect()
    });
    Ok(PointCloud { points, normals })
}

/// Unit normal of the best-fit plane through `pts` (smallest covariance eigenvector).
pub fn pca_normal<T: Real>(pts: &[Point3<T>]) -> Option<Point3<T>> {
    let c = Point3::centroid(pts)?;
    let mut cov = [[T::zero(); 3]; 3];
    for p in pts {
        let d = *p - c;
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = cov[i][j] + d[i] * d[j];
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(cov);
    let scale = vals[2].abs();
    if !(scale > T::zero()) || vals[1] <= scale * T::lit(1e-12) {
        return None;
    }
    Point3::new(vecs[0][0], vecs[1][0], vecs[2][0]).normalized()
}

/// PCA normals over `knn` neighbors (the point included), oriented toward the origin.
pub fn estimate_normals<T: Real>(cloud: &PointCloud<T>, knn: usize) -> Result<PointCloud<T>, RegistrationError> {
    let mut out = estimate_normals_unoriented(cloud, knn)?;
    out.orient_normals_toward(&Point3::zero());
    Ok(out)
}

pub fn estimate_normals_unoriented<T: Real>(cloud: &PointCloud<T>, knn: usize) -> Result<PointCloud<T>, RegistrationError> {
    if knn < 3 {
        return Err(RegistrationError::InvalidParameter(format!("knn {knn} < 3")));
    }
    if cloud.len() < knn {
        return Err(RegistrationError::InvalidParameter(format!("cloud of {} points has fewer than knn = {knn}", cloud.len())));
    }
    let tree = KdTree::new(&cloud.points);
    let normals = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nbrs: Vec<Point3<T>> = tree.knn(p, knn).into_iter().map(|(j, _)| cloud.points[j]).collect();
            pca_normal(&nbrs).ok_or(RegistrationError::DegenerateNeighborhood(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PointCloud { points: cloud.points.clone(), normals: Some(normals) })
}
