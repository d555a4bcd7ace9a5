//! Iterative closest point refinement (point-to-point default, point-to-plane optional).
//!
//! The recorded objective is the truncated sum over all source points of
//! `min(d^2, max_corr_dist^2)`. A step that would raise it is rejected and iteration
//! stops, so the recorded history is non-increasing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::kdtree::KdTree;
use super::rotation::RigidTransform;
use super::RegistrationError;
use crate::linalg::{solve_linear, svd3, Mat3, Point3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpMethod {
    #[default]
    PointToPoint,
    PointToPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RegistrationResult<T: Real> {
    pub transform: RigidTransform<T>,
    /// Fraction of source points with a target within `max_corr_dist`.
    pub fitness: T,
    pub inlier_rmse: T,
    pub iterations: usize,
    /// Objective at the start of each iteration and after the last accepted step.
    pub objective_history: Vec<T>,
}

pub const ICP_RELATIVE_TOL: f64 = 1e-6;

struct Matches<T: Real> {
    pairs: Vec<(usize, usize)>,
    fitness: T,
    rmse: T,
    objective: T,
}

fn match_points<T: Real>(source: &[Point3<T>], tree: &KdTree<T>, t: &RigidTransform<T>, max_dist: T) -> Matches<T> {
    let cap = max_dist * max_dist;
    let found: Vec<Option<(usize, T)>> = source
        .par_iter()
        .map(|p| tree.nearest_within(&t.apply(p), cap))
        .collect();
    let mut pairs = Vec::new();
    let mut sq = T::zero();
    let mut objective = T::zero();
    for (i, f) in found.into_iter().enumerate() {
        match f {
            Some((j, d2)) => {
                pairs.push((i, j));
                sq = sq + d2;
                objective = objective + d2;
            }
            None => objective = objective + cap,
        }
    }
    let n = pairs.len();
    let fitness = T::from_usize_lossy(n) / T::from_usize_lossy(source.len().max(1));
    let rmse = if n > 0 { (sq / T::from_usize_lossy(n)).sqrt() } else { T::zero() };
    Matches { pairs, fitness, rmse, objective }
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (SVD with reflection guard).
pub fn procrustes<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Option<RigidTransform<T>> {
    let cs = Point3::centroid(src)?;
    let cd = Point3::centroid(dst)?;
    let mut h = Mat3::<T>::zeros();
    for (a, b) in src.iter().zip(dst) {
        let (a, b) = (*a - cs, *b - cd);
        for i in 0..3 {
            for j in 0..3 {
                h.m[i][j] = h.m[i][j] + a[i] * b[j];
            }
        }
    }
    let (u, _, v) = svd3(&h);
    let ut = u.transpose();
    let mut r = v.mul_mat(&ut);
    if r.determinant() < T::zero() {
        let mut vf = v;
        for row in vf.m.iter_mut() {
            row[2] = -row[2];
        }
        r = vf.mul_mat(&ut);
    }
    Some(RigidTransform::new(r, cd - r.mul_vec(&cs)))
}

fn point_to_plane_step<T: Real>(
    source: &[Point3<T>],
    target: &[Point3<T>],
    normals: &[Point3<T>],
    pairs: &[(usize, usize)],
    t: &RigidTransform<T>,
) -> Option<RigidTransform<T>> {
    let mut jtj = [[T::zero(); 6]; 6];
    let mut jtr = [T::zero(); 6];
    for &(i, j) in pairs {
        let q = t.apply(&source[i]);
        let n = normals[j];
        let r = (q - target[j]).dot(&n);
        let c = q.cross(&n);
        let row = [c.x, c.y, c.z, n.x, n.y, n.z];
        for u in 0..6 {
            jtr[u] = jtr[u] - row[u] * r;
            for v in 0..6 {
                jtj[u][v] = jtj[u][v] + row[u] * row[v];
            }
        }
    }
    let xi = solve_linear(jtj, jtr)?;
    let step = RigidTransform::new(Mat3::exp_so3(&Point3::new(xi[0], xi[1], xi[2])), Point3::new(xi[3], xi[4], xi[5]));
    Some(step.compose(t))
}

fn relative_change<T: Real>(a: T, b: T) -> T {
    let d = (a - b).abs();
    if b == T::zero() {
        d
    } else {
        d / b.abs()
    }
}

pub fn icp<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    init: &RigidTransform<T>,
    max_corr_dist: T,
    max_iter: usize,
    method: IcpMethod,
) -> Result<RegistrationResult<T>, RegistrationError> {
    if !(max_corr_dist > T::zero()) || !max_corr_dist.is_finite() {
        return Err(RegistrationError::InvalidParameter(format!("max_corr_dist {max_corr_dist}")));
    }
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    let target_normals = match method {
        IcpMethod::PointToPoint => None,
        IcpMethod::PointToPlane => Some(target.normals().ok_or(RegistrationError::MissingNormals)?),
    };
    let tree = KdTree::new(target.points());
    let src = source.points();
    let mut t = *init;
    let mut m = match_points(src, &tree, &t, max_corr_dist);
    let mut history = vec![m.objective];
    let mut iterations = 0;
    while iterations < max_iter {
        if m.pairs.is_empty() {
            return Err(RegistrationError::NoCorrespondences { iteration: iterations });
        }
        let next = match target_normals {
            None => {
                let a: Vec<Point3<T>> = m.pairs.iter().map(|&(i, _)| src[i]).collect();
                let b: Vec<Point3<T>> = m.pairs.iter().map(|&(_, j)| target.points()[j]).collect();
                procrustes(&a, &b)
            }
            Some(normals) => point_to_plane_step(src, target.points(), normals, &m.pairs, &t),
        };
        let Some(next) = next else { break };
        let nm = match_points(src, &tree, &next, max_corr_dist);
        iterations += 1;
        if nm.objective > m.objective || nm.pairs.is_empty() {
            break;
        }
        let converged = relative_change(nm.fitness, m.fitness) < T::lit(ICP_RELATIVE_TOL)
            && relative_change(nm.rmse, m.rmse) < T::lit(ICP_RELATIVE_TOL);
        t = next;
        m = nm;
        history.push(m.objective);
        if converged {
            break;
        }
    }
    if m.pairs.is_empty() {
        return Err(RegistrationError::NoCorrespondences { iteration: iterations });
    }
    Ok(RegistrationResult { transform: t, fitness: m.fitness, inlier_rmse: m.rmse, iterations, objective_history: history })
}

pub fn icp_point_to_point<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    init: &RigidTransform<T>,
    max_corr_dist: T,
    max_iter: usize,
) -> Result<RegistrationResult<T>, RegistrationError> {
    icp(source, target, init, max_corr_dist, max_iter, IcpMethod::PointToPoint)
}

pub fn icp_point_to_plane<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    init: &RigidTransform<T>,
    max_corr_dist: T,
    max_iter: usize,
) -> Result<RegistrationResult<T>, RegistrationError> {
    icp(source, target, init, max_corr_dist, max_iter, IcpMethod::PointToPlane)
}
