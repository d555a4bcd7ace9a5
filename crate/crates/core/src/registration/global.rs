//! Feature-based global registration: mutual nearest neighbors in descriptor space,
//! a tuple-consistency filter, then a scaled Geman-McClure objective minimized by
//! graduated non-convexity with linearized rigid updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::fpfh::FpfhFeatures;
use super::rotation::RigidTransform;
use super::RegistrationError;
use crate::linalg::{solve_linear, Mat3, Point3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalParams<T: Real> {
    /// Lower end of the robust-kernel schedule is `voxel^2`.
    pub voxel: T,
    pub tuple_scale: T,
    pub max_tuples: usize,
    pub iterations: usize,
    /// Iterations between halvings of the robust-kernel scale.
    pub stage_length: usize,
    pub seed: u64,
}

impl<T: Real> Default for GlobalParams<T> {
    fn default() -> Self {
        Self { voxel: T::lit(0.002), tuple_scale: T::lit(0.9), max_tuples: 1000, iterations: 128, stage_length: 8, seed: 0 }
    }
}

fn nearest_feature<T: Real>(q: &[T; 33], set: &[([T; 33], usize)]) -> Option<usize> {
    let mut best: Option<(T, usize)> = None;
    for (f, idx) in set {
        let d: T = f.iter().zip(q).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, *idx));
        }
    }
    best.map(|b| b.1)
}

/// Mutual nearest neighbors `(source, target)` in feature space; isolated points are skipped.
pub fn mutual_correspondences<T: Real>(src: &FpfhFeatures<T>, tgt: &FpfhFeatures<T>) -> Vec<(usize, usize)> {
    let usable = |f: &FpfhFeatures<T>| -> Vec<([T; 33], usize)> {
        f.descriptors.iter().zip(&f.isolated).enumerate().filter(|(_, (_, iso))| !**iso).map(|(i, (d, _))| (d.bins, i)).collect()
    };
    let s = usable(src);
    let t = usable(tgt);
    if s.is_empty() || t.is_empty() {
        return Vec::new();
    }
    let s2t: Vec<Option<usize>> = s.par_iter().map(|(f, _)| nearest_feature(f, &t)).collect();
    let t2s: Vec<Option<usize>> = t.par_iter().map(|(f, _)| nearest_feature(f, &s)).collect();
    let mut t_pos = vec![usize::MAX; tgt.descriptors.len()];
    for (k, (_, j)) in t.iter().enumerate() {
        t_pos[*j] = k;
    }
    s.iter()
        .zip(&s2t)
        .filter_map(|((_, i), j)| {
            let j = (*j)?;
            (t2s[t_pos[j]] == Some(*i)).then_some((*i, j))
        })
        .collect()
}

/// Keeps correspondences from random triples whose pairwise lengths agree within `scale`.
pub fn tuple_filter<T: Real>(
    source: &[Point3<T>],
    target: &[Point3<T>],
    corr: &[(usize, usize)],
    scale: T,
    max_tuples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = corr.len();
    if n < 3 {
        return Vec::new();
    }
    let consistent = |a: (usize, usize), b: (usize, usize)| {
        let ls = source[a.0].distance(&source[b.0]);
        let lt = target[a.1].distance(&target[b.1]);
        ls * scale < lt && lt < ls / scale
    };
    let mut kept = Vec::new();
    let mut tuples = 0;
    for _ in 0..n * 100 {
        let i = [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)];
        let c = [corr[i[0]], corr[i[1]], corr[i[2]]];
        if consistent(c[0], c[1]) && consistent(c[1], c[2]) && consistent(c[2], c[0]) {
            kept.extend_from_slice(&c);
            tuples += 1;
            if tuples >= max_tuples {
                break;
            }
        }
    }
    kept.sort_unstable();
    kept.dedup();
    kept
}

/// Rigid transform mapping `source` onto `target` from feature correspondences alone.
pub fn global_register<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    src_feat: &FpfhFeatures<T>,
    tgt_feat: &FpfhFeatures<T>,
    params: &GlobalParams<T>,
) -> Result<RigidTransform<T>, RegistrationError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    let mutual = mutual_correspondences(src_feat, tgt_feat);
    if mutual.len() < 3 {
        return Err(RegistrationError::InsufficientCorrespondences(mutual.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let corr = tuple_filter(source.points(), target.points(), &mutual, params.tuple_scale, params.max_tuples, &mut rng);
    if corr.len() < 3 {
        return Err(RegistrationError::InsufficientCorrespondences(corr.len()));
    }
    optimize_pairwise(source.points(), target.points(), &corr, params, source.extent().max(target.extent()))
}

/// Graduated non-convexity over fixed correspondences.
pub fn optimize_pairwise<T: Real>(
    source: &[Point3<T>],
    target: &[Point3<T>],
    corr: &[(usize, usize)],
    params: &GlobalParams<T>,
    diameter: T,
) -> Result<RigidTransform<T>, RegistrationError> {
    let cs = Point3::centroid(source).ok_or(RegistrationError::EmptyCloud)?;
    let ct = Point3::centroid(target).ok_or(RegistrationError::EmptyCloud)?;
    let src: Vec<Point3<T>> = source.iter().map(|p| *p - cs).collect();
    let tgt: Vec<Point3<T>> = target.iter().map(|p| *p - ct).collect();
    let floor = params.voxel * params.voxel;
    let mut mu = (diameter * diameter).max(floor);
    let mut t = RigidTransform::identity();
    for it in 0..params.iterations {
        if it > 0 && it % params.stage_length.max(1) == 0 && mu > floor {
            mu = (mu / T::lit(2.0)).max(floor);
        }
        let mut jtj = [[T::zero(); 6]; 6];
        let mut jtr = [T::zero(); 6];
        for &(i, j) in corr {
            let q = t.apply(&src[i]);
            let r = q - tgt[j];
            let w = mu / (mu + r.norm_squared());
            let w = w * w;
            // rows of J: d(q + w x q + t)/d(w, t) = [-[q]x | I]
            let sk = Mat3::skew(&q);
            for a in 0..3 {
                let mut row = [T::zero(); 6];
                for b in 0..3 {
                    row[b] = -sk.m[a][b];
                }
                row[3 + a] = T::one();
                for u in 0..6 {
                    jtr[u] = jtr[u] + w * row[u] * r[a];
                    for v in 0..6 {
                        jtj[u][v] = jtj[u][v] + w * row[u] * row[v];
                    }
                }
            }
        }
        let rhs = jtr.map(|v| -v);
        let Some(xi) = solve_linear(jtj, rhs) else {
            break;
        };
        let dr = Mat3::exp_so3(&Point3::new(xi[0], xi[1], xi[2]));
        let step = RigidTransform::new(dr, Point3::new(xi[3], xi[4], xi[5]));
        t = step.compose(&t);
    }
    // x -> R (x - cs) + t + ct
    let translation = t.translation + ct - t.rotation.mul_vec(&cs);
    Ok(RigidTransform::new(t.rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::cloud::{estimate_normals_unoriented, voxel_downsample};
    use crate::registration::fpfh::compute_fpfh;
    use crate::registration::rotation::rotation_error;
    use crate::synthetic::sample_cap_cloud;

    fn features(c: &PointCloud<f64>, voxel: f64) -> (PointCloud<f64>, FpfhFeatures<f64>) {
        let d = voxel_downsample(c, voxel).unwrap();
        let mut d = estimate_normals_unoriented(&d, 30).unwrap();
        let center = d.centroid().unwrap();
        d.orient_normals_away_from(&center);
        let f = compute_fpfh(&d, 5.0 * voxel).unwrap();
        (d, f)
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = sample_cap_cloud(0.025, 3000, &RigidTransform::identity(), 0.0, 4);
        let (d, f) = features(&c, 0.002);
        let t = global_register(&d, &d, &f, &f, &GlobalParams::default()).unwrap();
        assert!(t.rotation.frobenius_distance(&Mat3::identity()) < 1e-6);
        assert!(t.translation.norm() < 1e-6);
    }

    fn bumpy_patch(n: usize) -> Vec<Point3<f64>> {
        (0..n * n)
            .map(|k| {
                let (x, y) = ((k % n) as f64 * 0.001, (k / n) as f64 * 0.001);
                let z = 0.006 * (x * 90.0).sin() * (y * 60.0 + 0.4).cos() + 0.004 * (-((x - 0.02).powi(2) + (y - 0.03).powi(2)) / 1e-4).exp();
                Point3::new(x, y, z)
            })
            .collect()
    }

    #[test]
    fn recovers_known_transform() {
        let model = PointCloud::new(bumpy_patch(50));
        let truth = RigidTransform::new(
            Mat3::from_axis_angle(&Point3::new(1.0, 0.3, 0.2), 25f64.to_radians()),
            Point3::new(0.05, -0.01, 0.3),
        );
        let sample = model.transformed(&truth);
        let (dm, fm) = features(&model, 0.002);
        let (ds, fs) = features(&sample, 0.002);
        let t = global_register(&dm, &ds, &fm, &fs, &GlobalParams::default()).unwrap();
        assert!(rotation_error(&t.rotation) < 1e-9);
        let ang = t.rotation.transpose().mul_mat(&truth.rotation).rotation_angle().to_degrees();
        assert!(ang <= 5.0, "rotation error {ang} deg");
        let c = model.centroid().unwrap();
        assert!(t.apply(&c).distance(&truth.apply(&c)) <= 0.005, "{:?}", t.translation);
    }

    #[test]
    fn two_points_are_insufficient() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.001, 0.0, 0.0)];
        let c = PointCloud::with_normals(pts, vec![Point3::new(0.0, 0.0, 1.0); 2]).unwrap();
        let f = compute_fpfh(&c, 0.01).unwrap();
        assert!(matches!(
            global_register(&c, &c, &f, &f, &GlobalParams::default()),
            Err(RegistrationError::InsufficientCorrespondences(_))
        ));
    }

    #[test]
    fn gnc_on_exact_pairs_is_exact() {
        let src: Vec<_> = (0..20).map(|i| Point3::new((i % 4) as f64 * 0.01, (i / 4) as f64 * 0.007, ((i * 7) % 5) as f64 * 0.004)).collect();
        let truth = RigidTransform::new(Mat3::from_axis_angle(&Point3::new(0.2, 1.0, -0.3), 0.5), Point3::new(0.01, -0.02, 0.03));
        let tgt: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let corr: Vec<_> = (0..20).map(|i| (i, i)).collect();
        let t = optimize_pairwise(&src, &tgt, &corr, &GlobalParams::default(), 0.1).unwrap();
        assert!(t.rotation.frobenius_distance(&truth.rotation) < 1e-9);
        assert!(t.translation.distance(&truth.translation) < 1e-9);
    }
}
