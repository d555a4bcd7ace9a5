//! Ground-truth RGB-D scenes of caps on a planar bed, and cap point-cloud fixtures.
//!
//! Pixel `(u, v)` looks along `((u - cx) / fx, (v - cy) / fy, 1)`, the inverse of
//! `localization::deproject`. A dome cap is the solid half-ball whose flat base is
//! centered at `center` and whose axis `tilt * (0, 0, -1)` points toward the camera when
//! untilted; a disk cap is a zero-thickness disk with that normal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::CircleDetection;
use crate::evaluation::{Circle, GroundTruthCircle};
use crate::imgcore::ImageRgb;
use crate::linalg::Point3;
use crate::localization::{CameraIntrinsics, DepthFrame, LocalizationError, MushroomLocation};
use crate::registration::{PointCloud, Quaternion, RigidTransform};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("cap {0} is not between the camera and the plane")]
    CapBehindPlane(usize),
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Frame(#[from] LocalizationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapShape {
    #[default]
    Dome,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CapSpec<T: Real> {
    pub center: Point3<T>,
    pub radius: T,
    #[serde(default = "Quaternion::identity")]
    pub tilt: Quaternion<T>,
    #[serde(default)]
    pub shape: CapShape,
}

impl<T: Real> CapSpec<T> {
    pub fn dome(center: Point3<T>, radius: T) -> Self {
        Self { center, radius, tilt: Quaternion::identity(), shape: CapShape::Dome }
    }

    pub fn disk(center: Point3<T>, radius: T) -> Self {
        Self { center, radius, tilt: Quaternion::identity(), shape: CapShape::Disk }
    }

    /// Unit cap axis, pointing out of the dome.
    pub fn axis(&self) -> Point3<T> {
        self.tilt.to_rotation().mul_vec(&Point3::new(T::zero(), T::zero(), -T::one()))
    }

    /// Largest depth reached by the cap.
    fn max_depth(&self) -> T {
        let a = self.axis();
        let rim = self.center.z + self.radius * (T::one() - a.z * a.z).max(T::zero()).sqrt();
        match self.shape {
            CapShape::Dome if a.z > T::zero() => self.center.z + self.radius,
            _ => rim,
        }
    }

    fn min_depth(&self) -> T {
        let a = self.axis();
        let rim = self.center.z - self.radius * (T::one() - a.z * a.z).max(T::zero()).sqrt();
        match self.shape {
            CapShape::Dome if a.z < T::zero() => self.center.z - self.radius,
            _ => rim,
        }
    }

    /// Ray parameter of the first hit along `d` from the origin.
    pub fn intersect(&self, d: &Point3<T>) -> Option<T> {
        let a = self.axis();
        let c = self.center;
        let da = d.dot(&a);
        let ca = c.dot(&a);
        match self.shape {
            CapShape::Disk => {
                if da == T::zero() {
                    return None;
                }
                let t = ca / da;
                (t > T::zero() && (*d * t).distance(&c) <= self.radius).then_some(t)
            }
            CapShape::Dome => {
                // |t d - c|^2 = R^2
                let qa = d.norm_squared();
                let qb = -T::lit(2.0) * d.dot(&c);
                let qc = c.norm_squared() - self.radius * self.radius;
                let disc = qb * qb - T::lit(4.0) * qa * qc;
                if disc < T::zero() {
                    return None;
                }
                let s = disc.sqrt();
                let mut lo = (-qb - s) / (T::lit(2.0) * qa);
                let mut hi = (-qb + s) / (T::lit(2.0) * qa);
                // half-space (t d - c) . a >= 0
                if da > T::zero() {
                    lo = lo.max(ca / da);
                } else if da < T::zero() {
                    hi = hi.min(ca / da);
                } else if ca > T::zero() {
                    return None;
                }
                (lo <= hi && lo > T::zero()).then_some(lo)
            }
        }
    }

    /// Image circle of the cap outline.
    ///
    /// Domes use the silhouette ellipse of the full sphere, reported as the circle of
    /// equal area. Disks use the pinhole image of the center and `f * R / z`, exact for
    /// untilted disks.
    pub fn image_circle(&self, k: &CameraIntrinsics<T>) -> Circle<T> {
        let c = self.center;
        let f = (k.fx * k.fy).sqrt();
        match self.shape {
            CapShape::Disk => Circle { cx: k.cx + k.fx * c.x / c.z, cy: k.cy + k.fy * c.y / c.z, r: f * self.radius / c.z },
            CapShape::Dome => {
                let dist = c.norm();
                let chat = c / dist;
                let sin_b = self.radius / dist;
                let cos_b = (T::one() - sin_b * sin_b).sqrt();
                let rho = (chat.x * chat.x + chat.y * chat.y).sqrt();
                let a_den = cos_b * cos_b - rho * rho;
                let semi_major = cos_b * sin_b / a_den;
                let semi_minor = sin_b / a_den.sqrt();
                let offset = rho * chat.z / a_den;
                let (ux, uy) = if rho > T::zero() { (chat.x / rho, chat.y / rho) } else { (T::zero(), T::zero()) };
                Circle { cx: k.cx + k.fx * offset * ux, cy: k.cy + k.fy * offset * uy, r: f * (semi_major * semi_minor).sqrt() }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct HoleDisk<T: Real> {
    pub cx: T,
    pub cy: T,
    pub r: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SceneSpec<T: Real> {
    pub plane_depth: T,
    pub caps: Vec<CapSpec<T>>,
    #[serde(default = "default_fg")]
    pub fg_intensity: T,
    #[serde(default = "default_bg")]
    pub bg_intensity: T,
    #[serde(default)]
    pub noise_sigma: T,
    #[serde(default)]
    pub depth_noise_sigma: T,
    #[serde(default)]
    pub hole_prob: T,
    #[serde(default)]
    pub hole_disks: Vec<HoleDisk<T>>,
    #[serde(default = "default_scale")]
    pub depth_scale: T,
    #[serde(default)]
    pub seed: u64,
}

fn default_fg<T: Real>() -> T {
    T::lit(200.0)
}

fn default_bg<T: Real>() -> T {
    T::lit(60.0)
}

fn default_scale<T: Real>() -> T {
    T::lit(0.001)
}

impl<T: Real> SceneSpec<T> {
    pub fn new(plane_depth: T, caps: Vec<CapSpec<T>>) -> Self {
        Self {
            plane_depth,
            caps,
            fg_intensity: default_fg(),
            bg_intensity: default_bg(),
            noise_sigma: T::zero(),
            depth_noise_sigma: T::zero(),
            hole_prob: T::zero(),
            hole_disks: Vec::new(),
            depth_scale: default_scale(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if !(self.plane_depth > T::zero()) || !self.plane_depth.is_finite() {
            return bad("plane depth must be positive");
        }
        if !(self.hole_prob >= T::zero() && self.hole_prob <= T::one()) {
            return bad("hole_prob must lie in [0, 1]");
        }
        if !(self.noise_sigma >= T::zero() && self.depth_noise_sigma >= T::zero()) {
            return bad("noise levels must be non-negative");
        }
        if !(self.depth_scale > T::zero()) {
            return bad("depth_scale must be positive");
        }
        for (i, c) in self.caps.iter().enumerate() {
            if !(c.radius > T::zero()) || !c.center.is_finite() || !(c.tilt.norm() > T::zero()) {
                return bad(&format!("cap {i} has invalid geometry"));
            }
            if !(c.max_depth() < self.plane_depth && c.min_depth() > T::zero()) {
                return Err(SynthError::CapBehindPlane(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T: Real> {
    pub rgb: ImageRgb,
    pub depth: DepthFrame<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub gt_circles: Vec<GroundTruthCircle<T>>,
    pub gt_locations: Vec<MushroomLocation<T>>,
    pub gt_normals: Vec<Point3<T>>,
}

/// Nearest surface along `d`: `(ray parameter, cap index or None for the plane)`.
pub fn cast_ray<T: Real>(spec: &SceneSpec<T>, d: &Point3<T>) -> Option<(T, Option<usize>)> {
    let mut best = (d.z > T::zero()).then(|| (spec.plane_depth / d.z, None));
    for (i, cap) in spec.caps.iter().enumerate() {
        if let Some(t) = cap.intersect(d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Some(i)));
            }
        }
    }
    best
}

fn pixel_ray<T: Real>(u: T, v: T, k: &CameraIntrinsics<T>) -> Point3<T> {
    Point3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, T::one())
}

const STREAM_RGB: u64 = 0;
const STREAM_DEPTH: u64 = 1;
const STREAM_HOLES: u64 = 2;

fn row_rng(seed: u64, row: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64 * 3 + stream);
    rng
}

pub fn render_scene<T: Real>(spec: &SceneSpec<T>, k: &CameraIntrinsics<T>) -> Result<SyntheticScene<T>, SynthError> {
    spec.validate()?;
    k.validate()?;
    let (w, h) = (k.width, k.height);
    let rows: Vec<(Vec<[u8; 3]>, Vec<u16>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb_rng = row_rng(spec.seed, y, STREAM_RGB);
            let mut depth_rng = row_rng(spec.seed, y, STREAM_DEPTH);
            let mut hole_rng = row_rng(spec.seed, y, STREAM_HOLES);
            let mut rgb = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let d = pixel_ray(T::lit(x as f64), T::lit(y as f64), k);
                let hit = cast_ray(spec, &d);
                let base = match hit {
                    Some((_, Some(_))) => spec.fg_intensity,
                    _ => spec.bg_intensity,
                };
                let g: f64 = StandardNormal.sample(&mut rgb_rng);
                let val = (base + spec.noise_sigma * T::lit(g)).round().max(T::zero()).min(T::lit(255.0));
                let val = val.to_u8().unwrap_or(0);
                rgb.push([val, val, val]);
                let gz: f64 = StandardNormal.sample(&mut depth_rng);
                let drop = spec.hole_prob > T::zero() && hole_rng.random::<f64>() < spec.hole_prob.as_f64();
                let raw = match hit {
                    Some((t, _)) => {
                        let z = t * d.z + spec.depth_noise_sigma * T::lit(gz);
                        quantize(z, spec.depth_scale)
                    }
                    None => 0,
                };
                depth.push(if drop { 0 } else { raw });
            }
            (rgb, depth)
        })
        .collect();
    let mut rgb_data = Vec::with_capacity(w * h);
    let mut depth_data = Vec::with_capacity(w * h);
    for (r, d) in rows {
        rgb_data.extend(r);
        depth_data.extend(d);
    }
    for hd in &spec.hole_disks {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (T::lit(x as f64) - hd.cx, T::lit(y as f64) - hd.cy);
                if dx * dx + dy * dy <= hd.r * hd.r {
                    depth_data[y * w + x] = 0;
                }
            }
        }
    }
    let rgb = ImageRgb::new(w, h, rgb_data).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let depth = DepthFrame::new(w, h, depth_data, spec.depth_scale)?;

    let mut gt_circles = Vec::new();
    let mut gt_locations = Vec::new();
    let mut gt_normals = Vec::new();
    for (i, cap) in spec.caps.iter().enumerate() {
        let c = cap.image_circle(k);
        gt_circles.push(GroundTruthCircle { cx: c.cx, cy: c.cy, r: c.r, id: i });
        let d = pixel_ray(c.cx, c.cy, k);
        let (t, _) = cast_ray(spec, &d).expect("ray through a cap center hits the scene");
        let position = d * t;
        gt_locations.push(MushroomLocation {
            circle: CircleDetection { cx: c.cx, cy: c.cy, r: c.r, score: T::one() },
            position,
            distance_m: position.norm(),
            diameter_m: T::lit(2.0) * cap.radius,
            fill_used: false,
        });
        gt_normals.push(cap.axis());
    }
    Ok(SyntheticScene { rgb, depth, intrinsics: *k, gt_circles, gt_locations, gt_normals })
}

fn quantize<T: Real>(z: T, scale: T) -> u16 {
    if !(z > T::zero()) {
        return 0;
    }
    (z / scale).round().to_f64().map(|v| v.clamp(0.0, u16::MAX as f64) as u16).unwrap_or(0)
}

/// `n` area-uniform points on the upper (`z >= 0`) hemisphere of `radius`, transformed,
/// plus isotropic Gaussian noise.
pub fn sample_cap_cloud<T: Real>(
    radius: T,
    n: usize,
    transform: &RigidTransform<T>,
    noise_sigma: T,
    seed: u64,
) -> PointCloud<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.as_f64().max(0.0)).expect("finite sigma");
    let points = (0..n)
        .map(|_| {
            let z = radius * T::lit(rng.random::<f64>());
            let phi = T::TAU() * T::lit(rng.random::<f64>());
            let rr = (radius * radius - z * z).max(T::zero()).sqrt();
            let p = transform.apply(&Point3::new(rr * phi.cos(), rr * phi.sin(), z));
            if noise_sigma > T::zero() {
                let e: [f64; 3] = std::array::from_fn(|_| noise.sample(&mut rng));
                p + Point3::new(T::lit(e[0]), T::lit(e[1]), T::lit(e[2]))
            } else {
                p
            }
        })
        .collect();
    PointCloud::new(points)
}
