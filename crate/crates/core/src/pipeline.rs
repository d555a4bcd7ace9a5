//! End-to-end frame processing: segmentation, circle detection, localization and
//! per-cap pose, plus the overlay rendering of detections.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{detect_circles, CircleDetection, DetectParams, RadiusRange};
use crate::imgcore::{morphological_open, otsu_threshold, to_grayscale, BinaryMask, ImageError, ImageRgb, StructuringElement};
use crate::linalg::Point3;
use crate::localization::{deproject, localize_one, CameraIntrinsics, DepthFrame, MushroomLocation};
use crate::registration::pose::{estimate_pose, PoseEstimate, PoseParams};
use crate::registration::PointCloud;
use crate::scalar::Real;
use crate::segmentation::{chan_vese_evolve, ChanVeseParams, SegmentationError};

/// Opening kernel applied to the segmentation before circle detection.
pub const OPENING_KERNEL: (usize, usize) = (10, 10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("input shapes differ: rgb {rgb:?}, depth {depth:?}, intrinsics {intrinsics:?}")]
    ShapeMismatch { rgb: (usize, usize), depth: (usize, usize), intrinsics: (usize, usize) },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model cloud is empty")]
    EmptyModel,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct PipelineConfig<T: Real> {
    pub chan_vese: ChanVeseParams<T>,
    pub detect: DetectParams<T>,
    pub pose: PoseParams<T>,
    /// PLY file of the upright cap model; resolved by the caller.
    pub model_path: Option<PathBuf>,
    /// Model axis that points out of the cap.
    pub model_up: Point3<T>,
    /// Sample clouds take pixels within `crop_factor * r` of each detected center.
    pub crop_factor: T,
    /// Sample points deeper than the cap center by more than this many cap radii are
    /// dropped (background behind the cap); `None` keeps the whole crop.
    pub depth_gate: Option<T>,
    /// Cap `i` registers with seed `seed + i`.
    pub seed: u64,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            chan_vese: ChanVeseParams::default(),
            detect: DetectParams::default(),
            pose: PoseParams::default(),
            model_path: None,
            model_up: Point3::new(T::zero(), T::zero(), T::one()),
            crop_factor: T::lit(1.2),
            depth_gate: Some(T::one()),
            seed: 0,
        }
    }
}

impl<T: Real> PipelineConfig<T> {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.chan_vese.validate()?;
        let r = &self.detect.range;
        if let Err(e) = RadiusRange::new(r.r_min, r.r_max) {
            return bad(e.to_string());
        }
        if !(self.detect.score_thresh >= T::zero()) {
            return bad("score_thresh must be >= 0".into());
        }
        if !(self.detect.nms_distance() >= T::zero()) {
            return bad("nms_dist must be >= 0".into());
        }
        if !(self.crop_factor > T::zero()) || !self.crop_factor.is_finite() {
            return bad("crop_factor must be positive".into());
        }
        if self.depth_gate.is_some_and(|g| !(g > T::zero()) || !g.is_finite()) {
            return bad("depth_gate must be positive".into());
        }
        if self.model_up.normalized().is_none() {
            return bad("model_up must be a nonzero vector".into());
        }
        let p = &self.pose;
        if !(p.voxel > T::zero()) || !(p.feature_radius_factor > T::zero()) || !(p.icp_max_corr_factor > T::zero()) {
            return bad("pose voxel and radius factors must be positive".into());
        }
        if p.normal_knn < 3 {
            return bad("normal_knn must be at least 3".into());
        }
        Ok(())
    }
}

/// One fully processed cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct MushroomReport<T: Real> {
    /// Detection index in descending score order.
    pub id: usize,
    pub center_px: [T; 2],
    pub radius_px: T,
    pub position_m: [T; 3],
    pub distance_m: T,
    pub diameter_m: T,
    pub quaternion_xyzw: [T; 4],
    pub cap_normal: [T; 3],
    pub fill_used: bool,
    pub pose_fitness: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStage {
    Localization,
    Pose,
}

/// A detection that did not yield a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct PipelineReject<T: Real> {
    pub id: usize,
    pub center_px: [T; 2],
    pub radius_px: T,
    pub score: T,
    pub stage: RejectStage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct PipelineOutput<T: Real> {
    pub reports: Vec<MushroomReport<T>>,
    pub rejects: Vec<PipelineReject<T>>,
}

impl<T: Real> PipelineOutput<T> {
    /// Every detection (reports and rejects) ordered by id, with rank-derived scores.
    pub fn detections(&self) -> Vec<CircleDetection<T>> {
        let mut all: Vec<(usize, T, T, T)> = self
            .reports
            .iter()
            .map(|r| (r.id, r.center_px[0], r.center_px[1], r.radius_px))
            .chain(self.rejects.iter().map(|r| (r.id, r.center_px[0], r.center_px[1], r.radius_px)))
            .collect();
        all.sort_by_key(|e| e.0);
        let n = all.len();
        all.iter()
            .enumerate()
            .map(|(k, &(_, cx, cy, r))| CircleDetection { cx, cy, r, score: T::from_usize_lossy(n - k) })
            .collect()
    }
}

/// Foreground mask after Otsu initialization, Chan-Vese evolution and opening.
/// A constant image has no foreground.
pub fn segment<T: Real>(rgb: &ImageRgb, params: &ChanVeseParams<T>) -> Result<BinaryMask, PipelineError> {
    let gray = to_grayscale::<T>(rgb);
    let init = match otsu_threshold(&gray) {
        Ok((m, _)) => m,
        Err(ImageError::ConstantImage) => return Ok(BinaryMask::filled(rgb.width(), rgb.height(), false)?),
        Err(e) => return Err(e.into()),
    };
    let evolved = match chan_vese_evolve(&gray, &init, params) {
        Ok(m) => m,
        Err(SegmentationError::ConstantImage) => BinaryMask::filled(rgb.width(), rgb.height(), false)?,
        Err(e) => return Err(e.into()),
    };
    let (kw, kh) = OPENING_KERNEL;
    Ok(morphological_open(&evolved, &StructuringElement::ellipse(kw, kh)))
}

/// Segmentation followed by circle detection, strongest first.
pub fn segment_and_detect<T: Real>(rgb: &ImageRgb, cfg: &PipelineConfig<T>) -> Result<Vec<CircleDetection<T>>, PipelineError> {
    let mask = segment(rgb, &cfg.chan_vese)?;
    let d = &cfg.detect;
    let mut dets = detect_circles(&mask, &d.range, d.score_thresh, d.nms_distance());
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(dets)
}

/// Deprojected valid depth pixels within `radius` of `(cx, cy)`, row-major.
pub fn crop_cloud<T: Real>(frame: &DepthFrame<T>, k: &CameraIntrinsics<T>, cx: T, cy: T, radius: T) -> PointCloud<T> {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let lo = |c: T| (c - radius).floor().to_i64().unwrap_or(0).max(0);
    let hi = |c: T, n: i64| (c + radius).ceil().to_i64().unwrap_or(n - 1).min(n - 1);
    let mut pts = Vec::new();
    for y in lo(cy)..=hi(cy, h) {
        for x in lo(cx)..=hi(cx, w) {
            let (u, v) = (T::lit(x as f64), T::lit(y as f64));
            if (u - cx) * (u - cx) + (v - cy) * (v - cy) > radius * radius {
                continue;
            }
            if let Some(z) = frame.depth(x as usize, y as usize) {
                if let Ok(p) = deproject(u, v, z, k) {
                    pts.push(p);
                }
            }
        }
    }
    PointCloud::new(pts)
}

enum CapOutcome<T: Real> {
    Report(Box<MushroomReport<T>>),
    Reject(RejectStage, String),
}

fn process_cap<T: Real>(
    id: usize,
    det: &CircleDetection<T>,
    depth: &DepthFrame<T>,
    k: &CameraIntrinsics<T>,
    model: &PointCloud<T>,
    cfg: &PipelineConfig<T>,
) -> CapOutcome<T> {
    let loc: MushroomLocation<T> = match localize_one(det, depth, k) {
        Ok(l) => l,
        Err(e) => return CapOutcome::Reject(RejectStage::Localization, e.to_string()),
    };
    let mut sample = crop_cloud(depth, k, det.cx, det.cy, cfg.crop_factor * det.r);
    if let Some(g) = cfg.depth_gate {
        let far = loc.position.z + g * det.r * loc.position.z / k.fx;
        sample = PointCloud::new(sample.points().iter().copied().filter(|p| p.z <= far).collect());
    }
    let params = PoseParams { seed: cfg.seed.wrapping_add(id as u64), ..cfg.pose };
    let pose: PoseEstimate<T> = match estimate_pose(model, &sample, &cfg.model_up, &params) {
        Ok(p) => p,
        Err(e) => return CapOutcome::Reject(RejectStage::Pose, e.to_string()),
    };
    let p = loc.position;
    let n = pose.cap_normal;
    CapOutcome::Report(Box::new(MushroomReport {
        id,
        center_px: [det.cx, det.cy],
        radius_px: det.r,
        position_m: [p.x, p.y, p.z],
        distance_m: loc.distance_m,
        diameter_m: loc.diameter_m,
        quaternion_xyzw: pose.quaternion.to_xyzw(),
        cap_normal: [n.x, n.y, n.z],
        fill_used: loc.fill_used,
        pose_fitness: pose.result.fitness,
    }))
}

/// Runs every stage on one registered RGB-D frame. Per-cap failures become rejects;
/// `reports.len() + rejects.len()` always equals the number of detections.
pub fn run_pipeline<T: Real>(
    rgb: &ImageRgb,
    depth: &DepthFrame<T>,
    k: &CameraIntrinsics<T>,
    model: &PointCloud<T>,
    cfg: &PipelineConfig<T>,
) -> Result<PipelineOutput<T>, PipelineError> {
    let shapes = ((rgb.width(), rgb.height()), (depth.width(), depth.height()), (k.width, k.height));
    if shapes.0 != shapes.1 || shapes.0 != shapes.2 {
        return Err(PipelineError::ShapeMismatch { rgb: shapes.0, depth: shapes.1, intrinsics: shapes.2 });
    }
    k.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    if model.is_empty() {
        return Err(PipelineError::EmptyModel);
    }
    let dets = segment_and_detect(rgb, cfg)?;
    let outcomes: Vec<CapOutcome<T>> =
        dets.par_iter().enumerate().map(|(id, d)| process_cap(id, d, depth, k, model, cfg)).collect();
    let mut out = PipelineOutput::default();
    for (id, (det, o)) in dets.iter().zip(outcomes).enumerate() {
        match o {
            CapOutcome::Report(r) => out.reports.push(*r),
            CapOutcome::Reject(stage, reason) => out.rejects.push(PipelineReject {
                id,
                center_px: [det.cx, det.cy],
                radius_px: det.r,
                score: det.score,
                stage,
                reason,
            }),
        }
    }
    Ok(out)
}

pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];
/// Half-length of the center mark arms in pixels.
pub const MARK_ARM: i64 = 4;

/// Copy of `rgb` with each circle outlined and its center marked with a '+'.
pub fn draw_overlay<T: Real>(rgb: &ImageRgb, circles: &[CircleDetection<T>], color: [u8; 3]) -> ImageRgb {
    let mut out = rgb.clone();
    let (w, h) = (rgb.width() as i64, rgb.height() as i64);
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            out.set(x as usize, y as usize, color);
        }
    };
    for c in circles {
        let (cx, cy, r) = (c.cx.as_f64(), c.cy.as_f64(), c.r.as_f64());
        if !(cx.is_finite() && cy.is_finite() && r.is_finite()) {
            continue;
        }
        // about four samples per pixel of circumference leaves no gaps
        let steps = ((8.0 * std::f64::consts::PI * r).ceil() as usize).max(8);
        for s in 0..steps {
            let a = std::f64::consts::TAU * s as f64 / steps as f64;
            put((cx + r * a.cos()).round() as i64, (cy + r * a.sin()).round() as i64);
        }
        let (mx, my) = (cx.round() as i64, cy.round() as i64);
        for d in -MARK_ARM..=MARK_ARM {
            put(mx + d, my);
            put(mx, my + d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_marks_center_and_outline() {
        let img = ImageRgb::filled(40, 30, [0, 0, 0]).unwrap();
        let c = CircleDetection { cx: 20.0, cy: 15.0, r: 10.0, score: 1.0 };
        let o = draw_overlay(&img, &[c], OVERLAY_COLOR);
        assert_eq!(o.get(20, 15), OVERLAY_COLOR);
        assert_eq!(o.get(24, 15), OVERLAY_COLOR);
        assert_eq!(o.get(20, 11), OVERLAY_COLOR);
        assert_eq!(o.get(21, 16), [0, 0, 0]);
        assert_eq!(o.get(30, 15), OVERLAY_COLOR);
        assert_eq!(o.get(20, 5), OVERLAY_COLOR);
        for y in 0..30 {
            for x in 0..40 {
                if o.get(x, y) == OVERLAY_COLOR {
                    let d = ((x as f64 - 20.0).powi(2) + (y as f64 - 15.0).powi(2)).sqrt();
                    let on_mark = (x == 20 || y == 15) && d <= 4.0;
                    assert!(on_mark || (d - 10.0).abs() <= 0.75, "stray pixel ({x},{y})");
                }
            }
        }
        let partial = draw_overlay(&img, &[CircleDetection { cx: 0.0, cy: 0.0, r: 50.0, score: 1.0 }], OVERLAY_COLOR);
        assert_eq!(partial.width(), 40);
    }

    #[test]
    fn crop_respects_radius_and_holes() {
        let k = CameraIntrinsics::<f64>::new(20, 20, 100.0, 100.0, 10.0, 10.0).unwrap();
        let mut f = DepthFrame::filled(20, 20, 500, 0.001).unwrap();
        f.set_raw(10, 10, 0);
        let c = crop_cloud(&f, &k, 10.0, 10.0, 2.0);
        assert_eq!(c.len(), 12);
        assert!(c.points().iter().all(|p| (p.z - 0.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_mismatched_inputs_and_bad_config() {
        let rgb = ImageRgb::filled(8, 6, [1, 2, 3]).unwrap();
        let depth = DepthFrame::filled(8, 5, 1, 0.001).unwrap();
        let k = CameraIntrinsics::new(8, 6, 5.0, 5.0, 4.0, 3.0).unwrap();
        let model = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]);
        let cfg = PipelineConfig::default();
        assert!(matches!(run_pipeline(&rgb, &depth, &k, &model, &cfg), Err(PipelineError::ShapeMismatch { .. })));
        let depth = DepthFrame::filled(8, 6, 1, 0.001).unwrap();
        let bad = PipelineConfig { crop_factor: 0.0, ..cfg.clone() };
        assert!(matches!(run_pipeline(&rgb, &depth, &k, &model, &bad), Err(PipelineError::InvalidConfig(_))));
        assert!(matches!(run_pipeline(&rgb, &depth, &k, &PointCloud::new(vec![]), &cfg), Err(PipelineError::EmptyModel)));
        let out = run_pipeline(&rgb, &depth, &k, &model, &cfg).unwrap();
        assert!(out.reports.is_empty() && out.rejects.is_empty());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig<f64> = serde_json::from_str(r#"{"crop_factor": 1.5}"#).unwrap();
        assert_eq!(cfg.crop_factor, 1.5);
        assert_eq!(cfg.model_up, Point3::new(0.0, 0.0, 1.0));
        assert_eq!(cfg.detect, DetectParams::default());
        let back: PipelineConfig<f64> = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
