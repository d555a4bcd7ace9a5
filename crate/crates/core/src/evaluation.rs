//! Detection scoring against ground-truth circles and depth-accuracy statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::CircleDetection;
use crate::localization::DepthFrame;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("f-score undefined when recall and precision are both zero")]
    UndefinedScore,
    #[error("window {window} does not fit around ({cx}, {cy})")]
    InvalidWindow { window: usize, cx: usize, cy: usize },
    #[error("no valid depth pixels in window")]
    NoValidPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle<T: Real> {
    pub cx: T,
    pub cy: T,
    pub r: T,
}

impl<T: Real> From<CircleDetection<T>> for Circle<T> {
    fn from(d: CircleDetection<T>) -> Self {
        Self { cx: d.cx, cy: d.cy, r: d.r }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCircle<T: Real> {
    pub cx: T,
    pub cy: T,
    pub r: T,
    pub id: usize,
}

impl<T: Real> From<GroundTruthCircle<T>> for Circle<T> {
    fn from(g: GroundTruthCircle<T>) -> Self {
        Self { cx: g.cx, cy: g.cy, r: g.r }
    }
}

/// Intersection area of two disks.
pub fn lens_area<T: Real>(a: &Circle<T>, b: &Circle<T>) -> T {
    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
    let (r1, r2) = (a.r, b.r);
    if d >= r1 + r2 {
        return T::zero();
    }
    if d <= (r1 - r2).abs() {
        let m = r1.min(r2);
        return T::PI() * m * m;
    }
    let two = T::lit(2.0);
    let c1 = ((d * d + r1 * r1 - r2 * r2) / (two * d * r1)).max(-T::one()).min(T::one());
    let c2 = ((d * d + r2 * r2 - r1 * r1) / (two * d * r2)).max(-T::one()).min(T::one());
    let k = ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).max(T::zero());
    r1 * r1 * c1.acos() + r2 * r2 * c2.acos() - T::lit(0.5) * k.sqrt()
}

pub fn circle_iou<T: Real>(a: &Circle<T>, b: &Circle<T>) -> T {
    // fixed argument order keeps the result bitwise symmetric
    let key = |c: &Circle<T>| [c.r, c.cx, c.cy];
    let (a, b) = if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater) { (b, a) } else { (a, b) };
    let inter = lens_area(a, b);
    let union = T::PI() * a.r * a.r + T::PI() * b.r * b.r - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub precision: f64,
    /// Zero when recall and precision are both zero.
    pub fscore: f64,
    /// `(detection index, ground-truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
}

/// Greedy matching in descending detection score; each detection takes the unmatched
/// ground truth of highest IoU at or above `iou_thresh`.
pub fn match_detections<T: Real>(
    dets: &[CircleDetection<T>],
    gts: &[GroundTruthCircle<T>],
    iou_thresh: T,
) -> DetectionMetrics {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for di in order {
        let dc = Circle::from(dets[di]);
        let mut best: Option<(T, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = circle_iou(&dc, &Circle::from(*g));
            if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            matches.push((di, gi));
        }
    }
    let tp = matches.len();
    let fp = dets.len() - tp;
    let fn_ = gts.len() - tp;
    let recall = if gts.is_empty() { 1.0 } else { tp as f64 / gts.len() as f64 };
    let precision = if dets.is_empty() { 1.0 } else { tp as f64 / dets.len() as f64 };
    let fscore = f_score(recall, precision).unwrap_or(0.0);
    DetectionMetrics { tp, fp, fn_, recall, precision, fscore, matches }
}

/// Harmonic mean of recall and precision.
pub fn f_score<T: Real>(recall: T, precision: T) -> Result<T, EvaluationError> {
    let s = recall + precision;
    if !(s > T::zero()) {
        return Err(EvaluationError::UndefinedScore);
    }
    Ok(T::lit(2.0) * recall * precision / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAccuracyStats<T: Real> {
    pub mean_m: T,
    /// Population standard deviation.
    pub std_m: T,
    pub range_m: T,
    /// Ground truth minus measured mean.
    pub offset_m: T,
    pub valid_pixels: usize,
}

pub const DEPTH_WINDOW: usize = 31;

/// Statistics over the window centered on the frame center.
pub fn depth_accuracy<T: Real>(frame: &DepthFrame<T>, gt_depth: T, window: usize) -> Result<DepthAccuracyStats<T>, EvaluationError> {
    depth_accuracy_at(frame, gt_depth, window, frame.width() / 2, frame.height() / 2)
}

pub fn depth_accuracy_at<T: Real>(
    frame: &DepthFrame<T>,
    gt_depth: T,
    window: usize,
    cx: usize,
    cy: usize,
) -> Result<DepthAccuracyStats<T>, EvaluationError> {
    let half = window / 2;
    if window % 2 == 0 || cx < half || cy < half || cx + half >= frame.width() || cy + half >= frame.height() {
        return Err(EvaluationError::InvalidWindow { window, cx, cy });
    }
    let mut raws = Vec::with_capacity(window * window);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            let v = frame.raw(x, y);
            if v != 0 {
                raws.push(v);
            }
        }
    }
    if raws.is_empty() {
        return Err(EvaluationError::NoValidPixels);
    }
    let scale = frame.depth_scale();
    let n = T::from_usize_lossy(raws.len());
    let sum: u64 = raws.iter().map(|&v| v as u64).sum();
    let mean_raw = T::lit(sum as f64) / n;
    let var_raw = raws.iter().map(|&v| (T::lit(v as f64) - mean_raw).powi(2)).sum::<T>() / n;
    let (lo, hi) = (*raws.iter().min().unwrap(), *raws.iter().max().unwrap());
    let mean_m = mean_raw * scale;
    Ok(DepthAccuracyStats {
        mean_m,
        std_m: var_raw.sqrt() * scale,
        range_m: T::lit((hi - lo) as f64) * scale,
        offset_m: gt_depth - mean_m,
        valid_pixels: raws.len(),
    })
}
