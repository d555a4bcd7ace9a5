//! Phase-coded circular Hough transform on binary blob masks.
//!
//! Every boundary pixel votes on a one-pixel-wide annulus for each integer radius in
//! the search range. A vote for radius `r` carries weight `1/|A_r|`, where `A_r` is the
//! discrete annulus (`|A_r| ~ 2 pi r`), so a complete rasterized circle sums to magnitude
//! 1 at its center regardless of size. The phase is
//! `2 pi ln(r / r_min) / ln(r_max / r_min)`, so the phase of a peak encodes the radius.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::BinaryMask;
use crate::linalg::solve_linear;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("invalid radius range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("accumulator value has zero magnitude")]
    ZeroMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusRange<T: Real> {
    pub r_min: T,
    pub r_max: T,
}

impl<T: Real> RadiusRange<T> {
    pub fn new(r_min: T, r_max: T) -> Result<Self, DetectionError> {
        if !(r_min > T::zero() && r_min < r_max && r_max.is_finite()) {
            return Err(DetectionError::InvalidRange(r_min.as_f64(), r_max.as_f64()));
        }
        Ok(Self { r_min, r_max })
    }

    /// Integer radii that receive votes.
    pub fn radii(&self) -> impl Iterator<Item = i64> {
        let lo = self.r_min.ceil().to_i64().unwrap_or(1).max(1);
        let hi = self.r_max.floor().to_i64().unwrap_or(0);
        lo..=hi
    }

    pub fn contains(&self, r: T) -> bool {
        r >= self.r_min && r <= self.r_max
    }

    fn log_span(&self) -> T {
        (self.r_max / self.r_min).ln()
    }

    /// Phase assigned to votes at radius `r`.
    pub fn phase(&self, r: T) -> T {
        T::TAU() * (r.ln() - self.r_min.ln()) / self.log_span()
    }
}

impl<T: Real> Default for RadiusRange<T> {
    fn default() -> Self {
        Self { r_min: T::lit(8.0), r_max: T::lit(38.0) }
    }
}

/// Complex vote sums, one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAccumulator<T: Real> {
    width: usize,
    height: usize,
    cells: Vec<Complex<T>>,
}

impl<T: Real> PhaseAccumulator<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[Complex<T>] {
        &self.cells
    }

    pub fn get(&self, x: usize, y: usize) -> Complex<T> {
        self.cells[y * self.width + x]
    }

    pub fn magnitude(&self, x: usize, y: usize) -> T {
        self.get(x, y).norm()
    }
}

/// Pixel-space circle hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleDetection<T: Real> {
    pub cx: T,
    pub cy: T,
    pub r: T,
    pub score: T,
}

/// Foreground pixels with at least one background 4-neighbor (outside counts as background).
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let edge = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dx, dy)| !mask.get_or_false(xi + dx, yi + dy));
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Offsets `(dx, dy)` whose Euclidean length rounds to `r`.
pub fn annulus_offsets(r: i64) -> Vec<(i64, i64)> {
    let lo = (2 * r - 1) * (2 * r - 1);
    let hi = (2 * r + 1) * (2 * r + 1);
    let mut out = Vec::new();
    for dy in -r - 1..=r + 1 {
        for dx in -r - 1..=r + 1 {
            let d4 = 4 * (dx * dx + dy * dy);
            if d4 >= lo && d4 < hi {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn cht_accumulate<T: Real>(
    edges: &[(usize, usize)],
    range: &RadiusRange<T>,
    width: usize,
    height: usize,
) -> PhaseAccumulator<T> {
    accumulate(edges, range, width, height, |_, _, _| true)
}

/// Cosine of the half-angle of the cone an oriented edge pixel votes into.
pub const VOTE_CONE_COS: f64 = 0.5;

/// Unit vectors from each edge pixel toward the foreground side, taken as the mean offset
/// of foreground pixels in its 5x5 window. Zero where that window is balanced.
pub fn inward_normals(mask: &BinaryMask, edges: &[(usize, usize)]) -> Vec<(f64, f64)> {
    edges
        .iter()
        .map(|&(x, y)| {
            let (mut sx, mut sy) = (0i64, 0i64);
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    if mask.get_or_false(x as i64 + dx, y as i64 + dy) {
                        sx += dx;
                        sy += dy;
                    }
                }
            }
            let n = ((sx * sx + sy * sy) as f64).sqrt();
            if n == 0.0 {
                (0.0, 0.0)
            } else {
                (sx as f64 / n, sy as f64 / n)
            }
        })
        .collect()
}

/// Like [`cht_accumulate`], but an edge pixel with a known inward normal only votes on the
/// part of each annulus within the `min_cos` cone around that normal. Votes keep the
/// full-annulus weight, so a complete circle still peaks at 1; blobs no longer vote for
/// circles lying outside themselves.
pub fn cht_accumulate_oriented<T: Real>(
    edges: &[(usize, usize)],
    normals: &[(f64, f64)],
    range: &RadiusRange<T>,
    width: usize,
    height: usize,
    min_cos: f64,
) -> PhaseAccumulator<T> {
    assert_eq!(edges.len(), normals.len(), "one normal per edge pixel");
    accumulate(edges, range, width, height, |i, dx, dy| {
        let (nx, ny) = normals[i];
        if nx == 0.0 && ny == 0.0 {
            return true;
        }
        let d = ((dx * dx + dy * dy) as f64).sqrt();
        nx * dx as f64 + ny * dy as f64 >= min_cos * d
    })
}

fn accumulate<T: Real>(
    edges: &[(usize, usize)],
    range: &RadiusRange<T>,
    width: usize,
    height: usize,
    votes_on: impl Fn(usize, i64, i64) -> bool,
) -> PhaseAccumulator<T> {
    let mut cells = vec![Complex::new(T::zero(), T::zero()); width * height];
    let mut counts = vec![0u32; width * height];
    let (w, h) = (width as i64, height as i64);
    for r in range.radii() {
        let rt = T::lit(r as f64);
        let offsets = annulus_offsets(r);
        let vote = Complex::from_polar(T::one() / T::lit(offsets.len() as f64), range.phase(rt));
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &(ex, ey)) in edges.iter().enumerate() {
            for &(dx, dy) in &offsets {
                let (x, y) = (ex as i64 + dx, ey as i64 + dy);
                if x >= 0 && y >= 0 && x < w && y < h && votes_on(i, dx, dy) {
                    counts[(y * w + x) as usize] += 1;
                }
            }
        }
        for (cell, &n) in cells.iter_mut().zip(&counts) {
            if n > 0 {
                *cell = *cell + vote * T::lit(n as f64);
            }
        }
    }
    PhaseAccumulator { width, height, cells }
}

/// Radius encoded by the phase of an accumulator value.
pub fn decode_radius<T: Real>(value: Complex<T>, range: &RadiusRange<T>) -> Result<T, DetectionError> {
    if value.norm() == T::zero() {
        return Err(DetectionError::ZeroMagnitude);
    }
    let mut phase = value.arg();
    if phase < T::zero() {
        phase = phase + T::TAU();
    }
    if phase >= T::TAU() {
        phase = phase - T::TAU();
    }
    Ok(range.r_min * (phase / T::TAU() * range.log_span()).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams<T: Real> {
    pub range: RadiusRange<T>,
    pub score_thresh: T,
    /// Minimum center separation; `None` means `r_min`.
    pub nms_dist: Option<T>,
}

impl<T: Real> Default for DetectParams<T> {
    fn default() -> Self {
        Self { range: RadiusRange::default(), score_thresh: T::lit(0.45), nms_dist: None }
    }
}

impl<T: Real> DetectParams<T> {
    pub fn nms_distance(&self) -> T {
        self.nms_dist.unwrap_or(self.range.r_min)
    }
}

fn parabola_offset<T: Real>(left: T, mid: T, right: T) -> T {
    let denom = left - T::lit(2.0) * mid + right;
    if denom >= T::zero() {
        return T::zero();
    }
    let off = T::lit(0.5) * (left - right) / denom;
    off.max(T::lit(-0.5)).min(T::lit(0.5))
}

/// Detects circles in an (already opened) binary mask, sorted by descending score.
///
/// Votes are oriented by [`inward_normals`]; unoriented full-annulus voting lets
/// neighboring blobs pull centers off by several pixels and forms ghost circles through
/// the near edges of clustered blobs.
pub fn detect_circles<T: Real>(
    mask: &BinaryMask,
    range: &RadiusRange<T>,
    score_thresh: T,
    nms_dist: T,
) -> Vec<CircleDetection<T>> {
    let edges = boundary_pixels(mask);
    if edges.is_empty() {
        return Vec::new();
    }
    let normals = inward_normals(mask, &edges);
    let acc = cht_accumulate_oriented(&edges, &normals, range, mask.width(), mask.height(), VOTE_CONE_COS);
    select_peaks(&acc, range, score_thresh, nms_dist, |x, y, cx, cy, r| refine_center(&edges, &normals, x, y, cx, cy, r))
}

/// Half-width of the band around a detected circle whose edge pixels feed the center fit.
pub const REFINE_BAND: f64 = 3.0;
/// Largest center correction the fit may apply; larger moves keep the peak center.
pub const REFINE_MAX_SHIFT: f64 = 3.0;

/// Least-squares circle fit to the oriented edge pixels supporting a detection, iterated
/// twice. The accumulator peak of a large circle is flat to within a few percent over
/// several pixels, so the fit pins the center far better than the peak position does.
/// Coordinates are taken relative to the integer peak `(px, py)`.
fn refine_center<T: Real>(
    edges: &[(usize, usize)],
    normals: &[(f64, f64)],
    px: usize,
    py: usize,
    cx: T,
    cy: T,
    r: T,
) -> (T, T) {
    let (ox, oy) = (T::lit(px as f64), T::lit(py as f64));
    let (x0, y0) = (cx - ox, cy - oy);
    let (mut ux, mut uy) = (x0, y0);
    let band = T::lit(REFINE_BAND);
    let reach = (r + band + T::one()).to_i64().unwrap_or(0);
    for _ in 0..2 {
        let mut a = [[T::zero(); 3]; 3];
        let mut b = [T::zero(); 3];
        let mut n = 0usize;
        for (&(ex, ey), &(nx, ny)) in edges.iter().zip(normals) {
            let (dxi, dyi) = (ex as i64 - px as i64, ey as i64 - py as i64);
            if dxi.abs() > reach || dyi.abs() > reach {
                continue;
            }
            let (x, y) = (T::lit(dxi as f64), T::lit(dyi as f64));
            let (vx, vy) = (ux - x, uy - y);
            let d = (vx * vx + vy * vy).sqrt();
            if (d - r).abs() > band || d == T::zero() {
                continue;
            }
            if (nx != 0.0 || ny != 0.0) && T::lit(nx) * vx + T::lit(ny) * vy < T::lit(VOTE_CONE_COS) * d {
                continue;
            }
            let row = [x, y, T::one()];
            let rhs = -(x * x + y * y);
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = a[i][j] + row[i] * row[j];
                }
                b[i] = b[i] + row[i] * rhs;
            }
            n += 1;
        }
        if n < 8 {
            return (cx, cy);
        }
        let Some(sol) = solve_linear(a, b) else {
            return (cx, cy);
        };
        (ux, uy) = (-sol[0] / T::lit(2.0), -sol[1] / T::lit(2.0));
        let (sx, sy) = (ux - x0, uy - y0);
        if !(sx * sx + sy * sy).sqrt().is_finite() || (sx * sx + sy * sy).sqrt() > T::lit(REFINE_MAX_SHIFT) {
            return (cx, cy);
        }
    }
    (ox + ux, oy + uy)
}

pub fn detect_in_accumulator<T: Real>(
    acc: &PhaseAccumulator<T>,
    range: &RadiusRange<T>,
    score_thresh: T,
    nms_dist: T,
) -> Vec<CircleDetection<T>> {
    select_peaks(acc, range, score_thresh, nms_dist, |_, _, cx, cy, _| (cx, cy))
}

/// Local maxima above threshold, greedy NMS by descending score. `center` may adjust the
/// sub-pixel center of a peak given its integer position and decoded radius.
fn select_peaks<T: Real>(
    acc: &PhaseAccumulator<T>,
    range: &RadiusRange<T>,
    score_thresh: T,
    nms_dist: T,
    center: impl Fn(usize, usize, T, T, T) -> (T, T),
) -> Vec<CircleDetection<T>> {
    let (w, h) = (acc.width, acc.height);
    let mag: Vec<T> = acc.cells.iter().map(|c| c.norm()).collect();
    let at = |x: i64, y: i64| -> T {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            T::zero()
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let m = mag[y * w + x];
            if m < score_thresh || m == T::zero() {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let is_max = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
                .filter(|&d| d != (0, 0))
                .all(|(dx, dy)| at(xi + dx, yi + dy) <= m);
            if is_max {
                peaks.push((m, y * w + x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut out: Vec<CircleDetection<T>> = Vec::new();
    for (m, idx) in peaks {
        let (x, y) = (idx % w, idx / w);
        let (xi, yi) = (x as i64, y as i64);
        let mut cx = T::lit(x as f64);
        let mut cy = T::lit(y as f64);
        if x > 0 && x + 1 < w {
            cx = cx + parabola_offset(at(xi - 1, yi), m, at(xi + 1, yi));
        }
        if y > 0 && y + 1 < h {
            cy = cy + parabola_offset(at(xi, yi - 1), m, at(xi, yi + 1));
        }
        let Ok(r) = decode_radius(acc.cells[idx], range) else {
            continue;
        };
        let r = r.max(range.r_min).min(range.r_max);
        let (cx, cy) = center(x, y, cx, cy, r);
        let cx = cx.max(T::zero()).min(T::lit((w - 1) as f64));
        let cy = cy.max(T::zero()).min(T::lit((h - 1) as f64));
        let separated = out.iter().all(|d| {
            let (dx, dy) = (d.cx - cx, d.cy - cy);
            (dx * dx + dy * dy).sqrt() >= nms_dist
        });
        if !separated {
            continue;
        }
        out.push(CircleDetection { cx, cy, r, score: m });
    }
    out
}
