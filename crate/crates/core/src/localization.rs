//! Pixel detections to camera-frame 3D positions, sensor distance and metric diameter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::CircleDetection;
use crate::linalg::Point3;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("no valid depth within radius {radius} of ({x}, {y})")]
    MissingDepth { x: f64, y: f64, radius: f64 },
    #[error("pixel ({0}, {1}) lies outside the frame")]
    OutsideFrame(f64, f64),
    #[error("invalid circle radius {0}")]
    InvalidCircle(f64),
    #[error("depth buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("frame is {frame:?}, intrinsics are {intrinsics:?}")]
    ShapeMismatch { frame: (usize, usize), intrinsics: (usize, usize) },
}

/// 16-bit depth grid; raw 0 marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame<T: Real> {
    width: usize,
    height: usize,
    data: Vec<u16>,
    depth_scale: T,
}

impl<T: Real> DepthFrame<T> {
    pub const DEFAULT_SCALE: f64 = 0.001;

    pub fn new(width: usize, height: usize, data: Vec<u16>, depth_scale: T) -> Result<Self, LocalizationError> {
        if data.len() != width * height {
            return Err(LocalizationError::BufferSize { expected: width * height, got: data.len() });
        }
        if !(depth_scale > T::zero() && depth_scale.is_finite()) {
            return Err(LocalizationError::NonPositiveDepth(depth_scale.as_f64()));
        }
        Ok(Self { width, height, data, depth_scale })
    }

    pub fn filled(width: usize, height: usize, raw: u16, depth_scale: T) -> Result<Self, LocalizationError> {
        Self::new(width, height, vec![raw; width * height], depth_scale)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn depth_scale(&self) -> T {
        self.depth_scale
    }

    pub fn raw(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set_raw(&mut self, x: usize, y: usize, v: u16) {
        self.data[y * self.width + x] = v;
    }

    /// Depth in meters, `None` when missing.
    pub fn depth(&self, x: usize, y: usize) -> Option<T> {
        match self.raw(x, y) {
            0 => None,
            v => Some(T::lit(v as f64) * self.depth_scale),
        }
    }

    /// Nearest raw value for a metric depth; 0 for non-positive or non-finite input.
    pub fn quantize(&self, meters: T) -> u16 {
        if !(meters > T::zero()) || !meters.is_finite() {
            return 0;
        }
        (meters / self.depth_scale).round().to_f64().map(|v| v.min(u16::MAX as f64) as u16).unwrap_or(0)
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T: Real> {
    pub width: usize,
    pub height: usize,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(width: usize, height: usize, fx: T, fy: T, cx: T, cy: T) -> Result<Self, LocalizationError> {
        let k = Self { width, height, fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), LocalizationError> {
        if !(self.fx > T::zero() && self.fy > T::zero() && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(LocalizationError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        let inside = |c: T, n: usize| c >= T::zero() && c <= T::lit(n as f64);
        if !(inside(self.cx, self.width) && inside(self.cy, self.height)) {
            return Err(LocalizationError::InvalidIntrinsics("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn check_frame(&self, frame: &DepthFrame<T>) -> Result<(), LocalizationError> {
        if (frame.width, frame.height) != (self.width, self.height) {
            return Err(LocalizationError::ShapeMismatch {
                frame: (frame.width, frame.height),
                intrinsics: (self.width, self.height),
            });
        }
        Ok(())
    }
}

impl<T: Real> Default for CameraIntrinsics<T> {
    fn default() -> Self {
        Self { width: 640, height: 480, fx: T::lit(600.0), fy: T::lit(600.0), cx: T::lit(320.0), cy: T::lit(240.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct MushroomLocation<T: Real> {
    pub circle: CircleDetection<T>,
    pub position: Point3<T>,
    pub distance_m: T,
    pub diameter_m: T,
    pub fill_used: bool,
}

pub fn deproject<T: Real>(u: T, v: T, z: T, k: &CameraIntrinsics<T>) -> Result<Point3<T>, LocalizationError> {
    if !(z > T::zero()) || !z.is_finite() {
        return Err(LocalizationError::NonPositiveDepth(z.as_f64()));
    }
    Ok(Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z))
}

/// Forward pinhole projection; `None` for points at or behind the camera plane.
pub fn project<T: Real>(p: &Point3<T>, k: &CameraIntrinsics<T>) -> Option<(T, T)> {
    if !(p.z > T::zero()) {
        return None;
    }
    Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

pub fn sensor_distance<T: Real>(p: &Point3<T>) -> T {
    p.norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledDepth<T: Real> {
    pub z: T,
    pub fill_used: bool,
    /// Pixels whose depths were averaged; the rounded center alone when no fill was needed.
    pub source_pixels: Vec<(usize, usize)>,
}

/// Pixel offsets with `round(|d|) == ring`.
fn ring_offsets(ring: i64) -> impl Iterator<Item = (i64, i64)> {
    let lo = (2 * ring - 1) * (2 * ring - 1);
    let hi = (2 * ring + 1) * (2 * ring + 1);
    (-ring - 1..=ring + 1)
        .flat_map(move |dy| (-ring - 1..=ring + 1).map(move |dx| (dx, dy)))
        .filter(move |&(dx, dy)| {
            let d4 = 4 * (dx * dx + dy * dy);
            d4 >= lo && d4 < hi
        })
}

pub fn depth_with_fill<T: Real>(frame: &DepthFrame<T>, cx: T, cy: T, r: T) -> Result<FilledDepth<T>, LocalizationError> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(LocalizationError::InvalidCircle(r.as_f64()));
    }
    let (ux, uy) = (cx.round().to_i64().unwrap_or(-1), cy.round().to_i64().unwrap_or(-1));
    if !cx.is_finite() || !cy.is_finite() || !frame.contains(ux, uy) {
        return Err(LocalizationError::OutsideFrame(cx.as_f64(), cy.as_f64()));
    }
    let (ux, uy) = (ux as usize, uy as usize);
    if let Some(z) = frame.depth(ux, uy) {
        return Ok(FilledDepth { z, fill_used: false, source_pixels: vec![(ux, uy)] });
    }
    let max_ring = r.floor().to_i64().unwrap_or(0);
    for ring in 1..=max_ring {
        let mut sum = 0u64;
        let mut pixels = Vec::new();
        for (dx, dy) in ring_offsets(ring) {
            let (x, y) = (ux as i64 + dx, uy as i64 + dy);
            if !frame.contains(x, y) {
                continue;
            }
            let v = frame.raw(x as usize, y as usize);
            if v != 0 {
                sum += v as u64;
                pixels.push((x as usize, y as usize));
            }
        }
        if !pixels.is_empty() {
            let z = T::lit(sum as f64) / T::lit(pixels.len() as f64) * frame.depth_scale;
            return Ok(FilledDepth { z, fill_used: true, source_pixels: pixels });
        }
    }
    Err(LocalizationError::MissingDepth { x: cx.as_f64(), y: cy.as_f64(), radius: r.as_f64() })
}

/// Which axes contributed to a diameter estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterAxes {
    Both,
    RowOnly,
    ColumnOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiameterEstimate<T: Real> {
    pub diameter_m: T,
    pub axes: DiameterAxes,
}

fn endpoint<T: Real>(frame: &DepthFrame<T>, k: &CameraIntrinsics<T>, u: T, v: T, r: T) -> Result<Point3<T>, LocalizationError> {
    let fill = depth_with_fill(frame, u, v, r)?;
    deproject(u, v, fill.z, k)
}

fn axis_length<T: Real>(
    frame: &DepthFrame<T>,
    k: &CameraIntrinsics<T>,
    a: (T, T),
    b: (T, T),
    r: T,
) -> Result<T, LocalizationError> {
    let pa = endpoint(frame, k, a.0, a.1, r)?;
    let pb = endpoint(frame, k, b.0, b.1, r)?;
    Ok(pa.distance(&pb))
}

/// Mean of the row and column chord lengths between deprojected circle endpoints.
pub fn estimate_diameter<T: Real>(
    frame: &DepthFrame<T>,
    det: &CircleDetection<T>,
    k: &CameraIntrinsics<T>,
) -> Result<DiameterEstimate<T>, LocalizationError> {
    let r = det.r;
    if !(r > T::zero()) || !r.is_finite() {
        return Err(LocalizationError::InvalidCircle(r.as_f64()));
    }
    let row = axis_length(frame, k, (det.cx - r, det.cy), (det.cx + r, det.cy), r);
    let col = axis_length(frame, k, (det.cx, det.cy - r), (det.cx, det.cy + r), r);
    match (row, col) {
        (Ok(a), Ok(b)) => Ok(DiameterEstimate { diameter_m: (a + b) / T::lit(2.0), axes: DiameterAxes::Both }),
        (Ok(a), Err(_)) => Ok(DiameterEstimate { diameter_m: a, axes: DiameterAxes::RowOnly }),
        (Err(_), Ok(b)) => Ok(DiameterEstimate { diameter_m: b, axes: DiameterAxes::ColumnOnly }),
        (Err(e), Err(_)) => Err(e),
    }
}

/// A detection that could not be localized.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReject<T: Real> {
    pub index: usize,
    pub circle: CircleDetection<T>,
    pub error: LocalizationError,
}

pub fn localize_one<T: Real>(
    det: &CircleDetection<T>,
    frame: &DepthFrame<T>,
    k: &CameraIntrinsics<T>,
) -> Result<MushroomLocation<T>, LocalizationError> {
    let fill = depth_with_fill(frame, det.cx, det.cy, det.r)?;
    let position = if fill.fill_used {
        let pts = fill
            .source_pixels
            .iter()
            .map(|&(x, y)| {
                let z = frame.depth(x, y).expect("source pixels carry depth");
                deproject(T::lit(x as f64), T::lit(y as f64), z, k)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Point3::centroid(&pts).expect("non-empty source set")
    } else {
        deproject(det.cx, det.cy, fill.z, k)?
    };
    let diameter = estimate_diameter(frame, det, k)?;
    if !(diameter.diameter_m > T::zero()) {
        return Err(LocalizationError::InvalidCircle(det.r.as_f64()));
    }
    Ok(MushroomLocation {
        circle: *det,
        position,
        distance_m: sensor_distance(&position),
        diameter_m: diameter.diameter_m,
        fill_used: fill.fill_used,
    })
}

/// Localizes every detection; failures are returned separately, input order is kept.
pub fn localize<T: Real>(
    dets: &[CircleDetection<T>],
    frame: &DepthFrame<T>,
    k: &CameraIntrinsics<T>,
) -> (Vec<MushroomLocation<T>>, Vec<LocalizationReject<T>>) {
    let results: Vec<_> = dets.par_iter().map(|d| localize_one(d, frame, k)).collect();
    let mut located = Vec::new();
    let mut rejected = Vec::new();
    for (index, (det, res)) in dets.iter().zip(results).enumerate() {
        match res {
            Ok(loc) => located.push(loc),
            Err(error) => rejected.push(LocalizationReject { index, circle: *det, error }),
        }
    }
    (located, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::default()
    }

    fn det(cx: f64, cy: f64, r: f64) -> CircleDetection<f64> {
        CircleDetection { cx, cy, r, score: 1.0 }
    }

    #[test]
    fn deproject_examples() {
        let k = k();
        assert_eq!(deproject(k.cx, k.cy, 0.5, &k).unwrap(), Point3::new(0.0, 0.0, 0.5));
        assert_eq!(deproject(k.cx + k.fx, k.cy, 1.0, &k).unwrap(), Point3::new(1.0, 0.0, 1.0));
        assert!(matches!(deproject(1.0, 1.0, 0.0, &k), Err(LocalizationError::NonPositiveDepth(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (u, v, z) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), rng.random_range(0.1..3.0));
            let (pu, pv) = project(&deproject(u, v, z, &k).unwrap(), &k).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }

    #[test]
    fn fill_examples() {
        let mut f = DepthFrame::<f64>::filled(20, 20, 0, 0.001).unwrap();
        f.set_raw(10, 10, 512);
        let d = depth_with_fill(&f, 10.2, 9.8, 5.0).unwrap();
        assert!((d.z - 0.512).abs() < 1e-12 && !d.fill_used);

        let mut f = DepthFrame::<f64>::filled(20, 20, 0, 0.001).unwrap();
        f.set_raw(12, 10, 500);
        f.set_raw(10, 8, 510);
        f.set_raw(14, 10, 900);
        let d = depth_with_fill(&f, 10.0, 10.0, 5.0).unwrap();
        assert!((d.z - 0.505).abs() < 1e-12 && d.fill_used);
        let mut src = d.source_pixels.clone();
        src.sort();
        assert_eq!(src, vec![(10, 8), (12, 10)]);

        let f = DepthFrame::<f64>::filled(20, 20, 0, 0.001).unwrap();
        assert!(matches!(depth_with_fill(&f, 10.0, 10.0, 5.0), Err(LocalizationError::MissingDepth { .. })));
        assert!(matches!(depth_with_fill(&f, 30.0, 10.0, 5.0), Err(LocalizationError::OutsideFrame(..))));
    }

    /// Exhaustive scan: nearest rounded distance with any valid pixel.
    fn fill_oracle(f: &DepthFrame<f64>, cx: usize, cy: usize, r: f64) -> Option<(f64, bool)> {
        if let Some(z) = f.depth(cx, cy) {
            return Some((z, false));
        }
        let mut best: Option<(i64, Vec<f64>)> = None;
        for y in 0..f.height() {
            for x in 0..f.width() {
                let d = ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)).sqrt().round() as i64;
                if d < 1 || d as f64 > r.floor() {
                    continue;
                }
                if let Some(z) = f.depth(x, y) {
                    match &mut best {
                        Some((bd, zs)) if *bd == d => zs.push(z),
                        Some((bd, _)) if *bd < d => {}
                        _ => best = Some((d, vec![z])),
                    }
                }
            }
        }
        best.map(|(_, zs)| (zs.iter().sum::<f64>() / zs.len() as f64, true))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fill_matches_oracle_and_is_bounded(
            seed in any::<u64>(),
            density in 0.0f64..0.3,
            r in 1.0f64..9.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u16> = (0..15 * 15)
                .map(|_| if rng.random_bool(density) { rng.random_range(300..1500) } else { 0 })
                .collect();
            let f = DepthFrame::new(15, 15, data, 0.001).unwrap();
            let got = depth_with_fill(&f, 7.0, 7.0, r);
            match fill_oracle(&f, 7, 7, r) {
                None => prop_assert!(got.is_err()),
                Some((z, used)) => {
                    let g = got.unwrap();
                    prop_assert!((g.z - z).abs() < 1e-12);
                    prop_assert_eq!(g.fill_used, used);
                    let zs: Vec<f64> = g.source_pixels.iter().map(|&(x, y)| f.depth(x, y).unwrap()).collect();
                    let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(g.z >= lo - 1e-12 && g.z <= hi + 1e-12);
                    let again = depth_with_fill(&f, 7.0, 7.0, r).unwrap();
                    prop_assert_eq!(again, g);
                }
            }
        }

        #[test]
        fn distance_dominates_depth(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.01f64..3.0) {
            let p = Point3::new(x, y, z);
            let d = sensor_distance(&p);
            prop_assert!((d - (x * x + y * y + z * z).sqrt()).abs() < 1e-12);
            prop_assert!(d >= z);
            if x == 0.0 && y == 0.0 {
                prop_assert_eq!(d, z);
            } else {
                prop_assert!(d > z);
            }
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(sensor_distance(&Point3::new(0.0, 0.0, 0.5)), 0.5);
        assert!((sensor_distance(&Point3::<f64>::new(0.03, 0.04, 0.12)) - 0.13).abs() < 1e-15);
    }

    #[test]
    fn flat_diameter_matches_pinhole() {
        let f = DepthFrame::<f64>::filled(640, 480, 400, 0.001).unwrap();
        let k = k();
        let d = estimate_diameter(&f, &det(300.3, 250.6, 30.0), &k).unwrap();
        assert_eq!(d.axes, DiameterAxes::Both);
        assert!((d.diameter_m - 2.0 * 30.0 * 0.4 / 600.0).abs() < 1e-12);
    }

    #[test]
    fn diameter_axis_fallback() {
        let mut f = DepthFrame::<f64>::filled(100, 100, 400, 0.001).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                let near = |ex: i64| (x as i64 - ex).pow(2) + (y as i64 - 50).pow(2) <= 21 * 21;
                let row_end = near(30) || near(70);
                if row_end {
                    f.set_raw(x, y, 0);
                }
            }
        }
        let k = CameraIntrinsics::new(100, 100, 600.0, 600.0, 50.0, 50.0).unwrap();
        let d = estimate_diameter(&f, &det(50.0, 50.0, 20.0), &k).unwrap();
        assert_eq!(d.axes, DiameterAxes::ColumnOnly);
        assert!((d.diameter_m - 40.0 * 0.4 / 600.0).abs() < 1e-12);
        assert!(matches!(
            estimate_diameter(&f, &det(50.0, 50.0, 0.0), &k),
            Err(LocalizationError::InvalidCircle(_))
        ));
    }

    #[test]
    fn localize_examples() {
        let k = k();
        let f = DepthFrame::<f64>::filled(640, 480, 500, 0.001).unwrap();
        let (loc, rej) = localize(&[det(320.0, 240.0, 20.0)], &f, &k);
        assert!(rej.is_empty());
        assert_eq!(loc[0].position, Point3::new(0.0, 0.0, 0.5));
        assert_eq!(loc[0].distance_m, 0.5);
        assert!(!loc[0].fill_used);
    }

    #[test]
    fn localize_batch_with_occluded_cap() {
        let k = k();
        let mut f = DepthFrame::<f64>::filled(640, 480, 450, 0.001).unwrap();
        let dets: Vec<_> = (0..5).map(|i| det(100.0 + 100.0 * i as f64, 240.0, 20.0)).collect();
        for y in 200..281 {
            for x in 260..341 {
                f.set_raw(x, y, 0);
            }
        }
        f.set_raw(100, 240, 0);
        let (loc, rej) = localize(&dets, &f, &k);
        assert_eq!(loc.len(), 4);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].index, 2);
        assert!(matches!(rej[0].error, LocalizationError::MissingDepth { .. }));
        assert!(loc[0].fill_used && !loc[1].fill_used);
        for l in &loc {
            assert!((l.distance_m - l.position.norm()).abs() < 1e-9);
            assert!(l.diameter_m > 0.0);
        }
        let ring_mean = Point3::centroid(
            &ring_offsets(1)
                .map(|(dx, dy)| deproject(100.0 + dx as f64, 240.0 + dy as f64, 0.45, &k).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(loc[0].position.distance(&ring_mean) < 1e-12);
    }
}
