//! Pixel grids, grayscale conversion, Otsu thresholding and binary morphology.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel buffer has {got} entries, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("image is constant: histogram has a single occupied bin")]
    ConstantImage,
    #[error("non-finite intensity at pixel {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

fn check_shape(width: usize, height: usize, len: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyImage { width, height });
    }
    if len != width * height {
        return Err(ImageError::BufferSize { expected: width * height, got: len });
    }
    Ok(())
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self, ImageError> {
        check_shape(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.data[y * self.width + x] = rgb;
    }
}

/// Real-valued intensity image in [0, 255], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray<T: Real> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ImageGray<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self, ImageError> {
        check_shape(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self, ImageError> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Maps every intensity `v` to `255 - v`.
    pub fn inverted(&self) -> Self {
        let full = T::lit(255.0);
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| full - v).collect(),
        }
    }

    pub fn is_constant(&self) -> bool {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first)
    }
}

/// Per-pixel foreground indicator (`true` = foreground).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, ImageError> {
        check_shape(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self, ImageError> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Signed lookup; out-of-bounds pixels read as background.
    pub fn get_or_false(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            false
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Fraction of pixels on which the two masks agree.
    pub fn agreement(&self, other: &Self) -> f64 {
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| a == b).count();
        same as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShape {
    Ellipse,
    Rect,
}

/// Flat structuring element given as pixel offsets around an anchor at `(w/2, h/2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    pub shape: KernelShape,
    pub size: (usize, usize),
    pub offsets: Vec<(i64, i64)>,
}

impl StructuringElement {
    /// Ellipse inscribed in a `w x h` box; a pixel belongs when its center lies inside.
    pub fn ellipse(w: usize, h: usize) -> Self {
        let (ax, ay) = ((w / 2) as i64, (h / 2) as i64);
        let (a, b) = (w as f64 / 2.0, h as f64 / 2.0);
        let mut offsets = Vec::new();
        for j in 0..h {
            for i in 0..w {
                let dx = (i as f64 + 0.5 - a) / a;
                let dy = (j as f64 + 0.5 - b) / b;
                if dx * dx + dy * dy <= 1.0 {
                    offsets.push((i as i64 - ax, j as i64 - ay));
                }
            }
        }
        if offsets.is_empty() {
            offsets.push((0, 0));
        }
        Self { shape: KernelShape::Ellipse, size: (w, h), offsets }
    }

    pub fn rect(w: usize, h: usize) -> Self {
        let (ax, ay) = ((w / 2) as i64, (h / 2) as i64);
        let offsets = (0..h as i64)
            .flat_map(|j| (0..w as i64).map(move |i| (i - ax, j - ay)))
            .collect::<Vec<_>>();
        let offsets = if offsets.is_empty() { vec![(0, 0)] } else { offsets };
        Self { shape: KernelShape::Rect, size: (w, h), offsets }
    }

    pub fn new(shape: KernelShape, w: usize, h: usize) -> Self {
        match shape {
            KernelShape::Ellipse => Self::ellipse(w, h),
            KernelShape::Rect => Self::rect(w, h),
        }
    }
}

/// ITU-R BT.601 luma.
pub fn to_grayscale<T: Real>(img: &ImageRgb) -> ImageGray<T> {
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let data = img
        .data
        .iter()
        .map(|&[r, g, b]| {
            let v = wr * T::lit(r as f64) + wg * T::lit(g as f64) + wb * T::lit(b as f64);
            v.max(T::zero()).min(T::lit(255.0))
        })
        .collect();
    ImageGray { width: img.width, height: img.height, data }
}

fn histogram_bin<T: Real>(v: T) -> usize {
    let c = v.max(T::zero()).min(T::lit(255.0));
    c.round().to_usize().unwrap_or(0).min(255)
}

/// Otsu's threshold over 256 bins.
///
/// Intensities are binned by rounding. The returned threshold `t` is the bin that
/// maximizes the between-class variance (lowest such bin on ties); the mask holds
/// pixels whose binned intensity exceeds `t`.
pub fn otsu_threshold<T: Real>(img: &ImageGray<T>) -> Result<(BinaryMask, T), ImageError> {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[histogram_bin(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ImageError::ConstantImage);
    }
    let t = otsu_bin(&hist);
    let data = img.data.iter().map(|&v| histogram_bin(v) > t).collect();
    Ok((BinaryMask { width: img.width, height: img.height, data }, T::from_usize_lossy(t)))
}

// Between-class variance compared exactly in integers:
// sigma_b^2 * n^2 = (n*s0 - n0*s)^2 / (n0 * n1).
fn otsu_bin(hist: &[u64; 256]) -> usize {
    let n: i128 = hist.iter().map(|&c| c as i128).sum();
    let s: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();
    let mut best: Option<(i128, i128, usize)> = None;
    let (mut n0, mut s0) = (0i128, 0i128);
    for (t, &c) in hist.iter().enumerate().take(255) {
        n0 += c as i128;
        s0 += t as i128 * c as i128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = n * s0 - n0 * s;
        let num = d * d;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((bn, bd, _)) => num * bd > bn * den,
        };
        if better {
            best = Some((num, den, t));
        }
    }
    best.map(|b| b.2).unwrap_or(0)
}

/// Erosion with background padding: `x` survives iff `x + b` is foreground for every offset `b`.
pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let mut out = BinaryMask::filled(mask.width, mask.height, false).expect("valid shape");
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            let keep = se
                .offsets
                .iter()
                .all(|&(dx, dy)| mask.get_or_false(x as i64 + dx, y as i64 + dy));
            out.set(x, y, keep);
        }
    }
    out
}

/// Dilation by the reflected element, the adjoint of [`erode`]: `y` is set iff `y - b`
/// is foreground for some offset `b`.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let mut out = BinaryMask::filled(mask.width, mask.height, false).expect("valid shape");
    let (w, h) = (mask.width as i64, mask.height as i64);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            for &(dx, dy) in &se.offsets {
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                if tx >= 0 && ty >= 0 && tx < w && ty < h {
                    out.set(tx as usize, ty as usize, true);
                }
            }
        }
    }
    out
}

pub fn morphological_open(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}
