//! Chan-Vese region segmentation: a level-set PDE solver and a morphological
//! (sup-inf / inf-sup) solver sharing one parameter set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{BinaryMask, ImageGray};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("shape mismatch: image {0}x{1}, field {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("image is constant or region means coincide with no regularizing term")]
    ConstantImage,
}

/// Signed implicit surface; `phi >= 0` is inside the contour.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetField<T: Real> {
    width: usize,
    height: usize,
    phi: Vec<T>,
}

impl<T: Real> LevelSetField<T> {
    pub fn new(width: usize, height: usize, phi: Vec<T>) -> Result<Self, SegmentationError> {
        if phi.len() != width * height || width == 0 || height == 0 {
            return Err(SegmentationError::InvalidParams(format!(
                "field buffer of {} values for {width}x{height}",
                phi.len()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(SegmentationError::InvalidParams("non-finite level-set value".into()));
        }
        Ok(Self { width, height, phi })
    }

    /// +1 inside the mask, -1 outside.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let phi = mask
            .data()
            .iter()
            .map(|&b| if b { T::one() } else { -T::one() })
            .collect();
        Self { width: mask.width(), height: mask.height(), phi }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.phi
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.phi[y * self.width + x]
    }

    pub fn inside(&self) -> BinaryMask {
        BinaryMask::new(self.width, self.height, self.phi.iter().map(|&v| v >= T::zero()).collect())
            .expect("field shape is valid")
    }

    // Replicated border.
    fn at(&self, x: i64, y: i64) -> T {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.phi[yc * self.width + xc]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Pde,
    Morphological,
}

/// Weights and numerics of the Chan-Vese energy, in raw 0-255 intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChanVeseParams<T: Real> {
    pub mu: T,
    pub nu: T,
    pub lambda1: T,
    pub lambda2: T,
    pub p: T,
    pub eps: T,
    pub dt: T,
    pub max_iter: usize,
    pub tol: T,
    pub backend: Backend,
}

/// `mu` value that corresponds to one smoothing pass of the morphological backend.
pub const MU_UNIT: f64 = 0.05 * 255.0 * 255.0;

impl<T: Real> Default for ChanVeseParams<T> {
    fn default() -> Self {
        Self {
            mu: T::lit(MU_UNIT),
            nu: T::zero(),
            lambda1: T::one(),
            lambda2: T::one(),
            p: T::one(),
            eps: T::one(),
            dt: T::lit(0.5),
            max_iter: 500,
            tol: T::lit(1e-4),
            backend: Backend::Pde,
        }
    }
}

impl<T: Real> ChanVeseParams<T> {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let bad = |m: &str| Err(SegmentationError::InvalidParams(m.to_string()));
        if !(self.mu >= T::zero()) {
            return bad("mu must be >= 0");
        }
        if !(self.nu >= T::zero()) {
            return bad("nu must be >= 0");
        }
        if !(self.lambda1 > T::zero() && self.lambda2 > T::zero()) {
            return bad("lambda1 and lambda2 must be > 0");
        }
        if !(self.p >= T::one()) {
            return bad("p must be >= 1");
        }
        if !(self.eps > T::zero() && self.dt > T::zero()) {
            return bad("eps and dt must be > 0");
        }
        if !(self.tol >= T::zero()) {
            return bad("tol must be >= 0");
        }
        Ok(())
    }

    /// Number of SI-IS smoothing passes per round of the morphological backend.
    pub fn smoothing_passes(&self) -> usize {
        (self.mu.as_f64() / MU_UNIT).round().max(0.0) as usize
    }
}

/// Regularized Heaviside `1/2 (1 + 2/pi atan(z/eps))`.
pub fn heaviside<T: Real>(z: T, eps: T) -> T {
    T::lit(0.5) * (T::one() + T::lit(2.0) / T::PI() * (z / eps).atan())
}

/// Derivative of [`heaviside`]: `eps / (pi (eps^2 + z^2))`.
pub fn dirac<T: Real>(z: T, eps: T) -> T {
    eps / (T::PI() * (eps * eps + z * z))
}

fn check_shapes<T: Real>(img: &ImageGray<T>, w: usize, h: usize) -> Result<(), SegmentationError> {
    if img.width() != w || img.height() != h {
        return Err(SegmentationError::ShapeMismatch(img.width(), img.height(), w, h));
    }
    Ok(())
}

fn means_by<T: Real>(img: &ImageGray<T>, inside: impl Fn(usize) -> bool) -> (T, T) {
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (T::zero(), 0usize, T::zero(), 0usize);
    for (i, &v) in img.data().iter().enumerate() {
        if inside(i) {
            s_in = s_in + v;
            n_in += 1;
        } else {
            s_out = s_out + v;
            n_out += 1;
        }
    }
    let c1 = (n_in > 0).then(|| s_in / T::from_usize_lossy(n_in));
    let c2 = (n_out > 0).then(|| s_out / T::from_usize_lossy(n_out));
    match (c1, c2) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, a),
        (None, Some(b)) => (b, b),
        (None, None) => unreachable!("images are non-empty"),
    }
}

/// Mean intensity inside (`phi >= 0`) and outside; an empty region takes the other's mean.
pub fn region_means<T: Real>(img: &ImageGray<T>, phi: &LevelSetField<T>) -> Result<(T, T), SegmentationError> {
    check_shapes(img, phi.width, phi.height)?;
    Ok(means_by(img, |i| phi.phi[i] >= T::zero()))
}

fn grad_norm<T: Real>(phi: &LevelSetField<T>, x: usize, y: usize) -> T {
    let (xi, yi) = (x as i64, y as i64);
    let two = T::lit(2.0);
    let gx = (phi.at(xi + 1, yi) - phi.at(xi - 1, yi)) / two;
    let gy = (phi.at(xi, yi + 1) - phi.at(xi, yi - 1)) / two;
    (gx * gx + gy * gy).sqrt()
}

/// `div(grad phi / |grad phi|)` with one-sided differences across each cell face.
fn curvature<T: Real>(phi: &LevelSetField<T>, x: usize, y: usize) -> T {
    let eta = T::lit(1e-8);
    let half = T::lit(0.5);
    let (xi, yi) = (x as i64, y as i64);
    let c = phi.at(xi, yi);
    let (xp, xn) = (phi.at(xi + 1, yi), phi.at(xi - 1, yi));
    let (yp, yn) = (phi.at(xi, yi + 1), phi.at(xi, yi - 1));
    let phix0 = (xp - xn) * half;
    let phiy0 = (yp - yn) * half;
    let face = |d: T, t: T| d / (eta + d * d + t * t).sqrt();
    face(xp - c, phiy0) - face(c - xn, phiy0) + face(yp - c, phix0) - face(c - yn, phix0)
}

fn length_term<T: Real>(phi: &LevelSetField<T>, eps: T) -> T {
    let mut l = T::zero();
    for y in 0..phi.height {
        for x in 0..phi.width {
            l = l + dirac(phi.get(x, y), eps) * grad_norm(phi, x, y);
        }
    }
    l
}

/// Discrete Chan-Vese energy.
///
/// Length uses the regularized Dirac and central-difference gradient magnitude; the area
/// term uses the regularized Heaviside; the two fitting terms use the sharp partition
/// `phi >= 0` with the region means.
pub fn chan_vese_energy<T: Real>(
    img: &ImageGray<T>,
    phi: &LevelSetField<T>,
    params: &ChanVeseParams<T>,
) -> Result<T, SegmentationError> {
    let (c1, c2) = region_means(img, phi)?;
    let length = length_term(phi, params.eps);
    let area: T = phi.phi.iter().map(|&v| heaviside(v, params.eps)).sum();
    let (mut fit_in, mut fit_out) = (T::zero(), T::zero());
    for (&v, &f) in img.data().iter().zip(&phi.phi) {
        if f >= T::zero() {
            fit_in = fit_in + (v - c1) * (v - c1);
        } else {
            fit_out = fit_out + (v - c2) * (v - c2);
        }
    }
    Ok(params.mu * length.powf(params.p)
        + params.nu * area
        + params.lambda1 * fit_in
        + params.lambda2 * fit_out)
}

/// Outcome of an evolution run.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<T: Real> {
    pub mask: BinaryMask,
    /// Final level set; the morphological backend reports its mask as a +-1 field.
    pub phi: LevelSetField<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Segments `img` starting from `init` and returns the final foreground `{phi >= 0}`.
pub fn chan_vese_evolve<T: Real>(
    img: &ImageGray<T>,
    init: &BinaryMask,
    params: &ChanVeseParams<T>,
) -> Result<BinaryMask, SegmentationError> {
    chan_vese_run(img, init, params).map(|s| s.mask)
}

pub fn chan_vese_run<T: Real>(
    img: &ImageGray<T>,
    init: &BinaryMask,
    params: &ChanVeseParams<T>,
) -> Result<Segmentation<T>, SegmentationError> {
    params.validate()?;
    check_shapes(img, init.width(), init.height())?;
    if img.is_constant() {
        return Err(SegmentationError::ConstantImage);
    }
    let (c1, c2) = means_by(img, |i| init.data()[i]);
    if c1 == c2 && params.mu == T::zero() && params.nu == T::zero() {
        return Err(SegmentationError::ConstantImage);
    }
    Ok(match params.backend {
        Backend::Pde => evolve_pde(img, init, params),
        Backend::Morphological => evolve_morphological(img, init, params),
    })
}

fn sign_changes<T: Real>(a: &[T], b: &[T]) -> usize {
    a.iter()
        .zip(b)
        .filter(|(&x, &y)| (x >= T::zero()) != (y >= T::zero()))
        .count()
}

// Explicit Jacobi sweep of the Chan-Vese gradient flow; every update reads the
// previous iterate only.
fn evolve_pde<T: Real>(img: &ImageGray<T>, init: &BinaryMask, params: &ChanVeseParams<T>) -> Segmentation<T> {
    let mut phi = LevelSetField::<T>::from_mask(init);
    let (w, h) = (phi.width, phi.height);
    let n = T::from_usize_lossy(w * h);
    let mut next = phi.phi.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let (c1, c2) = means_by(img, |i| phi.phi[i] >= T::zero());
        let mu_eff = if params.p == T::one() {
            params.mu
        } else {
            params.mu * params.p * length_term(&phi, params.eps).powf(params.p - T::one())
        };
        for y in 0..h {
            for x in 0..w {
                let v = img.get(x, y);
                let force = -params.nu - params.lambda1 * (v - c1) * (v - c1)
                    + params.lambda2 * (v - c2) * (v - c2);
                let c = phi.get(x, y);
                let step = params.dt * dirac(c, params.eps) * (mu_eff * curvature(&phi, x, y) + force);
                next[y * w + x] = c + step;
            }
        }
        let changed = sign_changes(&phi.phi, &next);
        std::mem::swap(&mut phi.phi, &mut next);
        if T::from_usize_lossy(changed) / n < params.tol || changed == 0 {
            converged = true;
            break;
        }
    }
    Segmentation { mask: phi.inside(), phi, iterations, converged }
}

// Line elements of the curvature operators: diagonal, vertical, horizontal, anti-diagonal.
const LINES: [(i64, i64); 4] = [(1, 1), (0, 1), (1, 0), (1, -1)];

fn sup_inf(u: &BinaryMask) -> BinaryMask {
    let mut out = u.clone();
    for y in 0..u.height() {
        for x in 0..u.width() {
            let (xi, yi) = (x as i64, y as i64);
            let v = u.get(x, y)
                && LINES.iter().any(|&(dx, dy)| {
                    u.get_or_false(xi + dx, yi + dy) && u.get_or_false(xi - dx, yi - dy)
                });
            out.set(x, y, v);
        }
    }
    out
}

fn inf_sup(u: &BinaryMask) -> BinaryMask {
    let mut out = u.clone();
    for y in 0..u.height() {
        for x in 0..u.width() {
            let (xi, yi) = (x as i64, y as i64);
            let v = u.get(x, y)
                || LINES.iter().all(|&(dx, dy)| {
                    u.get_or_false(xi + dx, yi + dy) || u.get_or_false(xi - dx, yi - dy)
                });
            out.set(x, y, v);
        }
    }
    out
}

/// One curvature-smoothing pass `SI(IS(u))`.
pub fn si_is(u: &BinaryMask) -> BinaryMask {
    sup_inf(&inf_sup(u))
}

fn evolve_morphological<T: Real>(
    img: &ImageGray<T>,
    init: &BinaryMask,
    params: &ChanVeseParams<T>,
) -> Segmentation<T> {
    let (w, h) = (init.width(), init.height());
    let mut u = init.clone();
    let passes = params.smoothing_passes();
    let n = (w * h) as f64;
    let mut iterations = 0;
    let mut converged = false;
    let val = |m: &BinaryMask, x: usize, y: usize| -> f64 { if m.get(x, y) { 1.0 } else { 0.0 } };
    while iterations < params.max_iter {
        iterations += 1;
        let prev = u.clone();
        let (c1, c2) = means_by(img, |i| prev.data()[i]);
        let mut next = prev.clone();
        for y in 0..h {
            for x in 0..w {
                let gx = if w == 1 {
                    0.0
                } else if x == 0 {
                    val(&prev, 1, y) - val(&prev, 0, y)
                } else if x == w - 1 {
                    val(&prev, x, y) - val(&prev, x - 1, y)
                } else {
                    (val(&prev, x + 1, y) - val(&prev, x - 1, y)) / 2.0
                };
                let gy = if h == 1 {
                    0.0
                } else if y == 0 {
                    val(&prev, x, 1) - val(&prev, x, 0)
                } else if y == h - 1 {
                    val(&prev, x, y) - val(&prev, x, y - 1)
                } else {
                    (val(&prev, x, y + 1) - val(&prev, x, y - 1)) / 2.0
                };
                let grad = gx.abs() + gy.abs();
                if grad == 0.0 {
                    continue;
                }
                let v = img.get(x, y);
                let aux = params.lambda1 * (v - c1) * (v - c1) - params.lambda2 * (v - c2) * (v - c2);
                if aux < T::zero() {
                    next.set(x, y, true);
                } else if aux > T::zero() {
                    next.set(x, y, false);
                }
            }
        }
        for _ in 0..passes {
            next = si_is(&next);
        }
        let changed = next.data().iter().zip(prev.data()).filter(|(a, b)| a != b).count();
        u = next;
        if changed == 0 || (changed as f64) / n < params.tol.as_f64() {
            converged = true;
            break;
        }
    }
    Segmentation { phi: LevelSetField::from_mask(&u), mask: u, iterations, converged }
}
