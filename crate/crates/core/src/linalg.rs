//! Small fixed-size vector and matrix kernels used by localization and registration.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// 3D point or vector in meters, camera frame unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
pub struct Point3<T: Real> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> From<[T; 3]> for Point3<T> {
    fn from(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T: Real> From<Point3<T>> for [T; 3] {
    fn from(p: Point3<T>) -> Self {
        [p.x, p.y, p.z]
    }
}

impl<T: Real> Point3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector, or `None` for a zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(*self / n)
        } else {
            None
        }
    }

    pub fn distance(&self, o: &Self) -> T {
        (*self - *o).norm()
    }

    pub fn distance_squared(&self, o: &Self) -> T {
        (*self - *o).norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn cast<U: Real>(self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }

    pub fn centroid(points: &[Self]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let sum = points.iter().fold(Self::zero(), |acc, p| acc + *p);
        Some(sum / T::from_usize_lossy(points.len()))
    }
}

impl<T: Real> Index<usize> for Point3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Point3 index {i} out of range"),
        }
    }
}

impl<T: Real> Add for Point3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Point3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Point3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Point3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Point3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Div<T> for Point3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3<T: Real> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn zeros() -> Self {
        Self { m: [[T::zero(); 3]; 3] }
    }

    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn from_cols(c0: Point3<T>, c1: Point3<T>, c2: Point3<T>) -> Self {
        Self {
            m: [[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]],
        }
    }

    pub fn col(&self, j: usize) -> Point3<T> {
        Point3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut r = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        r
    }

    pub fn mul_vec(&self, v: &Point3<T>) -> Point3<T> {
        Point3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn frobenius_distance(&self, o: &Self) -> T {
        let mut s = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.m[i][j] - o.m[i][j];
                s = s + d * d;
            }
        }
        s.sqrt()
    }

    /// Skew-symmetric cross-product matrix `[v]x`.
    pub fn skew(v: &Point3<T>) -> Self {
        let z = T::zero();
        Self {
            m: [[z, -v.z, v.y], [v.z, z, -v.x], [-v.y, v.x, z]],
        }
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Point3<T>, angle: T) -> Self {
        let Some(a) = axis.normalized() else {
            return Self::identity();
        };
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        Self {
            m: [
                [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
                [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
                [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
            ],
        }
    }

    /// Rotation from a rotation vector (axis scaled by angle).
    pub fn exp_so3(w: &Point3<T>) -> Self {
        let theta = w.norm();
        if theta <= T::epsilon() {
            let mut r = Self::identity();
            let k = Self::skew(w);
            for i in 0..3 {
                for j in 0..3 {
                    r.m[i][j] = r.m[i][j] + k.m[i][j];
                }
            }
            return r;
        }
        Self::from_axis_angle(w, theta)
    }

    /// Rotation angle in radians of a rotation matrix.
    pub fn rotation_angle(&self) -> T {
        let tr = self.m[0][0] + self.m[1][1] + self.m[2][2];
        let c = ((tr - T::one()) / T::lit(2.0)).max(-T::one()).min(T::one());
        c.acos()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

/// Eigen-decomposition of a symmetric `N x N` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as columns.
pub fn symmetric_eigen<T: Real, const N: usize>(a: [[T; N]; N]) -> ([T; N], [[T; N]; N]) {
    let mut a = a;
    let mut v = [[T::zero(); N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for _sweep in 0..64 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..N {
            diag = diag + a[i][i] * a[i][i];
            for j in (i + 1)..N {
                off = off + a[i][j] * a[i][j];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..N {
            for q in (p + 1)..N {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: [usize; N] = [0; N];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut vals = [T::zero(); N];
    let mut vecs = [[T::zero(); N]; N];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = a[src][src];
        for k in 0..N {
            vecs[k][dst] = v[k][src];
        }
    }
    (vals, vecs)
}

/// Singular value decomposition `a = u * diag(s) * v^T` by one-sided Jacobi.
///
/// `u` and `v` are orthogonal (determinant +-1); singular values are non-negative
/// and sorted descending.
pub fn svd3<T: Real>(a: &Mat3<T>) -> (Mat3<T>, [T; 3], Mat3<T>) {
    let mut w = *a;
    let mut v = Mat3::identity();
    let tol = T::epsilon();
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..2 {
            for q in (p + 1)..3 {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = T::zero();
                for i in 0..3 {
                    alpha = alpha + w.m[i][p] * w.m[i][p];
                    beta = beta + w.m[i][q] * w.m[i][q];
                    gamma = gamma + w.m[i][p] * w.m[i][q];
                }
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..3 {
                    let wp = w.m[i][p];
                    let wq = w.m[i][q];
                    w.m[i][p] = c * wp - s * wq;
                    w.m[i][q] = s * wp + c * wq;
                    let vp = v.m[i][p];
                    let vq = v.m[i][q];
                    v.m[i][p] = c * vp - s * vq;
                    v.m[i][q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv = [w.col(0).norm(), w.col(1).norm(), w.col(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted_sv = [sv[order[0]], sv[order[1]], sv[order[2]]];
    let mut ucols = [Point3::zero(); 3];
    let mut vcols = [Point3::zero(); 3];
    for (dst, &src) in order.iter().enumerate() {
        vcols[dst] = v.col(src);
        let c = w.col(src);
        ucols[dst] = if sv[src] > tol * sorted_sv[0].max(T::min_positive_value()) {
            c / sv[src]
        } else {
            Point3::zero()
        };
    }
    sv = sorted_sv;
    complete_orthonormal(&mut ucols);
    (
        Mat3::from_cols(ucols[0], ucols[1], ucols[2]),
        sv,
        Mat3::from_cols(vcols[0], vcols[1], vcols[2]),
    )
}

/// Replaces zero columns with vectors completing an orthonormal basis.
fn complete_orthonormal<T: Real>(cols: &mut [Point3<T>; 3]) {
    let is_zero = |p: &Point3<T>| p.norm_squared() == T::zero();
    if is_zero(&cols[0]) {
        cols[0] = Point3::new(T::one(), T::zero(), T::zero());
    }
    if is_zero(&cols[1]) {
        let a = cols[0];
        let trial = if a.x.abs() < T::lit(0.9) {
            Point3::new(T::one(), T::zero(), T::zero())
        } else {
            Point3::new(T::zero(), T::one(), T::zero())
        };
        let t = trial - a * a.dot(&trial);
        cols[1] = t.normalized().unwrap_or(trial);
    }
    if is_zero(&cols[2]) {
        cols[2] = cols[0].cross(&cols[1]);
    }
}

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when `a` is numerically singular.
pub fn solve_linear<T: Real, const N: usize>(a: [[T; N]; N], b: [T; N]) -> Option<[T; N]> {
    let mut a = a;
    let mut b = b;
    let scale = a
        .iter()
        .flatten()
        .fold(T::zero(), |m, v| m.max(v.abs()));
    if scale == T::zero() {
        return None;
    }
    let tiny = scale * T::epsilon() * T::lit(N as f64);
    for col in 0..N {
        let piv = (col..N)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() <= tiny {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..N {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..N {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = [T::zero(); N];
    for row in (0..N).rev() {
        let mut s = b[row];
        for k in (row + 1)..N {
            s = s - a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}
