//! Real even-order spherical harmonics: orthonormal basis evaluation,
//! symmetrized delta functions, and rotations.
//!
//! Coefficients are stored in band-major order: even degrees l = 0, 2, ...,
//! lmax ascending, and within each degree the order m runs from -l to +l.
//! Negative orders are the sine terms, positive orders the cosine terms, so
//! the layout is interchangeable with the usual MRtrix-style convention.
//! Band limits 6 (28 coefficients) and 8 (45 coefficients) are the working
//! sizes; anything even up to [`MAX_LMAX`] is accepted.
//!
//! Rotation is performed by evaluating the rotated function on a fixed
//! Gauss-Legendre x uniform-azimuth product grid and re-projecting onto the
//! basis. The grid is sized to integrate products of two band-limited
//! functions exactly, so rotation is numerically exact at these band limits
//! (per-degree block norms are preserved to machine precision).

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Largest supported band limit.
pub const MAX_LMAX: usize = 8;

const FOUR_PI: f64 = 4.0 * core::f64::consts::PI;

/// Number of even-degree coefficients for band limit `lmax`.
///
/// `lmax` must be even; 6 -> 28, 8 -> 45.
pub fn n_coeffs(lmax: usize) -> usize {
    (lmax / 2 + 1) * (lmax + 1)
}

/// Validates a band limit, returning it unchanged.
pub fn check_lmax(lmax: usize) -> Result<usize> {
    if lmax % 2 != 0 || lmax > MAX_LMAX {
        return Err(Error::InvalidLmax { lmax, max: MAX_LMAX });
    }
    Ok(lmax)
}

fn block_start(l: usize) -> usize {
    if l == 0 {
        0
    } else {
        (l / 2) * (l - 1)
    }
}

/// Flat index of the coefficient (l, m); `l` even, `-l <= m <= l`.
pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(l % 2 == 0 && m.unsigned_abs() as usize <= l);
    block_start(l) + (m + l as i64) as usize
}

/// Degree of the coefficient at flat index `i`.
pub fn degree_of_index(i: usize) -> usize {
    let mut l = 0usize;
    loop {
        if i < block_start(l) + 2 * l + 1 {
            return l;
        }
        l += 2;
    }
}

/// Start index and length of the degree-`l` coefficient block.
pub fn block(l: usize) -> (usize, usize) {
    (block_start(l), 2 * l + 1)
}

// ---------------------------------------------------------------------------
// Directions
// ---------------------------------------------------------------------------

/// A unit vector on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Direction {
    x: f64,
    y: f64,
    z: f64,
}

impl Direction {
    /// +z axis.
    pub const Z: Direction = Direction { x: 0.0, y: 0.0, z: 1.0 };
    /// +x axis.
    pub const X: Direction = Direction { x: 1.0, y: 0.0, z: 0.0 };
    /// +y axis.
    pub const Y: Direction = Direction { x: 0.0, y: 1.0, z: 0.0 };

    /// Normalizes `(x, y, z)` onto the unit sphere.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = x * x + y * y + z * z;
        if !n2.is_finite() || n2 < 1e-300 {
            return Err(Error::ZeroVector);
        }
        let n = libm::sqrt(n2);
        Ok(Direction { x: x / n, y: y / n, z: z / n })
    }

    /// Builds a direction from polar angle `theta` (from +z) and azimuth `phi`.
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = (libm::sin(theta), libm::cos(theta));
        let (sp, cp) = (libm::sin(phi), libm::cos(phi));
        Direction { x: st * cp, y: st * sp, z: ct }
    }

    /// Polar angle in `[0, pi]` and azimuth in `[0, 2*pi)`.
    pub fn angles(&self) -> (f64, f64) {
        let theta = libm::acos(self.z.clamp(-1.0, 1.0));
        let mut phi = libm::atan2(self.y, self.x);
        if phi < 0.0 {
            phi += 2.0 * core::f64::consts::PI;
        }
        (theta, phi)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// The antipode -d.
    pub fn antipode(&self) -> Direction {
        Direction { x: -self.x, y: -self.y, z: -self.z }
    }

    /// Folds onto the canonical hemisphere: positive z, ties broken toward
    /// positive y and then non-negative x so equator points are deterministic.
    pub fn canonical(&self) -> Direction {
        if self.z > 0.0 {
            *self
        } else if self.z < 0.0 {
            self.antipode()
        } else if self.y > 0.0 {
            *self
        } else if self.y < 0.0 {
            self.antipode()
        } else if self.x >= 0.0 {
            *self
        } else {
            self.antipode()
        }
    }

    /// Angle between the two directions in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        libm::acos(self.dot(other).clamp(-1.0, 1.0))
    }

    /// Angle between the two axes (antipodally folded) in radians, in
    /// `[0, pi/2]`.
    pub fn axial_angle_to(&self, other: &Direction) -> f64 {
        libm::acos(libm::fabs(self.dot(other)).clamp(0.0, 1.0))
    }

    /// An arbitrary but deterministic pair of tangent vectors orthogonal to
    /// the direction, forming a right-handed frame with it.
    pub fn tangent_basis(&self) -> ([f64; 3], [f64; 3]) {
        // Pick the seed axis least aligned with self to avoid degeneracy.
        let seed = if libm::fabs(self.z) < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let d = self.as_array();
        let mut t1 = cross(seed, d);
        let n = libm::sqrt(dot3(t1, t1));
        t1 = [t1[0] / n, t1[1] / n, t1[2] / n];
        let t2 = cross(d, t1);
        (t1, t2)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

// ---------------------------------------------------------------------------
// Rotation frames
// ---------------------------------------------------------------------------

/// A proper rotation, stored as a world-from-local 3x3 matrix.
///
/// The frame's axis is the image of +z; `from_angles(theta, phi)` is the
/// composition Rz(phi) * Ry(theta), which carries +z to the direction with
/// polar angles (theta, phi).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RotationFrame {
    m: [[f64; 3]; 3],
}

impl RotationFrame {
    pub fn identity() -> Self {
        RotationFrame { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Rz(phi) * Ry(theta).
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = (libm::sin(theta), libm::cos(theta));
        let (sp, cp) = (libm::sin(phi), libm::cos(phi));
        RotationFrame {
            m: [
                [cp * ct, -sp, cp * st],
                [sp * ct, cp, sp * st],
                [-st, 0.0, ct],
            ],
        }
    }

    /// The frame whose axis is `d` (spin about the axis is arbitrary but
    /// deterministic).
    pub fn from_direction(d: &Direction) -> Self {
        let (theta, phi) = d.angles();
        RotationFrame::from_angles(theta, phi)
    }

    /// Composition: `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &RotationFrame) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        RotationFrame { m }
    }

    /// The inverse rotation (transpose).
    pub fn inverse(&self) -> Self {
        let m = &self.m;
        RotationFrame {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn apply_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn apply(&self, d: &Direction) -> Direction {
        let v = self.apply_vec(d.as_array());
        Direction { x: v[0], y: v[1], z: v[2] }
    }

    /// Image of +z under the rotation.
    pub fn axis(&self) -> Direction {
        Direction { x: self.m[0][2], y: self.m[1][2], z: self.m[2][2] }
    }

    /// True when the matrix is orthonormal with determinant +1 within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let t = self.inverse();
        let p = self.compose(&t);
        let id = RotationFrame::identity();
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                dev = dev.max(libm::fabs(p.m[i][j] - id.m[i][j]));
            }
        }
        let m = &self.m;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        dev <= tol && libm::fabs(det - 1.0) <= tol
    }
}

// ---------------------------------------------------------------------------
// Basis evaluation
// ---------------------------------------------------------------------------

/// Associated Legendre P_l^m(x) with the Condon-Shortley phase, streamed to
/// `emit(l, m, value)` for every l <= lmax, m <= l (all degrees, not just
/// even ones; callers filter).
fn legendre_scan(lmax: usize, ct: f64, st: f64, mut emit: impl FnMut(usize, usize, f64)) {
    // pmm = P_m^m, built up as m increases.
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * st;
        }
        emit(m, m, pmm);
        if m == lmax {
            break;
        }
        let mut p_prev = pmm; // P_m^m
        let mut p_curr = ct * (2 * m + 1) as f64 * pmm; // P_{m+1}^m
        emit(m + 1, m, p_curr);
        for l in (m + 2)..=lmax {
            let p_next = (((2 * l - 1) as f64) * ct * p_curr - ((l + m - 1) as f64) * p_prev)
                / ((l - m) as f64);
            emit(l, m, p_next);
            p_prev = p_curr;
            p_curr = p_next;
        }
    }
}

/// Orthonormalization factor sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!).
fn norm_factor(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    libm::sqrt((2 * l + 1) as f64 / FOUR_PI * ratio)
}

/// Streams every basis function value at the point with cos(theta) = `ct`,
/// sin(theta) = `st`, azimuth `phi` to `f(flat_index, value)`.
fn basis_scan(lmax: usize, ct: f64, st: f64, phi: f64, mut f: impl FnMut(usize, f64)) {
    let sqrt2 = core::f64::consts::SQRT_2;
    legendre_scan(lmax, ct, st, |l, m, p| {
        if l % 2 != 0 {
            return;
        }
        let n = norm_factor(l, m);
        if m == 0 {
            f(sh_index(l, 0), n * p);
        } else {
            let (smp, cmp) = (libm::sin(m as f64 * phi), libm::cos(m as f64 * phi));
            f(sh_index(l, -(m as i64)), sqrt2 * n * p * smp);
            f(sh_index(l, m as i64), sqrt2 * n * p * cmp);
        }
    });
}

fn spherical_of_xyz(p: [f64; 3]) -> (f64, f64, f64) {
    let ct = p[2].clamp(-1.0, 1.0);
    let st = libm::sqrt((p[0] * p[0] + p[1] * p[1]).max(0.0));
    let phi = libm::atan2(p[1], p[0]);
    (ct, st, phi)
}

/// Evaluates every basis function at `d`, in flat coefficient order.
pub fn eval_basis(d: &Direction, lmax: usize) -> Result<Vec<f64>> {
    check_lmax(lmax)?;
    let mut out = vec![0.0; n_coeffs(lmax)];
    let (ct, st, phi) = spherical_of_xyz(d.as_array());
    basis_scan(lmax, ct, st, phi, |i, v| out[i] = v);
    Ok(out)
}

/// N_l * P_l(t) for even degrees l = 0, 2, ..., lmax: the value of the unit
/// m = 0 (zonal) basis function of each degree at polar angle arccos(t) from
/// its axis.
pub fn zonal_basis(lmax: usize, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), lmax / 2 + 1);
    // Plain Legendre recurrence; m = 0 so no Condon-Shortley factor appears.
    let mut p_prev = 1.0;
    let mut p_curr = t;
    out[0] = norm_factor(0, 0);
    for l in 2..=lmax {
        let p_next = (((2 * l - 1) as f64) * t * p_curr - ((l - 1) as f64) * p_prev) / l as f64;
        p_prev = p_curr;
        p_curr = p_next;
        if l % 2 == 0 {
            out[l / 2] = norm_factor(l, 0) * p_curr;
        }
    }
    if lmax == 0 {
        out[0] = norm_factor(0, 0);
    }
}

// ---------------------------------------------------------------------------
// Coefficient vectors
// ---------------------------------------------------------------------------

/// A function on the sphere expressed in the real even-order basis.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShVector {
    lmax: usize,
    c: Vec<f64>,
}

impl ShVector {
    /// The zero function at band limit `lmax`.
    pub fn zeros(lmax: usize) -> Result<Self> {
        check_lmax(lmax)?;
        Ok(ShVector { lmax, c: vec![0.0; n_coeffs(lmax)] })
    }

    /// Wraps an existing coefficient vector, validating its length.
    pub fn from_coeffs(lmax: usize, c: Vec<f64>) -> Result<Self> {
        check_lmax(lmax)?;
        if c.len() != n_coeffs(lmax) {
            return Err(Error::LengthMismatch { expected: n_coeffs(lmax), got: c.len() });
        }
        Ok(ShVector { lmax, c })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.c
    }

    /// Coefficient (l, m).
    pub fn get(&self, l: usize, m: i64) -> f64 {
        self.c[sh_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: i64, v: f64) {
        self.c[sh_index(l, m)] = v;
    }

    /// Evaluates the function at `d`.
    pub fn eval(&self, d: &Direction) -> f64 {
        self.eval_xyz(d.as_array())
    }

    pub(crate) fn eval_xyz(&self, p: [f64; 3]) -> f64 {
        let (ct, st, phi) = spherical_of_xyz(p);
        let mut acc = 0.0;
        basis_scan(self.lmax, ct, st, phi, |i, v| acc += self.c[i] * v);
        acc
    }

    /// self += k * other. Both vectors must share a band limit.
    pub fn add_scaled(&mut self, other: &ShVector, k: f64) -> Result<()> {
        if self.lmax != other.lmax {
            return Err(Error::LengthMismatch { expected: self.c.len(), got: other.c.len() });
        }
        for (a, b) in self.c.iter_mut().zip(other.c.iter()) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.c {
            *a *= k;
        }
    }

    /// Euclidean norm of the full coefficient vector.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.c.iter().map(|v| v * v).sum())
    }

    /// Euclidean norm of the degree-`l` block.
    pub fn block_norm(&self, l: usize) -> f64 {
        let (start, len) = block(l);
        libm::sqrt(self.c[start..start + len].iter().map(|v| v * v).sum())
    }
}

/// Evaluates `s` at direction `d`.
pub fn eval_sh(s: &ShVector, d: &Direction) -> f64 {
    s.eval(d)
}

/// Coefficients of the antipodally symmetrized unit-mass delta at `d`.
///
/// Projection of the symmetrized delta onto the even basis leaves exactly the
/// basis values at `d`; the l = 0 coefficient is always 1/sqrt(4 pi).
pub fn delta_sh(d: &Direction, lmax: usize) -> Result<ShVector> {
    let c = eval_basis(d, lmax)?;
    ShVector::from_coeffs(lmax, c)
}

/// Coefficient-space inner product (equals the sphere integral of the product
/// of the two functions, by orthonormality).
pub fn sh_inner(a: &ShVector, b: &ShVector) -> Result<f64> {
    if a.lmax != b.lmax {
        return Err(Error::LengthMismatch { expected: a.c.len(), got: b.c.len() });
    }
    Ok(a.c.iter().zip(b.c.iter()).map(|(x, y)| x * y).sum())
}

/// Euclidean norm of the coefficient vector.
pub fn sh_norm(a: &ShVector) -> f64 {
    a.norm()
}

// ---------------------------------------------------------------------------
// Quadrature re-projection (rotation)
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for l in 2..=n {
                let p2 = (((2 * l - 1) as f64) * x * p1 - ((l - 1) as f64) * p0) / l as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if libm::fabs(dx) < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Product quadrature grid on the sphere, exact for spherical polynomials of
/// degree <= 2 * lmax, with the (weighted) basis matrix cached for fast
/// re-projection.
pub(crate) struct ReprojGrid {
    lmax: usize,
    points: Vec<[f64; 3]>,
    /// Row k holds w_k * y_i(p_k) for each flat index i.
    wbasis: Vec<f64>,
}

impl ReprojGrid {
    pub(crate) fn new(lmax: usize) -> Self {
        let band = 2 * lmax.max(1);
        let n_theta = band / 2 + 1;
        let n_phi = band + 2;
        let (zs, wz) = gauss_legendre(n_theta);
        let nc = n_coeffs(lmax);
        let mut points = Vec::with_capacity(n_theta * n_phi);
        let mut wbasis = vec![0.0; n_theta * n_phi * nc];
        let dphi = 2.0 * core::f64::consts::PI / n_phi as f64;
        let mut k = 0;
        for (iz, &z) in zs.iter().enumerate() {
            let st = libm::sqrt((1.0 - z * z).max(0.0));
            for ip in 0..n_phi {
                let phi = ip as f64 * dphi;
                let (sp, cp) = (libm::sin(phi), libm::cos(phi));
                points.push([st * cp, st * sp, z]);
                let w = wz[iz] * dphi;
                let row = &mut wbasis[k * nc..(k + 1) * nc];
                basis_scan(lmax, z, st, phi, |i, v| row[i] = w * v);
                k += 1;
            }
        }
        ReprojGrid { lmax, points, wbasis }
    }

    /// Projects the function `f` (sampled pointwise) onto the basis.
    pub(crate) fn project(&self, mut f: impl FnMut([f64; 3]) -> f64) -> ShVector {
        let nc = n_coeffs(self.lmax);
        let mut out = vec![0.0; nc];
        for (k, p) in self.points.iter().enumerate() {
            let v = f(*p);
            let row = &self.wbasis[k * nc..(k + 1) * nc];
            for (o, b) in out.iter_mut().zip(row.iter()) {
                *o += v * b;
            }
        }
        ShVector { lmax: self.lmax, c: out }
    }

    /// Coefficients of `s` rotated by `frame`.
    pub(crate) fn rotate(&self, s: &ShVector, frame: &RotationFrame) -> ShVector {
        let rinv = frame.inverse();
        self.project(|p| s.eval_xyz(rinv.apply_vec(p)))
    }
}

/// Rotates `s` by `frame`: the result represents d -> s(frame^-1 d).
pub fn rotate_sh(s: &ShVector, frame: &RotationFrame) -> ShVector {
    ReprojGrid::new(s.lmax()).rotate(s, frame)
}
