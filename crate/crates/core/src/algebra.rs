//! 2×2 complex matrices and the 𝔰𝔩₂(ℂ) spectral convention `X = −G·diag(s, −s)·G⁻¹`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use num_complex::Complex64 as Complex;

/// Shorthand for `Complex::new(re, im)`.
#[inline]
pub const fn c(re: f64, im: f64) -> Complex {
    Complex::new(re, im)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("matrix is not diagonalizable (|s| = {0:e})")]
    NotDiagonalizable(f64),
    #[error("matrix is not traceless (|tr| = {0:e})")]
    NotTraceless(f64),
    #[error("matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2C {
    pub a11: Complex,
    pub a12: Complex,
    pub a21: Complex,
    pub a22: Complex,
}

impl Mat2C {
    pub const fn new(a11: Complex, a12: Complex, a21: Complex, a22: Complex) -> Self {
        Self { a11, a12, a21, a22 }
    }

    pub const fn zero() -> Self {
        Self::new(c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0))
    }

    pub const fn identity() -> Self {
        Self::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0))
    }

    pub const fn diag(d1: Complex, d2: Complex) -> Self {
        Self::new(d1, c(0.0, 0.0), c(0.0, 0.0), d2)
    }

    /// Real-entry constructor, row major.
    pub const fn real(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Self::new(c(a11, 0.0), c(a12, 0.0), c(a21, 0.0), c(a22, 0.0))
    }

    pub fn scalar(z: Complex) -> Self {
        Self::diag(z, z)
    }

    pub fn trace(&self) -> Complex {
        self.a11 + self.a22
    }

    pub fn det(&self) -> Complex {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.a11.norm_sqr() + self.a12.norm_sqr() + self.a21.norm_sqr() + self.a22.norm_sqr())
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        [self.a11, self.a12, self.a21, self.a22]
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `|tr X| ≤ 1e−12 · max(1, ‖X‖)`.
    pub fn is_sl2(&self) -> bool {
        self.trace().norm() <= 1e-12 * self.frobenius_norm().max(1.0)
    }

    pub fn inverse(&self) -> Result<Self, AlgebraError> {
        let d = self.det();
        if d.norm() == 0.0 || !d.is_finite() {
            return Err(AlgebraError::Singular);
        }
        Ok(Self::new(self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d))
    }

    pub fn conj(&self) -> Self {
        Self::new(self.a11.conj(), self.a12.conj(), self.a21.conj(), self.a22.conj())
    }

    pub fn entries(&self) -> [Complex; 4] {
        [self.a11, self.a12, self.a21, self.a22]
    }

    /// Traceless part `X − ½tr(X)·Id`.
    pub fn traceless_part(&self) -> Self {
        let h = self.trace() * 0.5;
        *self - Self::scalar(h)
    }

    /// Matrix exponential via `exp(X) = e^{tr/2}(cosh μ·Id + sinh μ/μ·X₀)`, `μ² = −det X₀`.
    pub fn exp(&self) -> Self {
        let h = self.trace() * 0.5;
        let x0 = *self - Self::scalar(h);
        let mu = (-x0.det()).sqrt();
        let (ch, sh_over) = if mu.norm() < 1e-4 {
            let m2 = mu * mu;
            (
                c(1.0, 0.0) + m2 / 2.0 + m2 * m2 / 24.0 + m2 * m2 * m2 / 720.0,
                c(1.0, 0.0) + m2 / 6.0 + m2 * m2 / 120.0 + m2 * m2 * m2 / 5040.0,
            )
        } else {
            (mu.cosh(), mu.sinh() / mu)
        };
        (Self::scalar(ch) + x0 * sh_over) * h.exp()
    }
}

impl Add for Mat2C {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.a11 + o.a11, self.a12 + o.a12, self.a21 + o.a21, self.a22 + o.a22)
    }
}

impl AddAssign for Mat2C {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for Mat2C {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.a11 - o.a11, self.a12 - o.a12, self.a21 - o.a21, self.a22 - o.a22)
    }
}

impl SubAssign for Mat2C {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl Neg for Mat2C {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.a11, -self.a12, -self.a21, -self.a22)
    }
}

impl Mul for Mat2C {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.a11 * o.a11 + self.a12 * o.a21,
            self.a11 * o.a12 + self.a12 * o.a22,
            self.a21 * o.a11 + self.a22 * o.a21,
            self.a21 * o.a12 + self.a22 * o.a22,
        )
    }
}

impl Mul<Complex> for Mat2C {
    type Output = Self;
    fn mul(self, k: Complex) -> Self {
        Self::new(self.a11 * k, self.a12 * k, self.a21 * k, self.a22 * k)
    }
}

impl Mul<f64> for Mat2C {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.a11 * k, self.a12 * k, self.a21 * k, self.a22 * k)
    }
}

impl Div<Complex> for Mat2C {
    type Output = Self;
    fn div(self, k: Complex) -> Self {
        Self::new(self.a11 / k, self.a12 / k, self.a21 / k, self.a22 / k)
    }
}

impl Div<f64> for Mat2C {
    type Output = Self;
    fn div(self, k: f64) -> Self {
        Self::new(self.a11 / k, self.a12 / k, self.a21 / k, self.a22 / k)
    }
}

/// `XY − YX`.
pub fn commutator(x: &Mat2C, y: &Mat2C) -> Mat2C {
    *x * *y - *y * *x
}

/// `Tr(XY)` without forming the product.
pub fn trace_product(x: &Mat2C, y: &Mat2C) -> Complex {
    x.a11 * y.a11 + x.a12 * y.a21 + x.a21 * y.a12 + x.a22 * y.a22
}

/// Eigen-data of a traceless matrix in the form `X = −G·D·G⁻¹`, `D = diag(s, −s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPair {
    pub s: Complex,
    pub g: Mat2C,
    pub d: Mat2C,
}

impl SpectralPair {
    pub fn reconstruct(&self) -> Result<Mat2C, AlgebraError> {
        Ok(-(self.g * self.d * self.g.inverse()?))
    }
}

/// Branch rule: `Re s ≥ 0`, and `Im s ≥ 0` when `Re s` vanishes at rounding level.
pub fn canonical_branch(s: Complex) -> Complex {
    let tie = s.re.abs() <= 1e-14 * s.norm();
    if s.re < 0.0 && !tie {
        -s
    } else if tie {
        let s = c(0.0, s.im);
        if s.im < 0.0 {
            -s
        } else {
            s
        }
    } else {
        s
    }
}

fn eigenvector(x: &Mat2C, mu: Complex) -> [Complex; 2] {
    let v1 = [x.a12, mu - x.a11];
    let v2 = [mu + x.a11, x.a21];
    let n1 = v1[0].norm_sqr() + v1[1].norm_sqr();
    let n2 = v2[0].norm_sqr() + v2[1].norm_sqr();
    let v = if n1 >= n2 { v1 } else { v2 };
    // unit norm, largest component real positive
    let norm = n1.max(n2).sqrt();
    let pivot = if v[0].norm() >= v[1].norm() { v[0] } else { v[1] };
    let phase = pivot.conj() / (pivot.norm() * norm);
    [v[0] * phase, v[1] * phase]
}

pub fn eig_sl2(x: &Mat2C) -> Result<SpectralPair, AlgebraError> {
    let norm = x.frobenius_norm();
    if norm < 1e-14 {
        return Err(AlgebraError::ZeroMatrix);
    }
    if !x.is_sl2() {
        return Err(AlgebraError::NotTraceless(x.trace().norm()));
    }
    let x = x.traceless_part();
    let s = canonical_branch((-x.det()).sqrt());
    if s.norm() < 1e-12 * norm {
        return Err(AlgebraError::NotDiagonalizable(s.norm()));
    }
    let g1 = eigenvector(&x, -s);
    let g2 = eigenvector(&x, s);
    let g = Mat2C::new(g1[0], g2[0], g1[1], g2[1]);
    Ok(SpectralPair { s, g, d: Mat2C::diag(s, -s) })
}
