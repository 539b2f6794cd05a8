//! Rank-one Lax family `A(z) = Σᵢ A_{i,0}/(z−λᵢ) + A_{i,1}/(z−λᵢ)²` and its isomonodromic
//! deformations in the punctures λᵢ and Birkhoff invariants sᵢ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{c, commutator, eig_sl2, trace_product, AlgebraError, Complex, Mat2C};
use crate::numerics::{push_mat, read_mat, rk4_step};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IsoError {
    #[error("evaluation point {0} is within 1e-12 of a pole")]
    PoleHit(Complex),
    #[error("Birkhoff invariant s_{0} vanishes")]
    ZeroBirkhoff(usize),
    #[error("A{which}_{index} is not traceless")]
    NotTraceless { index: usize, which: u8 },
    #[error("A1_{0} is not diagonalizable: {1}")]
    NotDiagonalizable(usize, AlgebraError),
    #[error("punctures {0} and {1} coincide")]
    CoincidentPunctures(usize, usize),
    #[error("invariant violated: {0}")]
    InvariantViolated(String),
    #[error("contour passes within {distance:e} of pole {index} (margin {margin:e})")]
    ContourTooClose { index: usize, distance: f64, margin: f64 },
    #[error("index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("expected {expected} velocities, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("residues do not sum to zero although the family is flagged regular at infinity")]
    NotRegularAtInfinity,
    #[error("contour integration failed to converge")]
    IntegrationFailed,
}

/// One double pole of the Lax matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pole {
    pub lambda: Complex,
    pub a0: Mat2C,
    pub a1: Mat2C,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaxFamily {
    pub lambda: Vec<Complex>,
    pub a0: Vec<Mat2C>,
    pub a1: Vec<Mat2C>,
    /// Birkhoff invariants, carried as deformation coordinates.
    pub s: Vec<Complex>,
    /// Formal exponents `Tr(A_{i,0}A_{i,1})/(2sᵢ)`, fixed at construction.
    pub alpha: Vec<Complex>,
    pub regular_at_infinity: bool,
}

/// `ell[i][k−1] = ℓ_{i,k}`: partial-fraction coefficients of `Tr A(z)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSquareCoeffs {
    pub ell: Vec<[Complex; 4]>,
}

impl TraceSquareCoeffs {
    /// `Σ ℓ_{i,k}/(z−λᵢ)^k`.
    pub fn evaluate(&self, lambda: &[Complex], z: Complex) -> Complex {
        let mut acc = c(0.0, 0.0);
        for (l, ell) in lambda.iter().zip(&self.ell) {
            let w = (z - l).inv();
            acc += w * (ell[0] + w * (ell[1] + w * (ell[2] + w * ell[3])));
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonians {
    pub h_lambda: Vec<Complex>,
    pub h_s: Vec<Complex>,
}

/// Step control for [`LaxFamily::integrate_y_in_z`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContourOptions {
    /// Minimum admissible distance δ_z from the contour to any pole.
    pub margin: f64,
    /// Local error tolerance per step, relative to `max(1, ‖Y‖)`.
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for ContourOptions {
    fn default() -> Self {
        Self { margin: 1e-3, tol: 1e-10, max_steps: 1_000_000 }
    }
}

/// Result of deforming a family along a straight path in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformed {
    pub family: LaxFamily,
    /// `Y` at the fixed base point, transported by `∂Y = (Σ Uᵢ dλᵢ + Σ Vᵢ dsᵢ)Y`.
    pub y: Mat2C,
    /// Accumulated `Δ log τ`.
    pub log_tau: Complex,
}

fn point_segment_distance(p: Complex, a: Complex, b: Complex) -> f64 {
    let d = b - a;
    let len2 = d.norm_sqr();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let u = ((p - a) * d.conj()).re / len2;
    (p - (a + d * u.clamp(0.0, 1.0))).norm()
}

impl LaxFamily {
    pub fn empty() -> Self {
        Self {
            lambda: vec![],
            a0: vec![],
            a1: vec![],
            s: vec![],
            alpha: vec![],
            regular_at_infinity: false,
        }
    }

    /// Validated family; `sᵢ` from `eig_sl2(A_{i,1})` and `αᵢ = Tr(A_{i,0}A_{i,1})/(2sᵢ)`.
    pub fn new(poles: &[Pole], regular_at_infinity: bool) -> Result<Self, IsoError> {
        let mut fam = Self::empty();
        fam.regular_at_infinity = regular_at_infinity;
        for (i, p) in poles.iter().enumerate() {
            if !p.a0.is_sl2() {
                return Err(IsoError::NotTraceless { index: i, which: 0 });
            }
            if !p.a1.is_sl2() {
                return Err(IsoError::NotTraceless { index: i, which: 1 });
            }
            let sp = eig_sl2(&p.a1).map_err(|e| IsoError::NotDiagonalizable(i, e))?;
            for (j, q) in poles.iter().enumerate().take(i) {
                if q.lambda == p.lambda {
                    return Err(IsoError::CoincidentPunctures(j, i));
                }
            }
            fam.lambda.push(p.lambda);
            fam.a0.push(p.a0);
            fam.a1.push(p.a1);
            fam.s.push(sp.s);
            fam.alpha.push(trace_product(&p.a0, &p.a1) / (sp.s * 2.0));
        }
        if regular_at_infinity {
            let total = fam.a0.iter().fold(Mat2C::zero(), |acc, m| acc + *m);
            let scale = fam.a0.iter().map(|m| m.frobenius_norm()).fold(1.0, f64::max);
            if total.frobenius_norm() > 1e-10 * scale {
                return Err(IsoError::NotRegularAtInfinity);
            }
        }
        fam.check_invariants(1e-10)?;
        Ok(fam)
    }

    /// Deterministic random family with punctures in the upper half plane.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = move || -> Complex { c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) };
        let mut poles: Vec<Pole> = Vec::with_capacity(n);
        while poles.len() < n {
            let l = gauss();
            let lambda = c(1.5 * l.re, 1.1 + 0.5 * l.im);
            if poles.iter().any(|p| (p.lambda - lambda).norm() < 0.6) {
                continue;
            }
            let (x, y, z) = (gauss(), gauss(), gauss());
            let a0 = Mat2C::new(x, y, z, -x) * 0.5;
            let (x, y, z) = (gauss(), gauss(), gauss());
            let a1 = Mat2C::new(x, y, z, -x) * 0.5;
            if eig_sl2(&a1).map(|p| p.s.norm() > 0.1).unwrap_or(false) {
                poles.push(Pole { lambda, a0, a1 });
            }
        }
        Self::new(&poles, false).expect("generated family is valid")
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn poles(&self) -> Vec<Pole> {
        (0..self.n()).map(|i| Pole { lambda: self.lambda[i], a0: self.a0[i], a1: self.a1[i] }).collect()
    }

    /// Same α, new parameters and matrices; no validation.
    pub fn with_state(&self, lambda: Vec<Complex>, s: Vec<Complex>, a0: Vec<Mat2C>, a1: Vec<Mat2C>) -> Self {
        Self { lambda, s, a0, a1, alpha: self.alpha.clone(), regular_at_infinity: self.regular_at_infinity }
    }

    /// Tracelessness and `2sᵢ² = Tr(A_{i,1}²)` within `rel`.
    pub fn check_invariants(&self, rel: f64) -> Result<(), IsoError> {
        for i in 0..self.n() {
            if !self.a0[i].is_sl2() {
                return Err(IsoError::NotTraceless { index: i, which: 0 });
            }
            if !self.a1[i].is_sl2() {
                return Err(IsoError::NotTraceless { index: i, which: 1 });
            }
            let lhs = self.s[i] * self.s[i] * 2.0;
            let rhs = trace_product(&self.a1[i], &self.a1[i]);
            if (lhs - rhs).norm() > rel * lhs.norm().max(1e-300) {
                return Err(IsoError::InvariantViolated(format!(
                    "2 s_{i}^2 = {lhs} but Tr(A1_{i}^2) = {rhs}"
                )));
            }
        }
        Ok(())
    }

    /// Current `Tr(A_{i,0}A_{i,1})/(2sᵢ)`, to be compared with the stored α.
    pub fn alpha_now(&self) -> Vec<Complex> {
        (0..self.n()).map(|i| trace_product(&self.a0[i], &self.a1[i]) / (self.s[i] * 2.0)).collect()
    }

    fn check_z(&self, z: Complex) -> Result<(), IsoError> {
        if self.lambda.iter().any(|l| (z - l).norm() < 1e-12) {
            return Err(IsoError::PoleHit(z));
        }
        Ok(())
    }

    pub fn lax_eval(&self, z: Complex) -> Result<Mat2C, IsoError> {
        self.check_z(z)?;
        Ok(self.lax_eval_unchecked(z))
    }

    pub(crate) fn lax_eval_unchecked(&self, z: Complex) -> Mat2C {
        let mut acc = Mat2C::zero();
        for i in 0..self.n() {
            let w = (z - self.lambda[i]).inv();
            acc += (self.a0[i] + self.a1[i] * w) * w;
        }
        acc
    }

    /// `∂_z A(z)`.
    pub fn lax_dz(&self, z: Complex) -> Result<Mat2C, IsoError> {
        self.check_z(z)?;
        let mut acc = Mat2C::zero();
        for i in 0..self.n() {
            let w = (z - self.lambda[i]).inv();
            acc -= (self.a0[i] + self.a1[i] * (w * 2.0)) * (w * w);
        }
        Ok(acc)
    }

    /// `Uᵢ = −A_{i,1}/(z−λᵢ)² − A_{i,0}/(z−λᵢ)`.
    pub fn deformation_u(&self, z: Complex, i: usize) -> Result<Mat2C, IsoError> {
        if i >= self.n() {
            return Err(IsoError::IndexOutOfRange(i));
        }
        self.check_z(z)?;
        let w = (z - self.lambda[i]).inv();
        Ok(-(self.a0[i] + self.a1[i] * w) * w)
    }

    /// `Vᵢ = −A_{i,1}/(sᵢ(z−λᵢ))`.
    pub fn deformation_v(&self, z: Complex, i: usize) -> Result<Mat2C, IsoError> {
        if i >= self.n() {
            return Err(IsoError::IndexOutOfRange(i));
        }
        if self.s[i].norm() == 0.0 {
            return Err(IsoError::ZeroBirkhoff(i));
        }
        self.check_z(z)?;
        Ok(-self.a1[i] / (self.s[i] * (z - self.lambda[i])))
    }

    pub fn trace_square_coeffs(&self) -> TraceSquareCoeffs {
        let n = self.n();
        let mut ell = vec![[c(0.0, 0.0); 4]; n];
        for i in 0..n {
            let (a0, a1) = (&self.a0[i], &self.a1[i]);
            let mut l2 = trace_product(a0, a0);
            let mut l1 = c(0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let (b0, b1) = (&self.a0[j], &self.a1[j]);
                let w = (self.lambda[i] - self.lambda[j]).inv();
                let w2 = w * w;
                l2 += (trace_product(a1, b0) * w + trace_product(a1, b1) * w2) * 2.0;
                l1 += (trace_product(a0, b0) * w + trace_product(a0, b1) * w2
                    - trace_product(a1, b0) * w2
                    - trace_product(a1, b1) * (w2 * w * 2.0))
                    * 2.0;
            }
            ell[i] = [l1, l2, trace_product(a0, a1) * 2.0, trace_product(a1, a1)];
        }
        TraceSquareCoeffs { ell }
    }

    pub fn hamiltonians(&self) -> Result<Hamiltonians, IsoError> {
        let ell = self.trace_square_coeffs().ell;
        let mut h = Hamiltonians { h_lambda: vec![], h_s: vec![] };
        for (i, l) in ell.iter().enumerate() {
            let s = self.s[i];
            if s.norm() == 0.0 {
                return Err(IsoError::ZeroBirkhoff(i));
            }
            h.h_lambda.push(l[0] * 0.5);
            h.h_s.push(l[1] / (s * 2.0) - l[2] * l[2] / (s * s * s * 16.0));
        }
        Ok(h)
    }

    fn check_velocities(&self, dlambda: &[Complex], ds: &[Complex]) -> Result<(), IsoError> {
        for v in [dlambda, ds] {
            if v.len() != self.n() {
                return Err(IsoError::LengthMismatch { expected: self.n(), got: v.len() });
            }
        }
        Ok(())
    }

    /// `d log τ = Σ H_{λᵢ} dλᵢ + Σ H_{sᵢ} dsᵢ`.
    pub fn tau_increment(&self, dlambda: &[Complex], ds: &[Complex]) -> Result<Complex, IsoError> {
        self.check_velocities(dlambda, ds)?;
        let h = self.hamiltonians()?;
        Ok((0..self.n()).map(|i| h.h_lambda[i] * dlambda[i] + h.h_s[i] * ds[i]).sum())
    }

    /// Total differentials `(dA_{i,0}, dA_{i,1})` along the velocities `(dλ, ds)`.
    pub fn schlesinger_rhs(&self, dlambda: &[Complex], ds: &[Complex]) -> Result<Vec<(Mat2C, Mat2C)>, IsoError> {
        self.check_velocities(dlambda, ds)?;
        let n = self.n();
        let (a0, a1) = (&self.a0, &self.a1);
        let mut out = vec![(Mat2C::zero(), Mat2C::zero()); n];
        let mut ws = vec![c(0.0, 0.0); n];
        for j in 0..n {
            if ds[j] != c(0.0, 0.0) {
                if self.s[j].norm() == 0.0 {
                    return Err(IsoError::ZeroBirkhoff(j));
                }
                ws[j] = ds[j] / self.s[j];
            }
        }
        for i in 0..n {
            let (mut d0, mut d1) = (Mat2C::zero(), Mat2C::zero());
            // self terms
            let ci = commutator(&a0[i], &a1[i]);
            d1 += (a1[i] + ci) * ws[i];
            for j in (0..n).filter(|&j| j != i) {
                // w = 1/(λᵢ − λⱼ)
                let w = (self.lambda[i] - self.lambda[j]).inv();
                let w2 = w * w;
                let c11 = commutator(&a1[i], &a1[j]);
                let c10 = commutator(&a1[i], &a0[j]);
                let c01 = commutator(&a0[i], &a1[j]);
                let c00 = commutator(&a0[i], &a0[j]);
                // ∂_{λᵢ}A_{j,0} with d = λᵢ − λⱼ, seen from i
                let e0 = c11 * (w2 * w * -2.0) - (c10 - c01) * w2 + c00 * w;
                let self_mix = c11 * w2 + c10 * w;
                d0 -= e0 * dlambda[i];
                d1 -= self_mix * dlambda[i];
                d0 -= self_mix * ws[i];
                // source j acting on target i, with d = λⱼ − λᵢ = −1/w
                let v = -w;
                let v2 = w2;
                // [A_{j,·}, A_{i,·}] = −[A_{i,·}, A_{j,·}]
                let ej0 = c11 * (v2 * v * 2.0) - (-c01 + c10) * v2 - c00 * v;
                d0 += ej0 * dlambda[j];
                d1 += (c11 * v2 - c10 * v) * dlambda[j];
                d0 += (-c11 * v2 - c01 * v) * ws[j];
                d1 += (-c11 * v) * ws[j];
            }
            out[i] = (d0, d1);
        }
        Ok(out)
    }

    fn pack_matrices(&self) -> Vec<Complex> {
        let mut y = Vec::with_capacity(8 * self.n());
        for i in 0..self.n() {
            push_mat(&mut y, &self.a0[i]);
            push_mat(&mut y, &self.a1[i]);
        }
        y
    }

    fn unpack_matrices(&self, y: &[Complex]) -> (Vec<Mat2C>, Vec<Mat2C>) {
        let n = self.n();
        let a0 = (0..n).map(|i| read_mat(y, 8 * i)).collect();
        let a1 = (0..n).map(|i| read_mat(y, 8 * i + 4)).collect();
        (a0, a1)
    }

    /// RK4 step along constant velocities over `dt`.
    pub fn advance(&self, dlambda: &[Complex], ds: &[Complex], dt: f64) -> Result<Self, IsoError> {
        self.check_velocities(dlambda, ds)?;
        if dt == 0.0 {
            return Ok(self.clone());
        }
        let at = |th: f64| -> (Vec<Complex>, Vec<Complex>) {
            let l = self.lambda.iter().zip(dlambda).map(|(l, v)| l + v * (th * dt)).collect();
            let s = self.s.iter().zip(ds).map(|(s, v)| s + v * (th * dt)).collect();
            (l, s)
        };
        let y = self.pack_matrices();
        let y1 = rk4_step(&y, dt, |th, y| {
            let (l, s) = at(th);
            let (a0, a1) = self.unpack_matrices(y);
            let stage = self.with_state(l, s, a0, a1);
            let d = stage.schlesinger_rhs(dlambda, ds)?;
            let mut out = Vec::with_capacity(y.len());
            for (m0, m1) in &d {
                push_mat(&mut out, m0);
                push_mat(&mut out, m1);
            }
            Ok(out)
        })?;
        let (l, s) = at(1.0);
        let (a0, a1) = self.unpack_matrices(&y1);
        let next = self.with_state(l, s, a0, a1);
        for i in 0..next.n() {
            for j in 0..i {
                if next.lambda[i] == next.lambda[j] {
                    return Err(IsoError::CoincidentPunctures(j, i));
                }
            }
        }
        next.check_invariants(1e-6)?;
        Ok(next)
    }

    /// Straight-line deformation to `(lambda, s)` in `steps` RK4 steps, transporting `Y(z_b)` and `log τ`.
    pub fn deform_to(
        &self,
        lambda: &[Complex],
        s: &[Complex],
        z_b: Complex,
        y0: Mat2C,
        steps: usize,
    ) -> Result<Deformed, IsoError> {
        let n = self.n();
        self.check_velocities(lambda, s)?;
        let dl: Vec<Complex> = (0..n).map(|i| lambda[i] - self.lambda[i]).collect();
        let dsv: Vec<Complex> = (0..n).map(|i| s[i] - self.s[i]).collect();
        let steps = steps.max(1);
        let h = 1.0 / steps as f64;
        let mut fam = self.clone();
        let mut y = y0;
        let mut log_tau = c(0.0, 0.0);
        for _ in 0..steps {
            let mut packed = fam.pack_matrices();
            push_mat(&mut packed, &y);
            packed.push(log_tau);
            let base = fam.clone();
            let out = rk4_step(&packed, h, |th, v| {
                let l = base.lambda.iter().zip(&dl).map(|(l, d)| l + d * (th * h)).collect();
                let ss = base.s.iter().zip(&dsv).map(|(s, d)| s + d * (th * h)).collect();
                let (a0, a1) = base.unpack_matrices(v);
                let stage = base.with_state(l, ss, a0, a1);
                let d = stage.schlesinger_rhs(&dl, &dsv)?;
                let mut gen = Mat2C::zero();
                for i in 0..n {
                    gen += stage.deformation_u(z_b, i)? * dl[i] + stage.deformation_v(z_b, i)? * dsv[i];
                }
                let yy = read_mat(v, 8 * n);
                let mut o = Vec::with_capacity(v.len());
                for (m0, m1) in &d {
                    push_mat(&mut o, m0);
                    push_mat(&mut o, m1);
                }
                push_mat(&mut o, &(gen * yy));
                o.push(stage.tau_increment(&dl, &dsv)?);
                Ok(o)
            })?;
            let l: Vec<Complex> = fam.lambda.iter().zip(&dl).map(|(l, d)| l + d * h).collect();
            let ss: Vec<Complex> = fam.s.iter().zip(&dsv).map(|(s, d)| s + d * h).collect();
            let (a0, a1) = fam.unpack_matrices(&out);
            fam = fam.with_state(l, ss, a0, a1);
            y = read_mat(&out, 8 * n);
            log_tau = out[8 * n + 4];
        }
        fam.lambda = lambda.to_vec();
        fam.s = s.to_vec();
        fam.check_invariants(1e-6)?;
        Ok(Deformed { family: fam, y, log_tau })
    }

    /// Solves `dY/dz = A(z)Y` along a polyline with adaptive step-doubling RK4.
    pub fn integrate_y_in_z(&self, contour: &[Complex], y0: Mat2C, opts: &ContourOptions) -> Result<Mat2C, IsoError> {
        if self.n() == 0 || contour.len() < 2 {
            return Ok(y0);
        }
        for seg in contour.windows(2) {
            for (i, l) in self.lambda.iter().enumerate() {
                let d = point_segment_distance(*l, seg[0], seg[1]);
                if d < opts.margin {
                    return Err(IsoError::ContourTooClose { index: i, distance: d, margin: opts.margin });
                }
            }
        }
        let mut y = y0;
        let mut steps = 0usize;
        for seg in contour.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = (b - a).norm();
            if len == 0.0 {
                continue;
            }
            let dir = (b - a) / len;
            let rhs = |u: f64, m: &Mat2C| self.lax_eval_unchecked(a + dir * u) * *m * dir;
            let rk = |u: f64, m: &Mat2C, h: f64| {
                let k1 = rhs(u, m);
                let k2 = rhs(u + 0.5 * h, &(*m + k1 * (0.5 * h)));
                let k3 = rhs(u + 0.5 * h, &(*m + k2 * (0.5 * h)));
                let k4 = rhs(u + h, &(*m + k3 * h));
                *m + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
            };
            let mut u = 0.0;
            let mut h = len.min(0.05);
            while u < len {
                steps += 1;
                if steps > opts.max_steps {
                    return Err(IsoError::IntegrationFailed);
                }
                let z = a + dir * u;
                let dist = self.lambda.iter().map(|l| (z - l).norm()).fold(f64::INFINITY, f64::min);
                h = h.min(0.1 * dist).min(len - u);
                let last = u + h >= len;
                let full = rk(u, &y, h);
                let half = rk(u, &y, 0.5 * h);
                let two = rk(u + 0.5 * h, &half, 0.5 * h);
                let err = (two - full).frobenius_norm() / 15.0;
                let scale = opts.tol * y.frobenius_norm().max(1.0);
                if err <= scale || h < 1e-14 * len.max(1.0) {
                    y = two + (two - full) / 15.0;
                    u = if last { len } else { u + h };
                }
                let factor = if err == 0.0 { 2.0 } else { (0.9 * (scale / err).powf(0.2)).clamp(0.2, 2.0) };
                h *= factor;
                if !y.is_finite() {
                    return Err(IsoError::IntegrationFailed);
                }
            }
        }
        Ok(y)
    }
}

/// JSON shape of a 2×2 complex matrix: rows of `[re, im]` pairs.
pub type MatJson = [[Complex; 2]; 2];

pub fn mat_from_json(m: &MatJson) -> Mat2C {
    Mat2C::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

pub fn mat_to_json(m: &Mat2C) -> MatJson {
    [[m.a11, m.a12], [m.a21, m.a22]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoleSpec {
    pub lambda: Complex,
    #[serde(rename = "A0")]
    pub a0: MatJson,
    #[serde(rename = "A1")]
    pub a1: MatJson,
}

/// Wire form of a [`LaxFamily`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub poles: Vec<PoleSpec>,
    #[serde(default)]
    pub regular_at_infinity: bool,
}

impl FamilySpec {
    pub fn build(&self) -> Result<LaxFamily, IsoError> {
        let poles: Vec<Pole> = self
            .poles
            .iter()
            .map(|p| Pole { lambda: p.lambda, a0: mat_from_json(&p.a0), a1: mat_from_json(&p.a1) })
            .collect();
        LaxFamily::new(&poles, self.regular_at_infinity)
    }
}

impl From<&LaxFamily> for FamilySpec {
    fn from(f: &LaxFamily) -> Self {
        Self {
            poles: f
                .poles()
                .iter()
                .map(|p| PoleSpec { lambda: p.lambda, a0: mat_to_json(&p.a0), a1: mat_to_json(&p.a1) })
                .collect(),
            regular_at_infinity: f.regular_at_infinity,
        }
    }
}

/// The single-pole diagonal family `λ = 2`, `A0 = diag(½, −½)`, `A1 = diag(−1, 1)`.
pub fn diagonal_example() -> LaxFamily {
    LaxFamily::new(
        &[Pole {
            lambda: c(2.0, 0.0),
            a0: Mat2C::real(0.5, 0.0, 0.0, -0.5),
            a1: Mat2C::real(-1.0, 0.0, 0.0, 1.0),
        }],
        false,
    )
    .expect("diagonal example is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex, b: Complex, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn mclose(a: &Mat2C, b: &Mat2C, tol: f64) -> bool {
        (*a - *b).frobenius_norm() <= tol
    }

    fn sample_points(k: usize) -> Vec<Complex> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..k).map(|_| c(rng.random_range(-3.0..3.0), rng.random_range(-0.5..3.0))).collect()
    }

    #[test]
    fn diagonal_family_values() {
        let f = diagonal_example();
        assert_eq!(f.s, vec![c(1.0, 0.0)]);
        assert_eq!(f.alpha, vec![c(-0.5, 0.0)]);
        let z = c(3.0, 0.0);
        assert!(mclose(&f.lax_eval(z).unwrap(), &Mat2C::real(-0.5, 0.0, 0.0, 0.5), 1e-15));
        assert!(mclose(&f.deformation_u(z, 0).unwrap(), &Mat2C::real(0.5, 0.0, 0.0, -0.5), 1e-15));
        assert!(mclose(&f.deformation_v(z, 0).unwrap(), &Mat2C::real(1.0, 0.0, 0.0, -1.0), 1e-15));
        assert!(matches!(f.lax_eval(c(2.0, 0.0)), Err(IsoError::PoleHit(_))));
        let ell = f.trace_square_coeffs().ell[0];
        assert_eq!(ell, [c(0.0, 0.0), c(0.5, 0.0), c(-2.0, 0.0), c(2.0, 0.0)]);
        let h = f.hamiltonians().unwrap();
        assert_eq!(h.h_lambda, vec![c(0.0, 0.0)]);
        assert!(close(h.h_s[0], c(0.0, 0.0), 1e-15));
        assert!(close(f.tau_increment(&[c(0.3, 0.1)], &[c(-0.2, 0.0)]).unwrap(), c(0.0, 0.0), 1e-15));
    }

    #[test]
    fn empty_family_is_trivial() {
        let f = LaxFamily::empty();
        assert_eq!(f.lax_eval(c(1.0, 0.0)).unwrap(), Mat2C::zero());
        assert!(f.trace_square_coeffs().ell.is_empty());
        let y0 = Mat2C::real(1.0, 2.0, 3.0, 4.0);
        assert_eq!(f.integrate_y_in_z(&[c(0.0, 0.0), c(5.0, 1.0)], y0, &ContourOptions::default()).unwrap(), y0);
    }

    #[test]
    fn validation_failures() {
        let good = Pole { lambda: c(1.0, 1.0), a0: Mat2C::zero(), a1: Mat2C::real(-1.0, 0.0, 0.0, 1.0) };
        let bad_trace = Pole { a1: Mat2C::real(-1.0, 0.0, 0.0, 1.1), ..good };
        assert!(matches!(LaxFamily::new(&[bad_trace], false), Err(IsoError::NotTraceless { which: 1, .. })));
        let nilpotent = Pole { a1: Mat2C::real(0.0, 1.0, 0.0, 0.0), ..good };
        assert!(matches!(LaxFamily::new(&[nilpotent], false), Err(IsoError::NotDiagonalizable(0, _))));
        assert!(matches!(LaxFamily::new(&[good, good], false), Err(IsoError::CoincidentPunctures(0, 1))));
        let with_res = Pole { a0: Mat2C::real(0.5, 0.0, 0.0, -0.5), ..good };
        assert!(matches!(LaxFamily::new(&[with_res], true), Err(IsoError::NotRegularAtInfinity)));
        let zero_a1 = Pole { a1: Mat2C::zero(), ..good };
        assert!(LaxFamily::new(&[zero_a1], false).is_err());
    }

    #[test]
    fn v_is_homogeneous_in_s() {
        let f = diagonal_example();
        let mut g = f.clone();
        g.a1[0] = g.a1[0] * 2.0;
        g.s[0] = g.s[0] * 2.0;
        let z = c(0.5, 1.0);
        assert!(mclose(&f.deformation_v(z, 0).unwrap(), &g.deformation_v(z, 0).unwrap(), 1e-15));
        let mut z0 = f.clone();
        z0.s[0] = c(0.0, 0.0);
        assert_eq!(z0.deformation_v(z, 0), Err(IsoError::ZeroBirkhoff(0)));
    }

    #[test]
    fn trace_square_reconstruction() {
        for seed in 0..5 {
            let f = LaxFamily::random(3, seed);
            let ell = f.trace_square_coeffs();
            for z in sample_points(20) {
                let a = f.lax_eval(z).unwrap();
                let direct = trace_product(&a, &a);
                let rec = ell.evaluate(&f.lambda, z);
                assert!(close(direct, rec, 1e-10 * direct.norm().max(1.0)), "{direct} vs {rec}");
            }
        }
    }

    #[test]
    fn residue_sum_vanishes_when_regular_at_infinity() {
        let mut f = LaxFamily::random(3, 4);
        let total = f.a0[0] + f.a0[1];
        f.a0[2] = -total;
        let f = LaxFamily::new(&f.poles(), true).unwrap();
        let sum: Complex = f.trace_square_coeffs().ell.iter().map(|l| l[0]).sum();
        assert!(sum.norm() < 1e-12);
    }

    fn contour_residue(f: &LaxFamily, i: usize, power: i32) -> Complex {
        // (1/2πi)∮ Tr A² (z−λ)^power dz on a small circle, trapezoid rule (spectral accuracy)
        let r = 0.2;
        let m = 256;
        let mut acc = c(0.0, 0.0);
        for k in 0..m {
            let th = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            let e = c(0.0, th).exp();
            let z = f.lambda[i] + e * r;
            let a = f.lax_eval(z).unwrap();
            acc += trace_product(&a, &a) * (e * r).powi(power + 1);
        }
        acc / m as f64
    }

    #[test]
    fn hamiltonians_match_contour_residues() {
        for seed in 0..3 {
            let f = LaxFamily::random(2, seed);
            let h = f.hamiltonians().unwrap();
            let ell = f.trace_square_coeffs().ell;
            for i in 0..2 {
                assert!(close(h.h_lambda[i], contour_residue(&f, i, 0) * 0.5, 1e-8));
                for k in 1..4 {
                    assert!(close(ell[i][k], contour_residue(&f, i, k as i32), 1e-8));
                }
            }
        }
    }

    #[test]
    fn schlesinger_diagonal_example() {
        let f = diagonal_example();
        let d = f.schlesinger_rhs(&[c(0.0, 0.0)], &[c(0.01, 0.0)]).unwrap();
        assert!(mclose(&d[0].1, &Mat2C::real(-0.01, 0.0, 0.0, 0.01), 1e-16));
        assert!(mclose(&d[0].0, &Mat2C::zero(), 1e-16));
        let r = LaxFamily::random(2, 1);
        let z = r.schlesinger_rhs(&[c(0.0, 0.0); 2], &[c(0.0, 0.0); 2]).unwrap();
        assert!(z.iter().all(|(a, b)| *a == Mat2C::zero() && *b == Mat2C::zero()));
    }

    /// ∂A/∂p computed from the Schlesinger system plus the explicit pole motion.
    fn total_derivative(f: &LaxFamily, dl: &[Complex], ds: &[Complex], z: Complex) -> Mat2C {
        let d = f.schlesinger_rhs(dl, ds).unwrap();
        let mut acc = Mat2C::zero();
        for i in 0..f.n() {
            let w = (z - f.lambda[i]).inv();
            acc += (d[i].0 + d[i].1 * w) * w;
            acc += (f.a0[i] + f.a1[i] * (w * 2.0)) * (w * w * dl[i]);
        }
        acc
    }

    #[test]
    fn zero_curvature_holds_for_every_flow() {
        let h = 1e-6;
        for seed in 0..4 {
            let f = LaxFamily::random(3, seed + 10);
            for z in sample_points(5) {
                let a = f.lax_eval(z).unwrap();
                for i in 0..3 {
                    let mut e = vec![c(0.0, 0.0); 3];
                    e[i] = c(1.0, 0.0);
                    let zero = vec![c(0.0, 0.0); 3];
                    // λ flow: ∂A = ∂_z U + [U, A]
                    let u = f.deformation_u(z, i).unwrap();
                    let du = (f.deformation_u(z + h, i).unwrap() - f.deformation_u(z - h, i).unwrap()) / (2.0 * h);
                    let lhs = total_derivative(&f, &e, &zero, z);
                    let rhs = du + commutator(&u, &a);
                    assert!(mclose(&lhs, &rhs, 1e-7 * rhs.frobenius_norm().max(1.0)), "lambda flow {i}");
                    let v = f.deformation_v(z, i).unwrap();
                    let dv = (f.deformation_v(z + h, i).unwrap() - f.deformation_v(z - h, i).unwrap()) / (2.0 * h);
                    let lhs = total_derivative(&f, &zero, &e, z);
                    let rhs = dv + commutator(&v, &a);
                    assert!(mclose(&lhs, &rhs, 1e-7 * rhs.frobenius_norm().max(1.0)), "s flow {i}");
                }
            }
        }
    }

    #[test]
    fn rhs_is_traceless() {
        let f = LaxFamily::random(3, 77);
        let d = f
            .schlesinger_rhs(&[c(0.3, 0.1), c(-0.2, 0.5), c(1.0, 0.0)], &[c(0.1, 0.0), c(0.0, 0.2), c(-0.4, 0.1)])
            .unwrap();
        assert!(d.iter().all(|(a, b)| a.trace().norm() < 1e-13 && b.trace().norm() < 1e-13));
    }

    #[test]
    fn advance_diagonal_scales_a1() {
        let f = diagonal_example();
        let g = f.advance(&[c(0.0, 0.0)], &[c(0.5, 0.0)], 1.0).unwrap();
        assert!(close(g.s[0], c(1.5, 0.0), 1e-15));
        assert!(mclose(&g.a1[0], &Mat2C::real(-1.5, 0.0, 0.0, 1.5), 1e-12));
        assert!(mclose(&g.a0[0], &f.a0[0], 1e-15));
        assert_eq!(f.advance(&[c(1.0, 0.0)], &[c(1.0, 0.0)], 0.0).unwrap(), f);
    }

    #[test]
    fn alpha_is_constant_along_deformations() {
        let mut f = LaxFamily::random(2, 5);
        let alpha0 = f.alpha.clone();
        let dl = [c(0.2, -0.1), c(-0.3, 0.05)];
        let ds = [c(0.1, 0.2), c(-0.2, 0.1)];
        for _ in 0..100 {
            f = f.advance(&dl, &ds, 0.01).unwrap();
        }
        for (a, b) in f.alpha_now().iter().zip(&alpha0) {
            assert!(close(*a, *b, 1e-7));
        }
        // the residue sum is conserved as well
        let g = LaxFamily::random(2, 5);
        let before = g.a0[0] + g.a0[1];
        let after = f.a0[0] + f.a0[1];
        assert!(mclose(&before, &after, 1e-9));
    }

    #[test]
    fn flows_commute() {
        let h = 1e-4;
        for seed in 0..3 {
            let f = LaxFamily::random(2, seed + 30);
            let e1 = [c(1.0, 0.0), c(0.0, 0.0)];
            let e2 = [c(0.0, 0.0), c(1.0, 0.0)];
            let z = [c(0.0, 0.0); 2];
            let pairs: [(&[Complex], &[Complex], &[Complex], &[Complex]); 2] =
                [(&e1, &z, &e2, &z), (&e1, &z, &z, &e2)];
            for (l1, s1, l2, s2) in pairs {
                let ab = f.advance(l1, s1, h).unwrap().advance(l2, s2, h).unwrap();
                let ba = f.advance(l2, s2, h).unwrap().advance(l1, s1, h).unwrap();
                for i in 0..2 {
                    assert!(mclose(&ab.a0[i], &ba.a0[i], 1e-6));
                    assert!(mclose(&ab.a1[i], &ba.a1[i], 1e-6));
                }
            }
        }
    }

    #[test]
    fn tau_form_is_closed() {
        let f = LaxFamily::random(2, 8);
        let h = 1e-3;
        let z = [c(0.0, 0.0); 2];
        let legs: [[Complex; 2]; 4] = [
            [c(1.0, 0.0), c(0.0, 0.0)],
            [c(0.0, 0.0), c(1.0, 0.0)],
            [c(-1.0, 0.0), c(0.0, 0.0)],
            [c(0.0, 0.0), c(-1.0, 0.0)],
        ];
        let mut g = f.clone();
        let mut acc = c(0.0, 0.0);
        for leg in &legs {
            let sub = 10;
            for _ in 0..sub {
                let a = g.tau_increment(leg, &z).unwrap();
                let next = g.advance(leg, &z, h / sub as f64).unwrap();
                let b = next.tau_increment(leg, &z).unwrap();
                acc += (a + b) * (0.5 * h / sub as f64);
                g = next;
            }
        }
        assert!(acc.norm() < 1e-5, "loop residual {acc}");
    }

    #[test]
    fn diagonal_contour_closed_form() {
        let f = diagonal_example();
        let y = f
            .integrate_y_in_z(&[c(3.0, 0.0), c(4.0, 0.0)], Mat2C::identity(), &ContourOptions::default())
            .unwrap();
        let e = (-0.5f64).exp() * 2f64.sqrt();
        assert!(close(y.a11, c(e, 0.0), 1e-9));
        assert!(close(y.a22, c(1.0 / e, 0.0), 1e-9));
        assert_eq!(y.a12, c(0.0, 0.0));
    }

    #[test]
    fn contour_preserves_determinant() {
        for seed in 0..4 {
            let f = LaxFamily::random(2, seed);
            let path = [c(-3.0, -0.5), c(3.0, -0.5), c(3.0, 3.0)];
            let y0 = Mat2C::real(2.0, 1.0, 1.0, 1.0);
            let y = f.integrate_y_in_z(&path, y0, &ContourOptions::default()).unwrap();
            assert!(close(y.det(), y0.det(), 1e-8));
        }
        let f = diagonal_example();
        let err = f.integrate_y_in_z(&[c(0.0, 0.0), c(4.0, 0.0)], Mat2C::identity(), &ContourOptions::default());
        assert!(matches!(err, Err(IsoError::ContourTooClose { .. })));
    }

    #[test]
    fn deformation_transports_y_consistently() {
        // Y(z; p₁) reached by deforming at z_b and then integrating in z agrees with
        // integrating in z first and deforming at the endpoint.
        let f = LaxFamily::random(2, 12);
        let tl = [f.lambda[0] + c(0.05, 0.02), f.lambda[1] - c(0.03, 0.01)];
        let ts = [f.s[0] * c(1.02, 0.01), f.s[1] * c(0.98, -0.02)];
        let zb = c(0.0, -1.0);
        let z1 = c(1.0, -0.8);
        let opts = ContourOptions { tol: 1e-12, ..Default::default() };
        let a = f.deform_to(&tl, &ts, zb, Mat2C::identity(), 20).unwrap();
        let ya = a.family.integrate_y_in_z(&[zb, z1], a.y, &opts).unwrap();
        let y1 = f.integrate_y_in_z(&[zb, z1], Mat2C::identity(), &opts).unwrap();
        let b = f.deform_to(&tl, &ts, z1, y1, 20).unwrap();
        assert!(mclose(&ya, &b.y, 1e-8));
        assert!(close(a.log_tau, b.log_tau, 1e-12));
    }

    #[test]
    fn json_round_trip() {
        let f = LaxFamily::random(2, 3);
        let spec = FamilySpec::from(&f);
        assert_eq!(spec.build().unwrap(), f);
    }
}
