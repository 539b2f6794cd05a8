//! The observable `M = F·τ·Y` (and `F·τ·Ỹ⁻¹Y` with a force point) along simulated Loewner
//! paths, its drift ledger, and the Monte Carlo expectation harness.
//!
//! The finite-variation block (Loewner quantities, Lax matrices, `log F`, `log τ`, `Ỹ⁻¹`) is
//! advanced jointly by RK4 against the piecewise-linear driving. `Y` takes one Euler–Maruyama
//! step `Y ← (I + A·ΔZ + (κ/2 − 2)∂_zA·dt)·Y` per substep, with the scalar Itô drift
//! `(κ/4)·Tr A²·dt` accumulated exactly into a separate log-scale.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{c, trace_product, Complex, Mat2C};
use crate::isomonodromy::{IsoError, LaxFamily};
use crate::loewner::{
    flow_rhs, increment_distance, walk, DrivingKind, DrivingPath, DrivingSpec, FlowError, Increment, LoewnerState,
    PathStepper, StepControl, StepOutcome, StopReason, SLOTS,
};
use crate::numerics::{push_mat, read_mat, rk4_step, splitmix64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MartingaleError {
    #[error("state is already stopped")]
    Stopped,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Iso(#[from] IsoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DriftLedger {
    /// `Tr A(Z)²`.
    pub tr_a2: Complex,
    pub rate_f: Complex,
    pub rate_tau: Complex,
    /// `(κ/4)·Tr A² + rate_F + rate_τ`; vanishes identically at κ = 4.
    pub residual: Complex,
}

impl DriftLedger {
    /// `|residual| / max(1, |Tr A²|)`.
    pub fn relative(&self) -> f64 {
        self.residual.norm() / self.tr_a2.norm().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleState {
    pub t: f64,
    /// `Y = exp(log_y)·y_hat`.
    pub y_hat: Mat2C,
    pub log_y: Complex,
    pub ytilde_inv: Option<Mat2C>,
    pub log_f: Complex,
    pub log_tau: Complex,
    pub m: Mat2C,
    pub ledger: DriftLedger,
}

impl MartingaleState {
    pub fn initial(with_force_point: bool) -> Self {
        Self {
            t: 0.0,
            y_hat: Mat2C::identity(),
            log_y: c(0.0, 0.0),
            ytilde_inv: with_force_point.then(Mat2C::identity),
            log_f: c(0.0, 0.0),
            log_tau: c(0.0, 0.0),
            m: Mat2C::identity(),
            ledger: DriftLedger::default(),
        }
    }

    pub fn y(&self) -> Mat2C {
        self.y_hat * self.log_y.exp()
    }

    /// `exp(log F + log τ)·Y`, with `Ỹ⁻¹` in front when present.
    pub fn reassemble(&mut self) {
        let core = self.ytilde_inv.map_or(self.y_hat, |t| t * self.y_hat);
        self.m = core * (self.log_f + self.log_tau + self.log_y).exp();
    }
}

fn check_live(lo: &LoewnerState, fam: &LaxFamily) -> Result<(), MartingaleError> {
    if lo.stopped.is_some() {
        return Err(MartingaleError::Stopped);
    }
    if lo.n() != fam.n() {
        return Err(MartingaleError::InvalidConfig("family and flow track different punctures".into()));
    }
    Ok(())
}

fn rate_f_terms(alpha: &[Complex], big_s: &[Complex], lambda_t: &[Complex], z: f64) -> Complex {
    let mut acc = c(0.0, 0.0);
    for i in 0..alpha.len() {
        let w = (lambda_t[i] - z).inv();
        let (a, s) = (alpha[i], big_s[i]);
        let w2 = w * w;
        acc += (a * a * w2 + s * s * w2 * w2 - a * s * w2 * w * 2.0) * -2.0;
    }
    acc
}

/// `d log F/dt = −2Σ[α²/x² + S²/x⁴ − 2αS/x³]`, `x = Λ − Z`.
pub fn covariance_rate(lo: &LoewnerState, fam: &LaxFamily) -> Result<Complex, MartingaleError> {
    check_live(lo, fam)?;
    Ok(rate_f_terms(&fam.alpha, &lo.birkhoff, &lo.lambda_t, lo.z))
}

/// `log F = Σ α² log g′ + s²𝒮/6 + sα𝒜` from the tracked geometric quantities.
pub fn closed_form_log_f(lo: &LoewnerState, alpha: &[Complex]) -> Complex {
    (0..lo.n())
        .map(|i| {
            let (a, s) = (alpha[i], lo.s0[i]);
            a * a * lo.log_gprime[i] + s * s * lo.schwarz[i] / 6.0 + s * a * lo.preschwarz[i]
        })
        .sum()
}

/// Closed-form covariance factor for explicit `(α, s)` at the state's geometric data.
pub fn closed_form_f(lo: &LoewnerState, alpha: &[Complex]) -> Complex {
    closed_form_log_f(lo, alpha).exp()
}

/// `d log τ/dt = Σ[ℓ₁/x − ℓ₂/x² + ℓ₃²/(8S²x²)]`.
pub fn tau_rate(lo: &LoewnerState, fam: &LaxFamily) -> Result<Complex, MartingaleError> {
    check_live(lo, fam)?;
    let ell = fam.trace_square_coeffs().ell;
    let mut acc = c(0.0, 0.0);
    for (i, l) in ell.iter().enumerate() {
        let s = lo.birkhoff[i];
        if s.norm() == 0.0 {
            return Err(IsoError::ZeroBirkhoff(i).into());
        }
        let w = (lo.lambda_t[i] - lo.z).inv();
        acc += l[0] * w - l[1] * w * w + l[2] * l[2] * w * w / (s * s * 8.0);
    }
    Ok(acc)
}

/// Ledger with the κ = 4 identity; see [`drift_ledger_kappa`].
pub fn drift_ledger(lo: &LoewnerState, fam: &LaxFamily) -> Result<DriftLedger, MartingaleError> {
    drift_ledger_kappa(lo, fam, 4.0)
}

pub fn drift_ledger_kappa(lo: &LoewnerState, fam: &LaxFamily, kappa: f64) -> Result<DriftLedger, MartingaleError> {
    check_live(lo, fam)?;
    let a = fam.lax_eval(c(lo.z, 0.0))?;
    let tr_a2 = trace_product(&a, &a);
    let rate_f = covariance_rate(lo, fam)?;
    let rate_tau = tau_rate(lo, fam)?;
    Ok(DriftLedger { tr_a2, rate_f, rate_tau, residual: tr_a2 * (kappa / 4.0) + rate_f + rate_tau })
}

/// Loewner flow, Lax family and observable advanced together.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledFlow {
    pub lo: LoewnerState,
    pub fam: LaxFamily,
    pub ms: MartingaleState,
    pub kappa: f64,
    /// κ used in the ledger residual: the driving's κ when stochastic, 4 otherwise.
    pub ledger_kappa: f64,
    pub control: StepControl,
    /// Bound on `‖A(Z)‖·√(κ·dt)` for one Euler–Maruyama step of `Y`.
    pub y_step_limit: f64,
    /// Running maxima of the relative ledger residual and of `|αᵢ(t) − αᵢ(0)|`.
    pub max_ledger: f64,
    pub max_alpha_drift: f64,
    /// Running maximum of `|log F − closed form|`.
    pub max_f_mismatch: f64,
}

impl CoupledFlow {
    pub fn new(fam: &LaxFamily, path: &DrivingPath, control: &StepControl) -> Result<Self, MartingaleError> {
        let p0 = path.initial_point();
        let mut lo = LoewnerState::new(&fam.lambda, &fam.s, p0.z, p0.xi)?;
        if let Some(g) = control.guard {
            lo.guard = g;
        }
        let kappa = path.spec().kappa();
        let ledger_kappa = match path.spec().kind {
            DrivingKind::Zero | DrivingKind::Table { .. } => 4.0,
            _ => kappa,
        };
        let mut ms = MartingaleState::initial(p0.xi.is_some());
        ms.ledger = drift_ledger_kappa(&lo, fam, ledger_kappa)?;
        let mut out = Self {
            lo,
            fam: fam.clone(),
            ms,
            kappa,
            ledger_kappa,
            control: *control,
            y_step_limit: 0.25,
            max_ledger: 0.0,
            max_alpha_drift: 0.0,
            max_f_mismatch: 0.0,
        };
        out.max_ledger = out.ms.ledger.relative();
        Ok(out)
    }

    fn pack(&self) -> Vec<Complex> {
        let n = self.fam.n();
        let mut y = Vec::with_capacity(SLOTS * n + 8 * n + 6);
        self.lo.pack(&mut y);
        for i in 0..n {
            push_mat(&mut y, &self.fam.a0[i]);
            push_mat(&mut y, &self.fam.a1[i]);
        }
        y.push(self.ms.log_f);
        y.push(self.ms.log_tau);
        if let Some(t) = &self.ms.ytilde_inv {
            push_mat(&mut y, t);
        }
        y
    }

    fn stage_family(&self, y: &[Complex]) -> LaxFamily {
        let n = self.fam.n();
        let off = SLOTS * n;
        let lambda = (0..n).map(|i| y[SLOTS * i]).collect();
        let s = (0..n).map(|i| y[SLOTS * i + 5]).collect();
        let a0 = (0..n).map(|i| read_mat(y, off + 8 * i)).collect();
        let a1 = (0..n).map(|i| read_mat(y, off + 8 * i + 4)).collect();
        self.fam.with_state(lambda, s, a0, a1)
    }

    fn rhs(&self, inc: &Increment, th: f64, y: &[Complex]) -> Result<Vec<Complex>, MartingaleError> {
        let n = self.fam.n();
        let z = inc.z_at(th);
        if !self.lo.stage_ok(y, z) {
            return Err(FlowError::StepRejected.into());
        }
        let mut out = vec![c(0.0, 0.0); y.len()];
        for i in 0..n {
            flow_rhs(&y[SLOTS * i..SLOTS * (i + 1)], z, &mut out[SLOTS * i..SLOTS * (i + 1)]);
        }
        let fam = self.stage_family(y);
        let dl: Vec<Complex> = (0..n).map(|i| out[SLOTS * i]).collect();
        let ds: Vec<Complex> = (0..n).map(|i| out[SLOTS * i + 5]).collect();
        let off = SLOTS * n;
        for (i, (d0, d1)) in fam.schlesinger_rhs(&dl, &ds)?.iter().enumerate() {
            out[off + 8 * i..off + 8 * i + 4].copy_from_slice(&d0.entries());
            out[off + 8 * i + 4..off + 8 * i + 8].copy_from_slice(&d1.entries());
        }
        let off = off + 8 * n;
        out[off] = rate_f_terms(&fam.alpha, &fam.s, &fam.lambda, z);
        out[off + 1] = fam.tau_increment(&dl, &ds)?;
        if let (Some(xi), Some(dxi)) = (inc.xi_at(th), inc.dxi) {
            let xi = c(xi, 0.0);
            let mut gen = fam.lax_eval(xi)? * (dxi / inc.dt);
            for i in 0..n {
                gen += fam.deformation_u(xi, i)? * dl[i] + fam.deformation_v(xi, i)? * ds[i];
            }
            let t = read_mat(y, off + 2);
            out[off + 2..off + 6].copy_from_slice(&(-(t * gen)).entries());
        }
        Ok(out)
    }

    fn y_step_too_coarse(&self, a: &Mat2C, dt: f64) -> bool {
        a.frobenius_norm() * (self.kappa.max(1.0) * dt).sqrt() > self.y_step_limit
    }

    fn stop(&mut self, reason: StopReason) -> StepOutcome {
        self.lo.stopped = Some(reason);
        StepOutcome::Stop
    }

    /// One substep; see the module docs for the scheme.
    pub fn advance(&mut self, inc: &Increment) -> Result<StepOutcome, MartingaleError> {
        if self.lo.stopped.is_some() {
            return Err(MartingaleError::Stopped);
        }
        if inc.dt == 0.0 {
            return Ok(StepOutcome::Continue);
        }
        let reason = if inc.crossed { StopReason::ContinuationThreshold } else { StopReason::Swallow };
        let za = c(inc.z, 0.0);
        let a = self.fam.lax_eval(za)?;
        if self.y_step_too_coarse(&a, inc.dt) && inc.finest {
            return Ok(self.stop(reason));
        }
        let y0 = self.pack();
        let y1 = match rk4_step(&y0, inc.dt, |th, y| self.rhs(inc, th, y)) {
            Ok(v) if v.iter().all(|x| x.re.is_finite() && x.im.is_finite()) => v,
            Ok(_) | Err(MartingaleError::Flow(FlowError::StepRejected)) => {
                return Ok(if inc.finest { self.stop(reason) } else { StepOutcome::Rejected });
            }
            Err(e) => return Err(e),
        };
        let n = self.fam.n();
        let dza = self.fam.lax_dz(za)?;
        let step = Mat2C::identity() + a * inc.dz + dza * ((self.kappa / 2.0 - 2.0) * inc.dt);
        self.ms.y_hat = step * self.ms.y_hat;
        self.ms.log_y += trace_product(&a, &a) * (self.kappa / 4.0 * inc.dt);
        let norm = self.ms.y_hat.frobenius_norm();
        if !(1e-4..=1e4).contains(&norm) && norm > 0.0 && norm.is_finite() {
            self.ms.y_hat = self.ms.y_hat / norm;
            self.ms.log_y += norm.ln();
        }

        self.lo.unpack(&y1);
        self.lo.finish_step(inc);
        self.fam = self.stage_family(&y1);
        let off = (SLOTS + 8) * n;
        self.ms.log_f = y1[off];
        self.ms.log_tau = y1[off + 1];
        if self.ms.ytilde_inv.is_some() {
            self.ms.ytilde_inv = Some(read_mat(&y1, off + 2));
        }
        self.ms.t = self.lo.t;
        self.ms.reassemble();

        let stopped = self.lo.stopped.take();
        self.ms.ledger = drift_ledger_kappa(&self.lo, &self.fam, self.ledger_kappa)?;
        self.lo.stopped = stopped;
        self.max_ledger = self.max_ledger.max(self.ms.ledger.relative());
        for (a_now, a0) in self.fam.alpha_now().iter().zip(&self.fam.alpha) {
            self.max_alpha_drift = self.max_alpha_drift.max((a_now - a0).norm());
        }
        let cf = closed_form_log_f(&self.lo, &self.fam.alpha);
        self.max_f_mismatch = self.max_f_mismatch.max((cf - self.ms.log_f).norm());
        if !self.ms.m.is_finite() {
            return Err(MartingaleError::InvalidConfig("observable overflowed".into()));
        }
        Ok(if self.lo.stopped.is_some() { StepOutcome::Stop } else { StepOutcome::Continue })
    }
}

/// One recorded time slice of the observable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableSample {
    pub t: f64,
    pub z: f64,
    pub m: Mat2C,
    pub log_f: Complex,
    pub log_tau: Complex,
    pub ledger: DriftLedger,
    pub alpha_drift: f64,
    pub stopped: Option<StopReason>,
}

struct Recorder<'a> {
    flow: CoupledFlow,
    samples: Option<&'a mut Vec<ObservableSample>>,
}

impl Recorder<'_> {
    fn record(&mut self) {
        if let Some(out) = self.samples.as_deref_mut() {
            let f = &self.flow;
            let drift = f
                .fam
                .alpha_now()
                .iter()
                .zip(&f.fam.alpha)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            out.push(ObservableSample {
                t: f.lo.t,
                z: f.lo.z,
                m: f.ms.m,
                log_f: f.ms.log_f,
                log_tau: f.ms.log_tau,
                ledger: f.ms.ledger,
                alpha_drift: drift,
                stopped: f.lo.stopped,
            });
        }
    }
}

impl PathStepper for Recorder<'_> {
    type Error = MartingaleError;

    fn wants_split(&self, inc: &Increment) -> bool {
        let f = &self.flow;
        if f.control.too_coarse(inc, increment_distance(&f.lo, inc)) {
            return true;
        }
        match f.fam.lax_eval(c(inc.z, 0.0)) {
            Ok(a) => f.y_step_too_coarse(&a, inc.dt),
            Err(_) => true,
        }
    }

    fn advance(&mut self, inc: &Increment) -> Result<StepOutcome, MartingaleError> {
        let out = self.flow.advance(inc)?;
        if out == StepOutcome::Stop {
            self.record();
        }
        Ok(out)
    }

    fn on_grid(&mut self, _t: f64) -> Result<(), MartingaleError> {
        self.record();
        Ok(())
    }
}

/// Runs the coupled system along one path; optionally records every grid time.
pub fn run_observable(
    fam: &LaxFamily,
    spec: &DrivingSpec,
    control: &StepControl,
    samples: Option<&mut Vec<ObservableSample>>,
) -> Result<CoupledFlow, MartingaleError> {
    let path = DrivingPath::new(spec).map_err(FlowError::from)?;
    let flow = CoupledFlow::new(fam, &path, control)?;
    let mut rec = Recorder { flow, samples };
    rec.record();
    walk(&path, &mut rec, control.walk_options())?;
    Ok(rec.flow)
}

/// Scalar trajectory `Tr(Ỹ⁻¹Y)·F·τ` for an `SLE_KAPPA_RHO` driving.
pub fn sle4_rho_observable(
    fam: &LaxFamily,
    spec: &DrivingSpec,
    control: &StepControl,
) -> Result<Vec<(f64, Complex)>, MartingaleError> {
    if !matches!(spec.kind, DrivingKind::SleKappaRho { .. }) {
        return Err(MartingaleError::InvalidConfig("driving must be SLE_KAPPA_RHO".into()));
    }
    let mut samples = Vec::new();
    run_observable(fam, spec, control, Some(&mut samples))?;
    Ok(samples.iter().map(|s| (s.t, s.m.trace())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatStats {
    pub a11: Complex,
    pub a12: Complex,
    pub a21: Complex,
    pub a22: Complex,
    pub trace: Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
    pub kappa: f64,
    pub mean: MatStats,
    /// Componentwise standard errors (real and imaginary parts separately).
    pub stderr: MatStats,
    /// `Tr M₀`.
    pub initial_trace: Complex,
    pub stopped_fraction: f64,
    pub ledger_max_residual: f64,
    pub alpha_max_drift: f64,
}

impl McReport {
    /// `|mean Tr M − Tr M₀|` in units of its standard error (per component, worst case).
    pub fn trace_z_score(&self) -> f64 {
        let d = self.mean.trace - self.initial_trace;
        let zr = if self.stderr.trace.re > 0.0 { d.re.abs() / self.stderr.trace.re } else { d.re.abs() * f64::INFINITY };
        let zi = if self.stderr.trace.im > 0.0 { d.im.abs() / self.stderr.trace.im } else { d.im.abs() * f64::INFINITY };
        zr.max(zi).max(0.0)
    }

    /// `|mean Tr M − Tr M₀| ≤ k·stderr` for both real and imaginary parts.
    pub fn within(&self, k: f64) -> bool {
        let d = self.mean.trace - self.initial_trace;
        d.re.abs() <= k * self.stderr.trace.re && d.im.abs() <= k * self.stderr.trace.im
    }
}

/// Result of one Monte Carlo path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathResult {
    pub m: Mat2C,
    pub stopped: bool,
    pub t_end: f64,
    pub ledger: f64,
    pub alpha_drift: f64,
}

/// Runs `paths` independent copies; path `k` uses seed `seed ⊕ splitmix64(k)`.
pub fn mc_paths(
    fam: &LaxFamily,
    spec: &DrivingSpec,
    paths: usize,
    control: &StepControl,
) -> Result<Vec<PathResult>, MartingaleError> {
    spec.validate().map_err(FlowError::from)?;
    (0..paths)
        .into_par_iter()
        .map(|k| {
            let mut s = spec.clone();
            s.seed = spec.seed ^ splitmix64(k as u64);
            let f = run_observable(fam, &s, control, None)?;
            Ok(PathResult {
                m: f.ms.m,
                stopped: f.lo.stopped.is_some(),
                t_end: f.lo.t,
                ledger: f.max_ledger,
                alpha_drift: f.max_alpha_drift,
            })
        })
        .collect()
}

fn mean_and_stderr(values: impl Iterator<Item = Complex> + Clone, n: usize) -> (Complex, Complex) {
    let nf = n as f64;
    let mean = values.clone().fold(c(0.0, 0.0), |a, v| a + v) / nf;
    let (vr, vi) = values.fold((0.0, 0.0), |(r, i), v| (r + (v.re - mean.re).powi(2), i + (v.im - mean.im).powi(2)));
    let denom = (nf - 1.0).max(1.0) * nf;
    (mean, c((vr / denom).sqrt(), (vi / denom).sqrt()))
}

/// Aggregates path results in index order.
pub fn summarize(spec: &DrivingSpec, results: &[PathResult]) -> McReport {
    let n = results.len();
    let pick = |f: fn(&Mat2C) -> Complex| mean_and_stderr(results.iter().map(move |r| f(&r.m)), n);
    let (m11, s11) = pick(|m| m.a11);
    let (m12, s12) = pick(|m| m.a12);
    let (m21, s21) = pick(|m| m.a21);
    let (m22, s22) = pick(|m| m.a22);
    let (mt, st) = pick(|m| m.trace());
    McReport {
        n,
        t: spec.horizon,
        dt: spec.dt,
        seed: spec.seed,
        kappa: spec.kappa(),
        mean: MatStats { a11: m11, a12: m12, a21: m21, a22: m22, trace: mt },
        stderr: MatStats { a11: s11, a12: s12, a21: s21, a22: s22, trace: st },
        initial_trace: c(2.0, 0.0),
        stopped_fraction: results.iter().filter(|r| r.stopped).count() as f64 / n.max(1) as f64,
        ledger_max_residual: results.iter().map(|r| r.ledger).fold(0.0, f64::max),
        alpha_max_drift: results.iter().map(|r| r.alpha_drift).fold(0.0, f64::max),
    }
}

pub fn mc_expectation(
    fam: &LaxFamily,
    spec: &DrivingSpec,
    paths: usize,
    control: &StepControl,
) -> Result<McReport, MartingaleError> {
    if paths < 100 {
        return Err(MartingaleError::InvalidConfig(format!("need at least 100 paths, got {paths}")));
    }
    let results = mc_paths(fam, spec, paths, control)?;
    Ok(summarize(spec, &results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isomonodromy::diagonal_example;
    use crate::loewner::run_trajectory;

    fn close(a: Complex, b: Complex, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn closed_form_covariance_factor() {
        let states = run_trajectory(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[c(1.0, 0.0)], &StepControl::default())
            .unwrap();
        let end = states.last().unwrap();
        let f = closed_form_f(end, &[c(0.5, 0.0)]);
        let expected = (2.0 / 8f64.sqrt()).powf(0.25) * (-0.28125 / 6.0 + 0.5 * 0.25f64).exp();
        assert!(close(f, c(expected, 0.0), 1e-9));
        assert!((expected - 0.991518).abs() < 1e-6);
        let start = &states[0];
        assert_eq!(closed_form_f(start, &[c(0.5, 0.0)]), c(1.0, 0.0));
    }

    #[test]
    fn integrated_rate_reproduces_closed_form() {
        let fam = diagonal_example();
        let f = run_observable(&fam, &DrivingSpec::zero(1e-3, 1.0), &StepControl::default(), None).unwrap();
        let cf = closed_form_log_f(&f.lo, &fam.alpha);
        assert!(close(f.ms.log_f, cf, 1e-6));
        assert!(f.max_f_mismatch < 1e-6);
    }

    #[test]
    fn empty_family_rates_vanish() {
        let lo = LoewnerState::new(&[], &[], 0.0, None).unwrap();
        let fam = LaxFamily::empty();
        assert_eq!(covariance_rate(&lo, &fam).unwrap(), c(0.0, 0.0));
        assert_eq!(tau_rate(&lo, &fam).unwrap(), c(0.0, 0.0));
        assert_eq!(drift_ledger(&lo, &fam).unwrap().residual, c(0.0, 0.0));
        let f = run_observable(&fam, &DrivingSpec::brownian(4.0, 1e-3, 0.2, 1), &StepControl::default(), None).unwrap();
        assert_eq!(f.ms.m, Mat2C::identity());
    }

    #[test]
    fn tau_rate_matches_hamiltonian_contraction() {
        let fam = LaxFamily::random(2, 41);
        let lo = LoewnerState::new(&fam.lambda, &fam.s, 0.3, None).unwrap();
        let dl: Vec<Complex> = lo.lambda_t.iter().map(|l| (l - lo.z).inv() * 2.0).collect();
        let ds: Vec<Complex> =
            lo.lambda_t.iter().zip(&lo.birkhoff).map(|(l, s)| -s * (l - lo.z).inv().powi(2) * 2.0).collect();
        let a = tau_rate(&lo, &fam).unwrap();
        let b = fam.tau_increment(&dl, &ds).unwrap();
        assert!(close(a, b, 1e-10 * a.norm().max(1.0)));
    }

    #[test]
    fn ledger_vanishes_on_diagonal_family() {
        let fam = diagonal_example();
        let f = run_observable(&fam, &DrivingSpec::zero(1e-3, 1.0), &StepControl::default(), None).unwrap();
        assert!(f.max_ledger < 1e-9, "{}", f.max_ledger);
        assert!(close(tau_rate(&f.lo, &f.fam).unwrap(), c(0.0, 0.0), 1e-12));
    }

    #[test]
    fn ledger_small_on_random_family() {
        let fam = LaxFamily::random(2, 2);
        let f = run_observable(&fam, &DrivingSpec::brownian(4.0, 1e-3, 0.3, 3), &StepControl::default(), None).unwrap();
        assert!(f.max_ledger < 1e-6, "{}", f.max_ledger);
        assert!(f.max_alpha_drift < 1e-6);
    }

    #[test]
    fn wrong_kappa_shows_in_ledger() {
        let fam = diagonal_example();
        let f = run_observable(&fam, &DrivingSpec::brownian(2.0, 1e-3, 0.1, 3), &StepControl::default(), None).unwrap();
        assert!(f.max_ledger > 1e-2);
    }

    #[test]
    fn deterministic_y_is_exponential_of_integral() {
        // Z ≡ 0 with κ = 4 in the scheme: Y ← (I − 0)(…)Y, log-scale accumulates ∫Tr A² dt.
        let fam = diagonal_example();
        let spec = DrivingSpec::zero(1e-3, 0.5);
        let path = DrivingPath::new(&spec).unwrap();
        let mut flow = CoupledFlow::new(&fam, &path, &StepControl::default()).unwrap();
        flow.kappa = 4.0;
        let mut integral = c(0.0, 0.0);
        let mut inc = Increment::at(&path.initial_point());
        inc.dt = 1e-3;
        for k in 0..500 {
            inc.t = k as f64 * 1e-3;
            let a = flow.fam.lax_eval(c(0.0, 0.0)).unwrap();
            integral += trace_product(&a, &a) * 1e-3;
            flow.advance(&inc).unwrap();
        }
        assert!(close(flow.ms.log_y, integral, 1e-12));
        assert_eq!(flow.ms.y_hat, Mat2C::identity());
        let y = flow.ms.y();
        assert!(close(y.a11, integral.exp(), 1e-7));
    }

    #[test]
    fn zero_step_is_identity() {
        let fam = diagonal_example();
        let spec = DrivingSpec::brownian(4.0, 1e-3, 0.1, 5);
        let path = DrivingPath::new(&spec).unwrap();
        let mut flow = CoupledFlow::new(&fam, &path, &StepControl::default()).unwrap();
        let before = flow.clone();
        flow.advance(&Increment::at(&path.initial_point())).unwrap();
        assert_eq!(flow, before);
        assert_eq!(flow.ms.m, Mat2C::identity());
    }

    #[test]
    fn reassembly_identity() {
        let fam = LaxFamily::random(1, 9);
        let f = run_observable(&fam, &DrivingSpec::brownian(4.0, 1e-3, 0.2, 8), &StepControl::default(), None).unwrap();
        let expect = f.ms.y() * (f.ms.log_f + f.ms.log_tau).exp();
        assert!((expect - f.ms.m).frobenius_norm() <= 1e-12 * f.ms.m.frobenius_norm().max(1.0));
        assert!(f.ms.y().det().norm() > 0.0);
    }

    #[test]
    fn force_point_observable_starts_at_two() {
        let fam = diagonal_example();
        let spec = DrivingSpec::new(DrivingKind::SleKappaRho { kappa: 4.0, rho: -2.0, xi0: 1.0 }, 1e-3, 0.05, 4);
        let traj = sle4_rho_observable(&fam, &spec, &StepControl::default()).unwrap();
        assert_eq!(traj[0], (0.0, c(2.0, 0.0)));
        assert!(traj.len() > 1);
        assert!(sle4_rho_observable(&fam, &DrivingSpec::zero(1e-3, 0.1), &StepControl::default()).is_err());
    }

    #[test]
    fn mc_without_punctures_is_exact() {
        let r = mc_expectation(&LaxFamily::empty(), &DrivingSpec::brownian(4.0, 1e-2, 0.1, 1), 100, &StepControl::default())
            .unwrap();
        assert_eq!(r.mean.trace, c(2.0, 0.0));
        assert_eq!(r.stderr.trace, c(0.0, 0.0));
        assert!(r.within(3.0));
        assert!(mc_expectation(&LaxFamily::empty(), &DrivingSpec::zero(0.1, 1.0), 10, &StepControl::default()).is_err());
    }

    #[test]
    fn mc_is_reproducible() {
        let fam = diagonal_example();
        let spec = DrivingSpec::brownian(4.0, 1e-2, 0.1, 77);
        let a = mc_expectation(&fam, &spec, 200, &StepControl::default()).unwrap();
        let b = mc_expectation(&fam, &spec, 200, &StepControl::default()).unwrap();
        assert_eq!(a, b);
    }
}
