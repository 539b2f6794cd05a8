//! Fuchsian approximants with coalescing simple poles and their convergence to a pole of
//! order `k + 1`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{c, Complex, Mat2C};
use crate::loewner::{run_trajectory, DrivingSpec, FlowError, StepControl};
use crate::numerics::loglog_slope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfluenceError {
    #[error("rate of confluence s vanishes")]
    ZeroRate,
    #[error("invalid confluence spec: {0}")]
    InvalidSpec(String),
    #[error("moment system is ill-conditioned (relative residual {0:e})")]
    IllConditioned(f64),
    #[error("mismatch vanishes on the ladder; slope undefined")]
    DegenerateFit,
    #[error("probe {probe} is within {min_distance:e} of the coalescing poles")]
    ProbeTooClose { probe: Complex, min_distance: f64 },
    #[error("evaluation point {0} hits a pole")]
    PoleHit(Complex),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfluenceSpec {
    #[serde(with = "mat_serde", rename = "target_A0")]
    pub target_a0: Mat2C,
    #[serde(with = "mat_serde", rename = "target_A1")]
    pub target_a1: Mat2C,
    pub s: Complex,
    pub epsilon: f64,
    pub base_lambda: Complex,
    #[serde(default = "one")]
    pub k: usize,
}

fn one() -> usize {
    1
}

mod mat_serde {
    use crate::algebra::Mat2C;
    use crate::isomonodromy::{mat_from_json, mat_to_json, MatJson};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat2C, s: S) -> Result<S::Ok, S::Error> {
        mat_to_json(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat2C, D::Error> {
        MatJson::deserialize(d).map(|j| mat_from_json(&j))
    }
}

impl ConfluenceSpec {
    pub fn diagonal(epsilon: f64) -> Self {
        Self {
            target_a0: Mat2C::real(0.5, 0.0, 0.0, -0.5),
            target_a1: Mat2C::real(-1.0, 0.0, 0.0, 1.0),
            s: c(1.0, 0.0),
            epsilon,
            base_lambda: c(0.0, 0.0),
            k: 1,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfluenceError> {
        if self.s.norm() == 0.0 {
            return Err(ConfluenceError::ZeroRate);
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ConfluenceError::InvalidSpec("epsilon must be positive and finite".into()));
        }
        if self.k == 0 {
            return Err(ConfluenceError::InvalidSpec("rank k must be at least 1".into()));
        }
        Ok(())
    }

    /// `ε′ = ε·s`, the separation of consecutive simple poles.
    pub fn separation(&self) -> Complex {
        self.s * self.epsilon
    }

    /// Simple poles `λ + ε(j−1)s`, `j = 1..=k+1`.
    pub fn nodes(&self) -> Vec<Complex> {
        (0..=self.k).map(|j| self.base_lambda + self.separation() * j as f64).collect()
    }
}

/// One residue of a Fuchsian approximant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplePole {
    pub residue: Mat2C,
    pub lambda: Complex,
}

/// `A₂ = A_{1,1}/ε′` at `λ + ε′`, `A₁ = A_{1,0} − A₂` at `λ`.
pub fn split_double_pole(spec: &ConfluenceSpec) -> Result<[SimplePole; 2], ConfluenceError> {
    spec.validate()?;
    if spec.k != 1 {
        return Err(ConfluenceError::InvalidSpec("split_double_pole needs k = 1".into()));
    }
    let ep = spec.separation();
    let a2 = spec.target_a1 / ep;
    let a1 = spec.target_a0 - a2;
    Ok([
        SimplePole { residue: a1, lambda: spec.base_lambda },
        SimplePole { residue: a2, lambda: spec.base_lambda + ep },
    ])
}

/// Solves `Σⱼ ((j−1)εs)^m Aⱼ = A_{1,m}`, `m = 0..=k`, entrywise.
pub fn vandermonde_split(spec: &ConfluenceSpec, targets: &[Mat2C]) -> Result<Vec<SimplePole>, ConfluenceError> {
    spec.validate()?;
    let k = spec.k;
    if targets.len() != k + 1 {
        return Err(ConfluenceError::InvalidSpec(format!("expected {} targets, got {}", k + 1, targets.len())));
    }
    let ep = spec.separation();
    let v = DMatrix::from_fn(k + 1, k + 1, |m, j| (ep * j as f64).powu(m as u32));
    let rhs = DMatrix::from_fn(k + 1, 4, |m, e| targets[m].entries()[e]);
    let sol = v.clone().lu().solve(&rhs).ok_or(ConfluenceError::IllConditioned(f64::INFINITY))?;
    let scale = targets.iter().map(|t| t.frobenius_norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let resid = (&v * &sol - &rhs).norm() / scale;
    if !(resid <= 1e-8) {
        return Err(ConfluenceError::IllConditioned(resid));
    }
    Ok(spec
        .nodes()
        .into_iter()
        .enumerate()
        .map(|(j, lambda)| SimplePole {
            residue: Mat2C::new(sol[(j, 0)], sol[(j, 1)], sol[(j, 2)], sol[(j, 3)]),
            lambda,
        })
        .collect())
}

/// `Σⱼ Aⱼ/(z − λⱼ)`.
pub fn fuchsian_eval(poles: &[SimplePole], z: Complex) -> Result<Mat2C, ConfluenceError> {
    poles.iter().try_fold(Mat2C::zero(), |acc, p| {
        let d = z - p.lambda;
        if d.norm() < 1e-12 {
            return Err(ConfluenceError::PoleHit(z));
        }
        Ok(acc + p.residue / d)
    })
}

/// `Σ_m A_{1,m}/(z − λ)^{m+1}`.
pub fn irregular_eval(lambda: Complex, targets: &[Mat2C], z: Complex) -> Result<Mat2C, ConfluenceError> {
    let d = z - lambda;
    if d.norm() < 1e-12 {
        return Err(ConfluenceError::PoleHit(z));
    }
    let w = d.inv();
    let mut acc = Mat2C::zero();
    let mut p = w;
    for t in targets {
        acc += *t * p;
        p *= w;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub eps: Vec<f64>,
    pub mismatch: Vec<f64>,
    pub slope: f64,
}

/// Targets `[A_{1,0}, A_{1,1}, 0, …]` padded to length `k + 1`.
pub fn default_targets(spec: &ConfluenceSpec) -> Vec<Mat2C> {
    let mut t = vec![spec.target_a0, spec.target_a1];
    t.resize(spec.k + 1, Mat2C::zero());
    t.truncate(spec.k + 1);
    t
}

/// Max-over-probes Frobenius mismatch between approximant and target at one ε.
pub fn mismatch_at(spec: &ConfluenceSpec, probes: &[Complex]) -> Result<f64, ConfluenceError> {
    let targets = default_targets(spec);
    let poles = if spec.k == 1 { split_double_pole(spec)?.to_vec() } else { vandermonde_split(spec, &targets)? };
    let margin = 10.0 * spec.epsilon * spec.s.norm() * spec.k as f64;
    let mut worst: f64 = 0.0;
    for &z in probes {
        let d = (z - spec.base_lambda).norm();
        if d < margin {
            return Err(ConfluenceError::ProbeTooClose { probe: z, min_distance: d });
        }
        let diff = fuchsian_eval(&poles, z)? - irregular_eval(spec.base_lambda, &targets, z)?;
        worst = worst.max(diff.frobenius_norm());
    }
    Ok(worst)
}

pub const DEFAULT_LADDER: [f64; 5] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

/// Log-log slope of the mismatch over `eps_ladder`.
pub fn confluence_rate(
    spec: &ConfluenceSpec,
    probes: &[Complex],
    eps_ladder: &[f64],
) -> Result<RateReport, ConfluenceError> {
    let mismatch = eps_ladder
        .par_iter()
        .map(|&e| mismatch_at(&spec.with_epsilon(e), probes))
        .collect::<Result<Vec<_>, _>>()?;
    if mismatch.iter().any(|m| *m == 0.0) {
        return Err(ConfluenceError::DegenerateFit);
    }
    let slope = loglog_slope(eps_ladder, &mismatch).ok_or(ConfluenceError::DegenerateFit)?;
    Ok(RateReport { eps: eps_ladder.to_vec(), mismatch, slope })
}

/// Difference quotient `(Λ̃ − Λ)/ε` of two punctures `λ`, `λ + εs` under one driving path,
/// paired with the Birkhoff value `g′(λ)·s` of the first.
pub fn loewner_separation(
    driving: &DrivingSpec,
    lambda: Complex,
    s: Complex,
    eps: f64,
    control: &StepControl,
) -> Result<(Complex, Complex), ConfluenceError> {
    let pts = [lambda, lambda + s * eps];
    let states = run_trajectory(driving, &pts, &[s, s], control)?;
    let end = states.last().expect("trajectory has an initial state");
    Ok(((end.lambda_t[1] - end.lambda_t[0]) / eps, end.birkhoff[0]))
}
