//! Driving processes and the adaptive dyadic walker that feeds them to integrators.
//!
//! A Brownian path is a pure function of its seed: base increments on the root grid come
//! from one ChaCha stream, and every dyadic midpoint is drawn from a stream keyed by
//! `(seed, base step, level, index)`. Refining `dt` by powers of two therefore refines the
//! same path instead of resampling it.
//!
//! For `SLE_KAPPA_RHO` the gap `Ξ − Z = ξ − √κ·B` is a function of the Brownian path alone,
//! so the force point is integrated exactly against the piecewise-linear interpolant of `B`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::mix_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum DrivingKind {
    Zero,
    Table { samples: Vec<f64> },
    Brownian { kappa: f64 },
    SleKappaRho { kappa: f64, rho: f64, xi0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingSpec {
    pub kind: DrivingKind,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Grid on which base increments are drawn; `dt` must be `root_dt / 2^m`. Defaults to `dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_dt: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrivingError {
    #[error("invalid driving spec: {0}")]
    InvalidSpec(String),
}

impl DrivingSpec {
    pub fn new(kind: DrivingKind, dt: f64, horizon: f64, seed: u64) -> Self {
        Self { kind, dt, horizon, seed, root_dt: None }
    }

    pub fn zero(dt: f64, horizon: f64) -> Self {
        Self::new(DrivingKind::Zero, dt, horizon, 0)
    }

    pub fn brownian(kappa: f64, dt: f64, horizon: f64, seed: u64) -> Self {
        Self::new(DrivingKind::Brownian { kappa }, dt, horizon, seed)
    }

    /// Same path, `dt` halved `levels` times.
    pub fn refined(&self, levels: u32) -> Self {
        let mut out = self.clone();
        out.root_dt = Some(self.root_dt.unwrap_or(self.dt));
        out.dt = self.dt / f64::from(1u32 << levels);
        out
    }

    pub fn kappa(&self) -> f64 {
        match self.kind {
            DrivingKind::Zero | DrivingKind::Table { .. } => 0.0,
            DrivingKind::Brownian { kappa } | DrivingKind::SleKappaRho { kappa, .. } => kappa,
        }
    }

    /// This path sampled on its `dt` grid, as a `TABLE` driving with that grid as root.
    pub fn frozen(&self) -> Result<Self, DrivingError> {
        let samples = sample_driving(self)?.z;
        Ok(Self { kind: DrivingKind::Table { samples }, root_dt: Some(self.dt), ..self.clone() })
    }

    /// Number of dyadic levels between the root grid and `dt`.
    pub fn refine_levels(&self) -> Result<u32, DrivingError> {
        let Some(root) = self.root_dt else { return Ok(0) };
        if !(root > 0.0) || !root.is_finite() {
            return Err(DrivingError::InvalidSpec("root_dt must be positive".into()));
        }
        let ratio = root / self.dt;
        let m = ratio.log2().round();
        if m < 0.0 || m > 40.0 || (ratio - m.exp2()).abs() > 1e-9 * ratio {
            return Err(DrivingError::InvalidSpec(format!(
                "dt = {} is not root_dt = {} divided by a power of two",
                self.dt, root
            )));
        }
        Ok(m as u32)
    }

    pub fn validate(&self) -> Result<(), DrivingError> {
        let bad = |m: &str| Err(DrivingError::InvalidSpec(m.to_string()));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive and finite");
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("T must be positive and finite");
        }
        self.refine_levels()?;
        match &self.kind {
            DrivingKind::Zero => {}
            DrivingKind::Table { samples } => {
                let need = self.root_steps() + 1;
                if samples.len() < need {
                    return Err(DrivingError::InvalidSpec(format!(
                        "TABLE needs {need} samples, got {}",
                        samples.len()
                    )));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return bad("TABLE samples must be finite");
                }
            }
            DrivingKind::Brownian { kappa } => {
                if !(*kappa >= 0.0) || !kappa.is_finite() {
                    return bad("kappa must be nonnegative");
                }
            }
            DrivingKind::SleKappaRho { kappa, rho, xi0 } => {
                if !(*kappa >= 0.0) || !kappa.is_finite() || !rho.is_finite() {
                    return bad("kappa must be nonnegative and rho finite");
                }
                if *xi0 == 0.0 || !xi0.is_finite() {
                    return bad("xi0 must be nonzero and finite");
                }
            }
        }
        Ok(())
    }

    fn root_step(&self) -> f64 {
        self.root_dt.unwrap_or(self.dt)
    }

    fn root_steps(&self) -> usize {
        ((self.horizon / self.root_step()) - 1e-9).ceil().max(1.0) as usize
    }
}

/// A point of the driving path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub b: f64,
    pub z: f64,
    pub xi: Option<f64>,
    /// Position inside the current root step, in `[0, 1]`.
    pub frac: f64,
}

/// Driving increment over one (sub)step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub t: f64,
    pub dt: f64,
    pub z: f64,
    pub dz: f64,
    pub b: f64,
    pub db: f64,
    pub xi: Option<f64>,
    pub dxi: Option<f64>,
    /// The interpolated gap `Ξ − Z` changes sign inside the step.
    pub crossed: bool,
    pub level: u32,
    /// No further bisection is available.
    pub finest: bool,
}

impl Increment {
    /// Zero-length increment at a point.
    pub fn at(p: &PathPoint) -> Self {
        Self {
            t: p.t,
            dt: 0.0,
            z: p.z,
            dz: 0.0,
            b: p.b,
            db: 0.0,
            xi: p.xi,
            dxi: p.xi.map(|_| 0.0),
            crossed: false,
            level: 0,
            finest: true,
        }
    }

    /// Piecewise-linear driving value at fractional position `θ`.
    pub fn z_at(&self, theta: f64) -> f64 {
        self.z + theta * self.dz
    }

    pub fn xi_at(&self, theta: f64) -> Option<f64> {
        self.xi.map(|x| x + theta * self.dxi.unwrap_or(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct DrivingPath {
    spec: DrivingSpec,
    times: Vec<f64>,
    b: Vec<f64>,
    levels: u32,
}

impl DrivingPath {
    pub fn new(spec: &DrivingSpec) -> Result<Self, DrivingError> {
        spec.validate()?;
        let n = spec.root_steps();
        let h = spec.root_step();
        let times: Vec<f64> = (0..=n).map(|k| (k as f64 * h).min(spec.horizon)).collect();
        let mut b = vec![0.0; n + 1];
        if matches!(spec.kind, DrivingKind::Brownian { .. } | DrivingKind::SleKappaRho { .. }) {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for k in 0..n {
                let g: f64 = rng.sample(StandardNormal);
                b[k + 1] = b[k] + g * (times[k + 1] - times[k]).sqrt();
            }
        }
        Ok(Self { spec: spec.clone(), times, b, levels: spec.refine_levels()? })
    }

    pub fn spec(&self) -> &DrivingSpec {
        &self.spec
    }

    pub fn root_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Uniform dyadic levels implied by `dt` relative to the root grid.
    pub fn refine_levels(&self) -> u32 {
        self.levels
    }

    pub fn root_time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn root_b(&self, k: usize) -> f64 {
        self.b[k]
    }

    pub fn initial_point(&self) -> PathPoint {
        let (z, xi) = match &self.spec.kind {
            DrivingKind::Table { samples } => (samples[0], None),
            DrivingKind::SleKappaRho { xi0, .. } => (0.0, Some(*xi0)),
            _ => (0.0, None),
        };
        PathPoint { t: 0.0, b: 0.0, z, xi, frac: 0.0 }
    }

    /// Brownian bridge midpoint between `(t_l, b_l)` and `(t_r, b_r)` at a dyadic address.
    pub fn bridge_midpoint(&self, step: usize, level: u32, index: u64, b_l: f64, b_r: f64, h: f64) -> f64 {
        match self.spec.kind {
            DrivingKind::Brownian { .. } | DrivingKind::SleKappaRho { .. } => {
                let key = mix_key(&[self.spec.seed, step as u64, u64::from(level), index]);
                let g: f64 = ChaCha8Rng::seed_from_u64(key).sample(StandardNormal);
                0.5 * (b_l + b_r) + 0.5 * h.sqrt() * g
            }
            _ => 0.5 * (b_l + b_r),
        }
    }

    /// Path point reached from `a` at `(t, b)`, position `frac` inside root step `step`.
    /// The boolean flags a sign change of the force-point gap inside the substep.
    pub fn advance_point(&self, a: &PathPoint, step: usize, frac: f64, t: f64, b: f64) -> (PathPoint, bool) {
        let h = t - a.t;
        match &self.spec.kind {
            DrivingKind::Zero => (PathPoint { t, b, z: 0.0, xi: None, frac }, false),
            DrivingKind::Table { samples } => {
                let z = samples[step] + frac * (samples[step + 1] - samples[step]);
                (PathPoint { t, b, z, xi: None, frac }, false)
            }
            DrivingKind::Brownian { kappa } => {
                (PathPoint { t, b, z: kappa.sqrt() * b, xi: None, frac }, false)
            }
            DrivingKind::SleKappaRho { kappa, rho, xi0 } => {
                let sk = kappa.sqrt();
                let xi_a = a.xi.unwrap_or(*xi0);
                let c0 = xi0 - sk * a.b;
                let c1 = xi0 - sk * b;
                if c0 * c1 <= 0.0 {
                    return (PathPoint { t, b, z: xi_a - c1, xi: Some(xi_a), frac }, true);
                }
                let u = (c1 - c0) / c0;
                let integral = if u.abs() < 1e-8 {
                    h / c0 * (1.0 - 0.5 * u + u * u / 3.0)
                } else {
                    h / c0 * u.ln_1p() / u
                };
                let xi = xi_a - rho * integral;
                (PathPoint { t, b, z: xi - c1, xi: Some(xi), frac }, false)
            }
        }
    }
}

/// Outcome of one attempted substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Stop,
    /// Retry after bisection; must not be returned for `finest` increments.
    Rejected,
}

/// A system advanced by the walker.
pub trait PathStepper {
    type Error;
    /// Whether the substep should be bisected before being attempted.
    fn wants_split(&self, inc: &Increment) -> bool;
    fn advance(&mut self, inc: &Increment) -> Result<StepOutcome, Self::Error>;
    /// Called after each completed step of the output grid.
    fn on_grid(&mut self, _t: f64) -> Result<(), Self::Error> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkOptions {
    /// Extra adaptive levels permitted beyond the output grid.
    pub max_extra_levels: u32,
}

impl Default for WalkOptions {
    fn default() -> Self {
        Self { max_extra_levels: 16 }
    }
}

/// Drives `sys` along the whole path. Returns `true` when the horizon was reached.
pub fn walk<S: PathStepper>(path: &DrivingPath, sys: &mut S, opts: WalkOptions) -> Result<bool, S::Error> {
    let grid = path.refine_levels();
    let max_level = grid + opts.max_extra_levels;
    let mut p = path.initial_point();
    for k in 0..path.root_steps() {
        let t_end = path.root_time(k + 1);
        let b_end = path.root_b(k + 1);
        let span = Span { step: k, level: 0, index: 0, frac_l: 0.0, frac_r: 1.0, t_r: t_end, b_r: b_end };
        p.frac = 0.0;
        match walk_span(path, sys, &p, span, grid, max_level)? {
            Some(q) => p = q,
            None => return Ok(false),
        }
    }
    Ok(true)
}

#[derive(Clone, Copy)]
struct Span {
    step: usize,
    level: u32,
    index: u64,
    frac_l: f64,
    frac_r: f64,
    t_r: f64,
    b_r: f64,
}

fn walk_span<S: PathStepper>(
    path: &DrivingPath,
    sys: &mut S,
    a: &PathPoint,
    sp: Span,
    grid: u32,
    max_level: u32,
) -> Result<Option<PathPoint>, S::Error> {
    let (e, crossed) = path.advance_point(a, sp.step, sp.frac_r, sp.t_r, sp.b_r);
    let inc = Increment {
        t: a.t,
        dt: sp.t_r - a.t,
        z: a.z,
        dz: e.z - a.z,
        b: a.b,
        db: e.b - a.b,
        xi: a.xi,
        dxi: match (a.xi, e.xi) {
            (Some(x0), Some(x1)) => Some(x1 - x0),
            _ => None,
        },
        crossed,
        level: sp.level,
        finest: sp.level >= max_level,
    };
    let split = sp.level < grid || (sp.level < max_level && (crossed || sys.wants_split(&inc)));
    if !split {
        match sys.advance(&inc)? {
            StepOutcome::Continue => {
                if sp.level == grid {
                    sys.on_grid(e.t)?;
                }
                return Ok(Some(e));
            }
            StepOutcome::Stop => return Ok(None),
            StepOutcome::Rejected if sp.level < max_level => {}
            StepOutcome::Rejected => return Ok(None),
        }
    }
    let h = sp.t_r - a.t;
    let t_m = a.t + 0.5 * h;
    let b_m = path.bridge_midpoint(sp.step, sp.level + 1, 2 * sp.index + 1, a.b, sp.b_r, h);
    let frac_m = 0.5 * (sp.frac_l + sp.frac_r);
    let left = Span {
        level: sp.level + 1,
        index: 2 * sp.index,
        frac_r: frac_m,
        t_r: t_m,
        b_r: b_m,
        ..sp
    };
    let Some(m) = walk_span(path, sys, a, left, grid, max_level)? else {
        return Ok(None);
    };
    let right = Span { level: sp.level + 1, index: 2 * sp.index + 1, frac_l: frac_m, ..sp };
    let out = walk_span(path, sys, &m, right, grid, max_level)?;
    if let Some(q) = &out {
        if sp.level == grid {
            sys.on_grid(q.t)?;
        }
    }
    Ok(out)
}

/// Uniform samples of the driving path on the `dt` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrivingSamples {
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub b: Vec<f64>,
    pub db: Vec<f64>,
    pub xi: Option<Vec<f64>>,
}

struct Recorder {
    out: DrivingSamples,
}

impl PathStepper for Recorder {
    type Error = std::convert::Infallible;
    fn wants_split(&self, _inc: &Increment) -> bool {
        false
    }
    fn advance(&mut self, inc: &Increment) -> Result<StepOutcome, Self::Error> {
        if inc.crossed {
            return Ok(StepOutcome::Stop);
        }
        let o = &mut self.out;
        o.t.push(inc.t + inc.dt);
        o.z.push(inc.z + inc.dz);
        o.b.push(inc.b + inc.db);
        o.db.push(inc.db);
        if let (Some(xs), Some(x), Some(dx)) = (o.xi.as_mut(), inc.xi, inc.dxi) {
            xs.push(x + dx);
        }
        Ok(StepOutcome::Continue)
    }
}

/// Samples the driving process; for `SLE_KAPPA_RHO` the samples end at the continuation threshold.
pub fn sample_driving(spec: &DrivingSpec) -> Result<DrivingSamples, DrivingError> {
    let path = DrivingPath::new(spec)?;
    let p0 = path.initial_point();
    let mut rec = Recorder {
        out: DrivingSamples {
            t: vec![0.0],
            z: vec![p0.z],
            b: vec![0.0],
            db: vec![],
            xi: p0.xi.map(|x| vec![x]),
        },
    };
    let Ok(_) = walk(&path, &mut rec, WalkOptions { max_extra_levels: 0 });
    Ok(rec.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_path_has_expected_grid() {
        let s = sample_driving(&DrivingSpec::zero(0.01, 1.0)).unwrap();
        assert_eq!(s.t.len(), 101);
        assert!(s.z.iter().all(|&z| z == 0.0));
        assert!((s.t[100] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(sample_driving(&DrivingSpec::zero(0.0, 1.0)).is_err());
        assert!(sample_driving(&DrivingSpec::zero(0.1, -1.0)).is_err());
        let mut s = DrivingSpec::brownian(4.0, 0.1, 1.0, 1);
        s.root_dt = Some(0.3);
        assert!(sample_driving(&s).is_err());
        let s = DrivingSpec::new(DrivingKind::SleKappaRho { kappa: 4.0, rho: -2.0, xi0: 0.0 }, 0.1, 1.0, 1);
        assert!(sample_driving(&s).is_err());
    }

    #[test]
    fn brownian_is_deterministic_and_seed_dependent() {
        let a = sample_driving(&DrivingSpec::brownian(4.0, 1e-3, 0.5, 7)).unwrap();
        let b = sample_driving(&DrivingSpec::brownian(4.0, 1e-3, 0.5, 7)).unwrap();
        let c = sample_driving(&DrivingSpec::brownian(4.0, 1e-3, 0.5, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn brownian_increment_variance() {
        let dt = 1e-5;
        let n = 100_000;
        let s = sample_driving(&DrivingSpec::brownian(4.0, dt, n as f64 * dt, 11)).unwrap();
        let dz: Vec<f64> = s.z.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(dz.len(), n);
        let var = dz.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let target = 4.0 * dt;
        // chi-square: var/target has standard deviation sqrt(2/n)
        let se = target * (2.0 / n as f64).sqrt();
        assert!((var - target).abs() < 3.0 * se, "var {var} target {target}");
    }

    #[test]
    fn refinement_keeps_coarse_points() {
        let coarse = DrivingSpec::brownian(4.0, 1e-2, 0.3, 5);
        let fine = coarse.refined(3);
        let a = sample_driving(&coarse).unwrap();
        let b = sample_driving(&fine).unwrap();
        assert_eq!(b.t.len(), 8 * (a.t.len() - 1) + 1);
        for (k, z) in a.z.iter().enumerate() {
            assert_eq!(*z, b.z[8 * k]);
        }
        let twice = sample_driving(&fine.refined(0)).unwrap();
        assert_eq!(twice, b);
    }

    #[test]
    fn refined_increments_have_brownian_variance() {
        let coarse = DrivingSpec::brownian(1.0, 1e-2, 20.0, 3);
        let s = sample_driving(&coarse.refined(2)).unwrap();
        let h = 1e-2 / 4.0;
        let var = s.db.iter().map(|x| x * x).sum::<f64>() / s.db.len() as f64;
        let se = h * (2.0 / s.db.len() as f64).sqrt();
        assert!((var - h).abs() < 3.0 * se);
    }

    #[test]
    fn force_point_gap_tracks_brownian_motion() {
        let spec = DrivingSpec::new(DrivingKind::SleKappaRho { kappa: 4.0, rho: -2.0, xi0: 1.0 }, 1e-3, 0.2, 9);
        let s = sample_driving(&spec).unwrap();
        let xi = s.xi.as_ref().unwrap();
        for k in 0..s.t.len() {
            assert!((xi[k] - s.z[k] - (1.0 - 2.0 * s.b[k])).abs() < 1e-12);
            assert!(xi[k] - s.z[k] > 0.0);
        }
        // Ξ is nondecreasing for ρ < 0 with Ξ > Z.
        assert!(xi.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn force_point_without_noise_matches_closed_form() {
        // κ = 0: Ξ' = −ρ/ξ0 with the gap frozen at ξ0.
        let spec = DrivingSpec::new(DrivingKind::SleKappaRho { kappa: 0.0, rho: -2.0, xi0: 0.5 }, 0.01, 1.0, 0);
        let s = sample_driving(&spec).unwrap();
        let last = *s.xi.as_ref().unwrap().last().unwrap();
        assert!((last - (0.5 + 2.0 / 0.5)).abs() < 1e-12);
    }

    #[test]
    fn far_force_point_recovers_chordal_increments() {
        let dt = 1e-4;
        let spec = DrivingSpec::new(DrivingKind::SleKappaRho { kappa: 4.0, rho: -2.0, xi0: 1e3 }, dt, 5.0, 21);
        let s = sample_driving(&spec).unwrap();
        let n = s.z.len() - 1;
        let var = s.z.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / n as f64;
        let se = 4.0 * dt * (2.0 / n as f64).sqrt();
        assert!((var - 4.0 * dt).abs() < 3.0 * se);
    }

    #[test]
    fn table_driving_interpolates() {
        let spec = DrivingSpec::new(DrivingKind::Table { samples: vec![0.0, 1.0, 3.0] }, 0.5, 1.0, 0);
        let s = sample_driving(&spec).unwrap();
        assert_eq!(s.z, vec![0.0, 1.0, 3.0]);
        let s = sample_driving(&spec.refined(1)).unwrap();
        assert_eq!(s.z, vec![0.0, 0.5, 1.0, 2.0, 3.0]);
        let short = DrivingSpec::new(DrivingKind::Table { samples: vec![0.0] }, 0.5, 1.0, 0);
        assert!(sample_driving(&short).is_err());
    }
}
