//! Chordal Loewner flow `∂ₜg = 2/(g − Z)` for finitely many tracked punctures, together with
//! `g′`, the pre-Schwarzian `𝒜 = g″/g′`, the Schwarzian `𝒮` and the Birkhoff values `S = g′·s`.

pub mod driving;

use serde::Serialize;
use thiserror::Error;

use crate::algebra::{c, Complex};
use crate::numerics::rk4_step;
pub use driving::{
    sample_driving, walk, DrivingError, DrivingKind, DrivingPath, DrivingSamples, DrivingSpec, Increment,
    PathPoint, PathStepper, StepOutcome, WalkOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("state is already stopped")]
    Stopped,
    #[error("swallow guard tripped inside the step")]
    StepRejected,
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),
    #[error("puncture index {0} out of range")]
    IndexOutOfRange(usize),
    #[error(transparent)]
    Driving(#[from] DrivingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Swallow,
    ContinuationThreshold,
}

/// Number of packed complex slots per puncture: Λ, g′, log g′, 𝒜, 𝒮, S.
pub(crate) const SLOTS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct LoewnerState {
    pub t: f64,
    pub z: f64,
    pub b: f64,
    /// Initial punctures λᵢ.
    pub lambda: Vec<Complex>,
    /// Initial Birkhoff values sᵢ.
    pub s0: Vec<Complex>,
    /// Λᵢ = gₜ(λᵢ).
    pub lambda_t: Vec<Complex>,
    pub gprime: Vec<Complex>,
    /// Continuous branch of log g′, i.e. `−∫ 2/(Λ−Z)² du`.
    pub log_gprime: Vec<Complex>,
    pub preschwarz: Vec<Complex>,
    pub schwarz: Vec<Complex>,
    /// Birkhoff values Sᵢ integrated from their own ODE.
    pub birkhoff: Vec<Complex>,
    pub xi: Option<f64>,
    pub stopped: Option<StopReason>,
    /// Swallow guard δ.
    pub guard: f64,
}

pub(crate) fn check_punctures(lambda: &[Complex], z0: f64, xi: Option<f64>) -> Result<f64, FlowError> {
    let mut min_dist = f64::INFINITY;
    for (i, l) in lambda.iter().enumerate() {
        if !(l.re.is_finite() && l.im.is_finite()) {
            return Err(FlowError::DegenerateConfig(format!("puncture {i} is not finite")));
        }
        let d = (l - c(z0, 0.0)).norm();
        if d == 0.0 {
            return Err(FlowError::DegenerateConfig(format!("puncture {i} sits on the driving point")));
        }
        min_dist = min_dist.min(d);
        for (j, m) in lambda.iter().enumerate().skip(i + 1) {
            let dij = (l - m).norm();
            if dij == 0.0 {
                return Err(FlowError::DegenerateConfig(format!("punctures {i} and {j} coincide")));
            }
        }
        if let Some(x) = xi {
            if (l - c(x, 0.0)).norm() == 0.0 {
                return Err(FlowError::DegenerateConfig(format!("puncture {i} sits on the force point")));
            }
        }
    }
    if let Some(x) = xi {
        let d = (x - z0).abs();
        if d == 0.0 {
            return Err(FlowError::DegenerateConfig("force point sits on the driving point".into()));
        }
        min_dist = min_dist.min(d);
    }
    Ok(if min_dist.is_finite() { min_dist } else { 1.0 })
}

/// Time derivatives of the packed per-puncture block at driving value `z`.
#[inline]
pub(crate) fn flow_rhs(block: &[Complex], z: f64, out: &mut [Complex]) {
    let x = block[0] - z;
    let inv = x.inv();
    let inv2 = inv * inv;
    let g = block[1];
    out[0] = inv * 2.0;
    out[1] = -g * inv2 * 2.0;
    out[2] = -inv2 * 2.0;
    out[3] = g * inv2 * inv * 4.0;
    out[4] = -g * g * inv2 * inv2 * 12.0;
    out[5] = -block[5] * inv2 * 2.0;
}

impl LoewnerState {
    /// Initial state at `t = 0`, with the default guard `1e−3 ·` initial minimum distance.
    pub fn new(lambda: &[Complex], s: &[Complex], z0: f64, xi: Option<f64>) -> Result<Self, FlowError> {
        if lambda.len() != s.len() {
            return Err(FlowError::DegenerateConfig("lambda and s lengths differ".into()));
        }
        let d = check_punctures(lambda, z0, xi)?;
        let n = lambda.len();
        Ok(Self {
            t: 0.0,
            z: z0,
            b: 0.0,
            lambda: lambda.to_vec(),
            s0: s.to_vec(),
            lambda_t: lambda.to_vec(),
            gprime: vec![c(1.0, 0.0); n],
            log_gprime: vec![c(0.0, 0.0); n],
            preschwarz: vec![c(0.0, 0.0); n],
            schwarz: vec![c(0.0, 0.0); n],
            birkhoff: s.to_vec(),
            xi,
            stopped: None,
            guard: 1e-3 * d,
        })
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// Smallest distance from the driving point to any tracked puncture or the force point.
    pub fn min_distance(&self, z: f64) -> f64 {
        let mut d = self.lambda_t.iter().map(|l| (l - z).norm()).fold(f64::INFINITY, f64::min);
        if let Some(x) = self.xi {
            d = d.min((x - z).abs());
        }
        d
    }

    pub(crate) fn pack(&self, buf: &mut Vec<Complex>) {
        for i in 0..self.n() {
            buf.extend_from_slice(&[
                self.lambda_t[i],
                self.gprime[i],
                self.log_gprime[i],
                self.preschwarz[i],
                self.schwarz[i],
                self.birkhoff[i],
            ]);
        }
    }

    pub(crate) fn unpack(&mut self, buf: &[Complex]) {
        for i in 0..self.n() {
            let b = &buf[SLOTS * i..SLOTS * (i + 1)];
            self.lambda_t[i] = b[0];
            self.gprime[i] = b[1];
            self.log_gprime[i] = b[2];
            self.preschwarz[i] = b[3];
            self.schwarz[i] = b[4];
            self.birkhoff[i] = b[5];
        }
    }

    /// Clock, driving point and stopping flags after a completed step with packed block `buf`.
    pub(crate) fn finish_step(&mut self, inc: &Increment) {
        self.t = inc.t + inc.dt;
        self.z = inc.z + inc.dz;
        self.b = inc.b + inc.db;
        if let (Some(x), Some(dx)) = (inc.xi, inc.dxi) {
            self.xi = Some(x + dx);
        }
        if self.lambda_t.iter().any(|l| (l - self.z).norm() < self.guard) {
            self.stopped = Some(StopReason::Swallow);
        } else if inc.crossed || self.xi.is_some_and(|x| (x - self.z).abs() < self.guard) {
            self.stopped = Some(StopReason::ContinuationThreshold);
        }
    }

    /// Stage admissibility: stages may enter the guard band but not its inner half.
    pub(crate) fn stage_ok(&self, block: &[Complex], z: f64) -> bool {
        (0..self.n()).all(|i| {
            let x = block[SLOTS * i] - z;
            x.norm() >= 0.5 * self.guard && x.re.is_finite() && x.im.is_finite()
        })
    }

    /// One RK4 step with piecewise-linear driving across the step.
    pub fn advance(&self, inc: &Increment) -> Result<Self, FlowError> {
        if self.stopped.is_some() {
            return Err(FlowError::Stopped);
        }
        if inc.dt == 0.0 && inc.dz == 0.0 {
            return Ok(self.clone());
        }
        let mut y = Vec::with_capacity(SLOTS * self.n());
        self.pack(&mut y);
        let n = self.n();
        let y1 = rk4_step(&y, inc.dt, |th, y| {
            let z = inc.z_at(th);
            if !self.stage_ok(y, z) {
                return Err(FlowError::StepRejected);
            }
            let mut out = vec![c(0.0, 0.0); y.len()];
            for i in 0..n {
                flow_rhs(&y[SLOTS * i..SLOTS * (i + 1)], z, &mut out[SLOTS * i..SLOTS * (i + 1)]);
            }
            Ok(out)
        })?;
        if y1.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(FlowError::StepRejected);
        }
        let mut next = self.clone();
        next.unpack(&y1);
        next.finish_step(inc);
        Ok(next)
    }

    /// `S^{i,k}ₜ = s_{i,k}·exp(−∫ 2k/(Λ−Z)² du)`.
    pub fn evolve_birkhoff_general(&self, i: usize, k: u32, s_ik: Complex) -> Result<Complex, FlowError> {
        let l = self.log_gprime.get(i).ok_or(FlowError::IndexOutOfRange(i))?;
        Ok(s_ik * (l * f64::from(k)).exp())
    }

    /// `s_{i,k}·(g′)^k`, the same quantity through the derivative of the map.
    pub fn birkhoff_via_gprime(&self, i: usize, k: u32, s_ik: Complex) -> Result<Complex, FlowError> {
        let g = self.gprime.get(i).ok_or(FlowError::IndexOutOfRange(i))?;
        Ok(s_ik * g.powu(k))
    }

    pub fn csv_header(n: usize) -> Vec<String> {
        let mut h = vec!["t".to_string(), "Z".to_string(), "B".to_string()];
        for i in 0..n {
            for q in ["Lambda", "gprime", "preschwarz", "schwarz", "S"] {
                h.push(format!("{q}{i}_re"));
                h.push(format!("{q}{i}_im"));
            }
        }
        h
    }

    pub fn csv_row(&self) -> Vec<f64> {
        let mut r = vec![self.t, self.z, self.b];
        for i in 0..self.n() {
            for v in [self.lambda_t[i], self.gprime[i], self.preschwarz[i], self.schwarz[i], self.birkhoff[i]] {
                r.push(v.re);
                r.push(v.im);
            }
        }
        r
    }
}

/// Adaptive-stepping controls shared by the trajectory runners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepControl {
    /// Swallow guard δ; `None` selects `1e−3 ·` initial minimum distance.
    pub guard: Option<f64>,
    /// Bisect a step while `dt > ratio · d²`, `d` the distance from its left end to the guard band.
    pub refine_ratio: f64,
    pub max_extra_levels: u32,
}

impl Default for StepControl {
    fn default() -> Self {
        Self { guard: None, refine_ratio: 0.02, max_extra_levels: 16 }
    }
}

impl StepControl {
    pub fn walk_options(&self) -> WalkOptions {
        WalkOptions { max_extra_levels: self.max_extra_levels }
    }

    /// Whether `inc` is too coarse for the local distance scale `dist`.
    pub fn too_coarse(&self, inc: &Increment, dist: f64) -> bool {
        inc.dt > self.refine_ratio * dist * dist
    }
}

/// Distance from the left end of `inc` to the guard band; only past information enters.
pub(crate) fn increment_distance(state: &LoewnerState, inc: &Increment) -> f64 {
    (state.min_distance(inc.z) - state.guard).max(0.0)
}

struct TrajectoryRun {
    state: LoewnerState,
    states: Vec<LoewnerState>,
    control: StepControl,
}

impl PathStepper for TrajectoryRun {
    type Error = FlowError;

    fn wants_split(&self, inc: &Increment) -> bool {
        self.control.too_coarse(inc, increment_distance(&self.state, inc))
    }

    fn advance(&mut self, inc: &Increment) -> Result<StepOutcome, FlowError> {
        match self.state.advance(inc) {
            Ok(next) => {
                self.state = next;
                if self.state.stopped.is_some() {
                    self.states.push(self.state.clone());
                    Ok(StepOutcome::Stop)
                } else {
                    Ok(StepOutcome::Continue)
                }
            }
            Err(FlowError::StepRejected) if inc.finest => {
                self.state.stopped = Some(if inc.crossed {
                    StopReason::ContinuationThreshold
                } else {
                    StopReason::Swallow
                });
                self.states.push(self.state.clone());
                Ok(StepOutcome::Stop)
            }
            Err(FlowError::StepRejected) => Ok(StepOutcome::Rejected),
            Err(e) => Err(e),
        }
    }

    fn on_grid(&mut self, _t: f64) -> Result<(), FlowError> {
        self.states.push(self.state.clone());
        Ok(())
    }
}

/// Full trajectory on the `dt` grid, ending at `T` or at the first stopping time.
pub fn run_trajectory(
    spec: &DrivingSpec,
    lambda: &[Complex],
    s: &[Complex],
    control: &StepControl,
) -> Result<Vec<LoewnerState>, FlowError> {
    let path = DrivingPath::new(spec)?;
    let p0 = path.initial_point();
    let mut state = LoewnerState::new(lambda, s, p0.z, p0.xi)?;
    if let Some(g) = control.guard {
        state.guard = g;
    }
    let mut run = TrajectoryRun { states: vec![state.clone()], state, control: *control };
    walk(&path, &mut run, control.walk_options())?;
    Ok(run.states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> Complex {
        c(1.0, 0.0)
    }

    fn final_state(spec: &DrivingSpec, lambda: &[Complex], s: &[Complex]) -> LoewnerState {
        run_trajectory(spec, lambda, s, &StepControl::default()).unwrap().pop().unwrap()
    }

    #[test]
    fn single_step_matches_closed_form() {
        let st = LoewnerState::new(&[c(2.0, 0.0)], &[one()], 0.0, None).unwrap();
        let inc = Increment::at(&PathPoint { t: 0.0, b: 0.0, z: 0.0, xi: None, frac: 0.0 });
        let next = st.advance(&Increment { dt: 1e-4, finest: false, ..inc }).unwrap();
        assert!((next.lambda_t[0] - c((4.0f64 + 4e-4).sqrt(), 0.0)).norm() < 1e-10);
        assert_eq!(st.advance(&inc).unwrap(), st);
    }

    #[test]
    fn closed_form_at_unit_time() {
        let end = final_state(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[one()]);
        assert!((end.t - 1.0).abs() < 1e-12);
        let gp = 2.0 / 8f64.sqrt();
        assert!((end.gprime[0] - gp).norm() < 1e-8);
        assert!((end.birkhoff[0] - gp).norm() < 1e-8);
        assert!((end.preschwarz[0] - 0.25).norm() < 1e-8);
        assert!((end.schwarz[0] + 0.28125).norm() < 1e-8);
        assert!((end.lambda_t[0] - 8f64.sqrt()).norm() < 1e-10);
    }

    #[test]
    fn general_rank_birkhoff() {
        let st = LoewnerState::new(&[c(2.0, 0.0)], &[one()], 0.0, None).unwrap();
        assert_eq!(st.evolve_birkhoff_general(0, 3, c(0.7, 0.1)).unwrap(), c(0.7, 0.1));
        let end = final_state(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[one()]);
        assert!((end.evolve_birkhoff_general(0, 1, one()).unwrap() - end.birkhoff[0]).norm() < 1e-12);
        assert!((end.evolve_birkhoff_general(0, 2, one()).unwrap() - 0.5).norm() < 1e-8);
        assert_eq!(end.evolve_birkhoff_general(3, 2, one()), Err(FlowError::IndexOutOfRange(3)));
    }

    #[test]
    fn swallowed_puncture_stops_near_unit_time() {
        let states = run_trajectory(&DrivingSpec::zero(1e-2, 2.0), &[c(0.0, 2.0)], &[one()], &StepControl::default())
            .unwrap();
        let last = states.last().unwrap();
        assert_eq!(last.stopped, Some(StopReason::Swallow));
        assert!((last.t - 1.0).abs() < 1e-4, "stopped at {}", last.t);
        let mid = &states[50];
        assert!((mid.lambda_t[0] - c(0.0, 2.0 * 0.5f64.sqrt())).norm() < 1e-8);
    }

    #[test]
    fn no_punctures_never_stops() {
        let states =
            run_trajectory(&DrivingSpec::brownian(4.0, 1e-3, 1.0, 3), &[], &[], &StepControl::default()).unwrap();
        assert_eq!(states.len(), 1001);
        assert!(states.iter().all(|s| s.stopped.is_none()));
    }

    #[test]
    fn coincident_punctures_rejected() {
        let err = run_trajectory(
            &DrivingSpec::zero(1e-2, 1.0),
            &[c(1.0, 1.0), c(1.0, 1.0)],
            &[one(), one()],
            &StepControl::default(),
        );
        assert!(matches!(err, Err(FlowError::DegenerateConfig(_))));
        let err = run_trajectory(&DrivingSpec::zero(1e-2, 1.0), &[c(0.0, 0.0)], &[one()], &StepControl::default());
        assert!(matches!(err, Err(FlowError::DegenerateConfig(_))));
    }

    #[test]
    fn trajectories_are_reproducible() {
        let lam = [c(0.5, 1.0), c(-1.0, 0.5)];
        let s = [one(), c(0.3, -0.2)];
        let a = run_trajectory(&DrivingSpec::brownian(4.0, 1e-3, 0.3, 5), &lam, &s, &StepControl::default()).unwrap();
        let b = run_trajectory(&DrivingSpec::brownian(4.0, 1e-3, 0.3, 5), &lam, &s, &StepControl::default()).unwrap();
        let d = run_trajectory(&DrivingSpec::brownian(4.0, 1e-3, 0.3, 6), &lam, &s, &StepControl::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.last().unwrap().z, d.last().unwrap().z);
    }

    #[test]
    fn birkhoff_matches_gprime_along_brownian_paths() {
        let lam = [c(0.5, 1.0), c(-1.0, 0.5), c(1.5, 0.2)];
        let s = [one(), c(0.3, -0.2), c(-1.0, 2.0)];
        for seed in 0..5 {
            let states =
                run_trajectory(&DrivingSpec::brownian(4.0, 1e-4, 0.3, seed), &lam, &s, &StepControl::default())
                    .unwrap();
            for st in &states {
                for i in 0..3 {
                    assert!((st.birkhoff[i] - st.gprime[i] * s[i]).norm() <= 1e-8 * s[i].norm());
                    let a = st.evolve_birkhoff_general(i, 2, s[i]).unwrap();
                    let b = st.birkhoff_via_gprime(i, 2, s[i]).unwrap();
                    assert!((a - b).norm() <= 1e-8 * a.norm().max(1.0), "seed {seed} i {i} t {} dev {:e}", st.t, (a - b).norm());
                }
            }
        }
    }

    #[test]
    fn derivative_and_schwarzian_consistency() {
        let h = 1e-5;
        for spec in [DrivingSpec::zero(1e-3, 1.0), DrivingSpec::brownian(4.0, 1e-4, 0.3, 17)] {
            let lam = c(0.8, 1.2);
            let pts = [lam, lam + h, lam - h];
            let end = final_state(&spec, &pts, &[one(); 3]);
            let fd = (end.lambda_t[1] - end.lambda_t[2]) / (2.0 * h);
            assert!((fd - end.gprime[0]).norm() <= 1e-6 * end.gprime[0].norm());
            let da = (end.preschwarz[1] - end.preschwarz[2]) / (2.0 * h);
            let a = end.preschwarz[0];
            assert!((end.schwarz[0] - (da - a * a * 0.5)).norm() < 1e-5);
        }
    }

    #[test]
    fn flow_commutes_with_conjugation() {
        let lam = c(0.4, 0.9);
        let spec = DrivingSpec::brownian(4.0, 1e-3, 0.4, 23);
        let a = final_state(&spec, &[lam], &[c(0.5, 0.5)]);
        let b = final_state(&spec, &[lam.conj()], &[c(0.5, -0.5)]);
        for (u, v) in [
            (a.lambda_t[0], b.lambda_t[0]),
            (a.gprime[0], b.gprime[0]),
            (a.preschwarz[0], b.preschwarz[0]),
            (a.schwarz[0], b.schwarz[0]),
            (a.birkhoff[0], b.birkhoff[0]),
        ] {
            assert!((u - v.conj()).norm() < 1e-12 * u.norm().max(1.0));
        }
    }

    #[test]
    fn real_points_keep_their_side() {
        let lam = [c(1.0, 0.0), c(-0.7, 0.0)];
        for seed in 0..4 {
            let states = run_trajectory(
                &DrivingSpec::brownian(4.0, 1e-3, 0.5, seed),
                &lam,
                &[one(), one()],
                &StepControl::default(),
            )
            .unwrap();
            for st in &states {
                assert!(st.lambda_t[0].re - st.z > 0.0);
                assert!(st.lambda_t[1].re - st.z < 0.0);
                assert!(st.lambda_t[0].im.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stopped_state_refuses_to_advance() {
        let mut st = LoewnerState::new(&[c(2.0, 0.0)], &[one()], 0.0, None).unwrap();
        st.stopped = Some(StopReason::Swallow);
        let inc = Increment::at(&PathPoint { t: 0.0, b: 0.0, z: 0.0, xi: None, frac: 0.0 });
        assert_eq!(st.advance(&Increment { dt: 1e-3, ..inc }), Err(FlowError::Stopped));
    }

    #[test]
    fn csv_layout() {
        let st = LoewnerState::new(&[c(2.0, 0.0)], &[one()], 0.0, None).unwrap();
        let h = LoewnerState::csv_header(1);
        assert_eq!(h.len(), 13);
        assert_eq!(&h[..4], &["t", "Z", "B", "Lambda0_re"]);
        assert_eq!(st.csv_row().len(), 13);
    }
}
