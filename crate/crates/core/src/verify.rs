//! PDE-level and Lie-algebraic checks: confluent BPZ residuals by finite differences,
//! the Hörmander bracket determinant, flatness of the deformation flow, and a
//! cross-module consistency suite.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{c, Complex, Mat2C};
use crate::isomonodromy::{ContourOptions, FamilySpec, IsoError, LaxFamily};
use crate::loewner::driving::DrivingSpec;
use crate::loewner::{run_trajectory, FlowError, StepControl};
use crate::martingale::{run_observable, MartingaleError};
use crate::numerics::loglog_slope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("stencil step {h:e} is within 10x of a singular distance {distance:e}")]
    StencilTooCoarse { h: f64, distance: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Iso(#[from] IsoError),
}

/// One evaluation point of an observable `𝒵(z, ξ, λ; s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub z: f64,
    pub xi: Option<f64>,
    pub lambda: Vec<Complex>,
    pub s: Vec<Complex>,
}

/// Centered stencil around a base configuration, with tabulated observable values.
///
/// Node order: centre, `z ∓ h_z`, then `λᵢ ∓ h_p` and `sᵢ ∓ h_p` for each `i`, then `ξ ∓ h_z`
/// when a force point is present. Parameters are displaced along their real axes, which
/// recovers the complex derivative of a function holomorphic in `(λ, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableGrid {
    pub base: Node,
    pub h_z: f64,
    pub h_param: f64,
    pub values: Vec<Complex>,
}

impl ObservableGrid {
    /// Validates the stencil geometry; values are filled by [`ObservableGrid::tabulate`].
    pub fn new(base: Node, h_z: f64, h_param: f64) -> Result<Self, VerifyError> {
        if base.lambda.len() != base.s.len() {
            return Err(VerifyError::LengthMismatch { expected: base.lambda.len(), got: base.s.len() });
        }
        if !(h_z > 0.0 && h_param > 0.0 && h_z.is_finite() && h_param.is_finite()) {
            return Err(VerifyError::DegenerateInput("stencil steps must be positive".into()));
        }
        let h = h_z.max(h_param);
        let z = c(base.z, 0.0);
        let mut dist = base.lambda.iter().map(|l| (z - l).norm()).fold(f64::INFINITY, f64::min);
        if let Some(xi) = base.xi {
            dist = dist.min((base.z - xi).abs());
            for l in &base.lambda {
                dist = dist.min((c(xi, 0.0) - l).norm());
            }
        }
        if dist < 10.0 * h {
            return Err(VerifyError::StencilTooCoarse { h, distance: dist });
        }
        Ok(Self { base, h_z, h_param, values: Vec::new() })
    }

    pub fn nodes(&self) -> Vec<Node> {
        let b = &self.base;
        let mut out = vec![b.clone()];
        for sgn in [-1.0, 1.0] {
            out.push(Node { z: b.z + sgn * self.h_z, ..b.clone() });
        }
        for i in 0..b.lambda.len() {
            for sgn in [-1.0, 1.0] {
                let mut n = b.clone();
                n.lambda[i] += sgn * self.h_param;
                out.push(n);
            }
            for sgn in [-1.0, 1.0] {
                let mut n = b.clone();
                n.s[i] += sgn * self.h_param;
                out.push(n);
            }
        }
        if let Some(xi) = b.xi {
            for sgn in [-1.0, 1.0] {
                out.push(Node { xi: Some(xi + sgn * self.h_z), ..b.clone() });
            }
        }
        out
    }

    /// Evaluates `f` at every node concurrently; results are stored in node order.
    pub fn tabulate<F>(mut self, f: F) -> Result<Self, VerifyError>
    where
        F: Fn(&Node) -> Result<Complex, VerifyError> + Sync,
    {
        self.values = self.nodes().par_iter().map(&f).collect::<Result<Vec<_>, _>>()?;
        Ok(self)
    }

    fn value(&self, k: usize) -> Result<Complex, VerifyError> {
        let expected = self.nodes_len();
        if self.values.len() != expected {
            return Err(VerifyError::LengthMismatch { expected, got: self.values.len() });
        }
        Ok(self.values[k])
    }

    fn nodes_len(&self) -> usize {
        3 + 4 * self.base.lambda.len() + if self.base.xi.is_some() { 2 } else { 0 }
    }

    fn centered(&self, k: usize, h: f64) -> Result<Complex, VerifyError> {
        Ok((self.value(k + 1)? - self.value(k)?) / (2.0 * h))
    }

    /// `∂z𝒵` at the base node.
    pub fn dz(&self) -> Result<Complex, VerifyError> {
        self.centered(1, self.h_z)
    }

    /// `∂²z𝒵` at the base node.
    pub fn dzz(&self) -> Result<Complex, VerifyError> {
        let h2 = self.h_z * self.h_z;
        Ok((self.value(1)? - self.value(0)? * 2.0 + self.value(2)?) / h2)
    }

    pub fn dlambda(&self, i: usize) -> Result<Complex, VerifyError> {
        self.centered(3 + 4 * i, self.h_param)
    }

    pub fn ds(&self, i: usize) -> Result<Complex, VerifyError> {
        self.centered(5 + 4 * i, self.h_param)
    }

    pub fn dxi(&self) -> Result<Complex, VerifyError> {
        if self.base.xi.is_none() {
            return Err(VerifyError::DegenerateInput("grid has no force point".into()));
        }
        self.centered(3 + 4 * self.base.lambda.len(), self.h_z)
    }
}

/// `[∂²z − Σᵢ(∂λᵢ/wᵢ + sᵢ∂sᵢ/wᵢ² + αᵢ²/wᵢ² + 2sᵢαᵢ/wᵢ³ + sᵢ²/wᵢ⁴)]𝒵` at the base node, `wᵢ = z − λᵢ`.
pub fn bpz_residual(grid: &ObservableGrid, alpha: &[Complex]) -> Result<Complex, VerifyError> {
    let b = &grid.base;
    if alpha.len() != b.lambda.len() {
        return Err(VerifyError::LengthMismatch { expected: b.lambda.len(), got: alpha.len() });
    }
    let zc = grid.value(0)?;
    let mut acc = grid.dzz()?;
    for i in 0..b.lambda.len() {
        let w = (c(b.z, 0.0) - b.lambda[i]).inv();
        let (s, a) = (b.s[i], alpha[i]);
        let w2 = w * w;
        acc -= grid.dlambda(i)? * w + s * grid.ds(i)? * w2;
        acc -= zc * w2 * (a * a + w * (2.0 * s * a + w * s * s));
    }
    Ok(acc)
}

/// The BPZ operator with the force-point term `−(∂z + ∂ξ)/(z − ξ)` added.
pub fn forcepoint_pde_residual(grid: &ObservableGrid, alpha: &[Complex]) -> Result<Complex, VerifyError> {
    let xi = grid.base.xi.ok_or_else(|| VerifyError::DegenerateInput("grid has no force point".into()))?;
    let bpz = bpz_residual(grid, alpha)?;
    Ok(bpz - (grid.dz()? + grid.dxi()?) / (grid.base.z - xi))
}

/// Symmetric difference of `(∂z + ∂ξ)𝒵` on the diagonal `ξ = z`.
pub fn coincidence_derivative<F>(f: F, base: &Node, h: f64) -> Result<Complex, VerifyError>
where
    F: Fn(&Node) -> Result<Complex, VerifyError>,
{
    let shift = |d: f64| Node { z: base.z + d, xi: Some(base.z + d), ..base.clone() };
    Ok((f(&shift(h))? - f(&shift(-h))?) / (2.0 * h))
}

/// Numerical `𝒵 = τ·Tr Y` (or `τ·Tr(Y(ξ)⁻¹Y(z))` with a force point) for a Lax family.
///
/// `Y` is normalised to the identity at `z_base` for the reference family, transported
/// isomonodromically to the node's `(λ, s)` and then integrated along the segment to `z`.
#[derive(Debug, Clone)]
pub struct TauTraceObservable {
    pub family: LaxFamily,
    pub z_base: Complex,
    pub deform_steps: usize,
    pub contour: ContourOptions,
}

impl TauTraceObservable {
    pub fn new(family: LaxFamily, z_base: Complex, tol: f64) -> Self {
        Self { family, z_base, deform_steps: 8, contour: ContourOptions { tol, ..ContourOptions::default() } }
    }

    pub fn eval(&self, node: &Node) -> Result<Complex, VerifyError> {
        let d = self.family.deform_to(&node.lambda, &node.s, self.z_base, Mat2C::identity(), self.deform_steps)?;
        let at = |x: f64| d.family.integrate_y_in_z(&[self.z_base, c(x, 0.0)], d.y, &self.contour);
        let y = at(node.z)?;
        let m = match node.xi {
            None => y,
            Some(xi) => at(xi)?.inverse().map_err(|e| VerifyError::DegenerateInput(e.to_string()))? * y,
        };
        Ok(d.log_tau.exp() * m.trace())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub h: f64,
    pub residual_re: f64,
    pub residual_im: f64,
    /// Local order against the previous (coarser) row.
    pub order_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLadder {
    pub rows: Vec<LadderRow>,
    /// Least-squares log-log slope of `|residual|` against `h`.
    pub order: Option<f64>,
    pub tol_ode: f64,
}

impl ResidualLadder {
    /// `100·tol_ODE/h²` at the finest step.
    pub fn terminal_bound(&self) -> f64 {
        self.rows.last().map_or(f64::INFINITY, |r| 100.0 * self.tol_ode / (r.h * r.h))
    }

    pub fn terminal_residual(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.residual_re.hypot(r.residual_im))
    }
}

/// Default step ladder for residual convergence.
pub const H_LADDER: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Residual of the BPZ operator (or its force-point variant when `base.xi` is set)
/// applied to `τ·Tr Y` across a ladder of stencil steps.
pub fn residual_ladder(obs: &TauTraceObservable, base: &Node, hs: &[f64]) -> Result<ResidualLadder, VerifyError> {
    let alpha = obs.family.alpha.clone();
    let mut rows: Vec<LadderRow> = Vec::with_capacity(hs.len());
    for &h in hs {
        let grid = ObservableGrid::new(base.clone(), h, h)?.tabulate(|n| obs.eval(n))?;
        let r = if base.xi.is_some() { forcepoint_pde_residual(&grid, &alpha)? } else { bpz_residual(&grid, &alpha)? };
        let order_estimate = rows.last().map(|p| (p.residual_re.hypot(p.residual_im) / r.norm()).ln() / (p.h / h).ln());
        rows.push(LadderRow { h, residual_re: r.re, residual_im: r.im, order_estimate });
    }
    let hv: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let rv: Vec<f64> = rows.iter().map(|r| r.residual_re.hypot(r.residual_im)).collect();
    Ok(ResidualLadder { order: loglog_slope(&hv, &rv), rows, tol_ode: obs.contour.tol })
}

/// Commutator-coefficient matrix of the Hörmander bracket condition.
///
/// Row `ℓ = 1..=dim`; columns `(∂z+∂ξ)`, then per puncture `∂λᵢ, ∂λᵢ*, ∂sᵢ, ∂sᵢ*` with entries
/// `2/(ξ−z)^{ℓ+1}`, `2/(λᵢ−z)^{ℓ+1}`, `2/(λᵢ*−z)^{ℓ+1}`, `−2(ℓ+1)sᵢ/(λᵢ−z)^{ℓ+2}` and its conjugate.
#[derive(Debug, Clone, PartialEq)]
pub struct HormanderMatrix {
    pub dim: usize,
    pub entries: DMatrix<Complex>,
}

impl HormanderMatrix {
    pub fn new(z: f64, xi: f64, lambda: &[Complex], s: &[Complex]) -> Result<Self, VerifyError> {
        let n = lambda.len();
        if s.len() != n {
            return Err(VerifyError::LengthMismatch { expected: n, got: s.len() });
        }
        if z == xi {
            return Err(VerifyError::DegenerateInput("z coincides with ξ".into()));
        }
        let zc = c(z, 0.0);
        for (i, l) in lambda.iter().enumerate() {
            if *l == zc {
                return Err(VerifyError::DegenerateInput(format!("z coincides with λ{}", i + 1)));
            }
            if lambda[..i].contains(l) {
                return Err(VerifyError::DegenerateInput(format!("λ{} repeats an earlier puncture", i + 1)));
            }
        }
        let dim = 4 * n + 1;
        let entries = DMatrix::from_fn(dim, dim, |row, col| {
            let l = (row + 1) as i32;
            if col == 0 {
                return c(2.0, 0.0) / c(xi - z, 0.0).powi(l + 1);
            }
            let (i, kind) = ((col - 1) / 4, (col - 1) % 4);
            let (lam, si) = if kind % 2 == 0 { (lambda[i], s[i]) } else { (lambda[i].conj(), s[i].conj()) };
            let w = lam - zc;
            if kind < 2 {
                c(2.0, 0.0) / w.powi(l + 1)
            } else {
                si * (-2.0 * f64::from(l + 1)) / w.powi(l + 2)
            }
        });
        Ok(Self { dim, entries })
    }

    pub fn determinant(&self) -> Complex {
        self.entries.clone().determinant()
    }

    /// Product of column norms (Hadamard bound on `|det|`).
    pub fn scale(&self) -> f64 {
        self.entries.column_iter().map(|col| col.norm()).product()
    }

    /// Singular-value rank of the column-equilibrated matrix, threshold `rel·σ_max`.
    pub fn numerical_rank(&self, rel: f64) -> usize {
        let mut m = self.entries.clone();
        for mut col in m.column_iter_mut() {
            let nrm = col.norm();
            if nrm > 0.0 {
                col /= c(nrm, 0.0);
            }
        }
        let sv = m.singular_values();
        let smax = sv.max();
        sv.iter().filter(|&&x| x > rel * smax).count()
    }
}

/// One configuration `(z, ξ, λ, s)` for the bracket condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormanderConfig {
    pub z: f64,
    pub xi: f64,
    pub lambda: Vec<Complex>,
    pub s: Vec<Complex>,
}

impl HormanderConfig {
    pub fn matrix(&self) -> Result<HormanderMatrix, VerifyError> {
        HormanderMatrix::new(self.z, self.xi, &self.lambda, &self.s)
    }

    /// `max(1/|ξ−z|, 1/|λᵢ−z|)`.
    pub fn max_node_modulus(&self) -> f64 {
        let zc = c(self.z, 0.0);
        self.lambda.iter().map(|l| (l - zc).norm().recip()).fold((self.xi - self.z).abs().recip(), f64::max)
    }

    /// Smallest pairwise distance between the Vandermonde nodes `1/(ξ−z)`, `1/(λᵢ−z)`, `1/(λᵢ*−z)`.
    pub fn node_separation(&self) -> f64 {
        let zc = c(self.z, 0.0);
        let mut nodes = vec![c(1.0 / (self.xi - self.z), 0.0)];
        for l in &self.lambda {
            nodes.push((l - zc).inv());
            nodes.push((l.conj() - zc).inv());
        }
        let mut sep = f64::INFINITY;
        for i in 0..nodes.len() {
            for j in 0..i {
                sep = sep.min((nodes[i] - nodes[j]).norm());
            }
        }
        sep
    }
}

/// Seeded configurations alternating `n = 1, 2`, with every Vandermonde node in the closed unit disc
/// (`|ξ − z| ≥ 1`, `|λᵢ − z| ≥ 1`) and nodes separated by at least `min_separation`.
pub fn random_generic_configs(count: usize, seed: u64, min_separation: f64) -> Vec<HormanderConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = 1 + out.len() % 2;
        let z = rng.random_range(-1.0..1.0);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let xi = z + sign * rng.random_range(1.0..3.0);
        let lambda = (0..n).map(|_| c(rng.random_range(-3.0..3.0), rng.random_range(0.3..3.0))).collect();
        let s = (0..n).map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let cfg = HormanderConfig { z, xi, lambda, s };
        if cfg.max_node_modulus() <= 1.0 && cfg.node_separation() >= min_separation {
            out.push(cfg);
        }
    }
    out
}

pub fn hormander_determinant(z: f64, xi: f64, lambda: &[Complex], s: &[Complex]) -> Result<Complex, VerifyError> {
    Ok(HormanderMatrix::new(z, xi, lambda, s)?.determinant())
}

/// Largest entrywise discrepancy between advancing along coordinate `a` then `b` and the
/// reverse order, by `h` each, over every pair of deformation coordinates `(λ₁…λₙ, s₁…sₙ)`.
pub fn flatness_defect(fam: &LaxFamily, h: f64) -> Result<f64, VerifyError> {
    let n = fam.n();
    let unit = |k: usize| -> (Vec<Complex>, Vec<Complex>) {
        let mut dl = vec![c(0.0, 0.0); n];
        let mut ds = vec![c(0.0, 0.0); n];
        if k < n {
            dl[k] = c(1.0, 0.0);
        } else {
            ds[k - n] = c(1.0, 0.0);
        }
        (dl, ds)
    };
    let step = |f: &LaxFamily, k: usize| -> Result<LaxFamily, IsoError> {
        let (dl, ds) = unit(k);
        f.advance(&dl, &ds, h)
    };
    let pairs: Vec<(usize, usize)> = (0..2 * n).flat_map(|a| (a + 1..2 * n).map(move |b| (a, b))).collect();
    let defects = pairs
        .par_iter()
        .map(|&(a, b)| -> Result<f64, IsoError> {
            let ab = step(&step(fam, a)?, b)?;
            let ba = step(&step(fam, b)?, a)?;
            let mut d: f64 = 0.0;
            for (x, y) in ab.a0.iter().chain(&ab.a1).zip(ba.a0.iter().chain(&ba.a1)) {
                for (p, q) in x.entries().iter().zip(y.entries()) {
                    d = d.max((p - q).norm());
                }
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(defects.into_iter().fold(0.0, f64::max))
}

/// Inputs of [`cross_module_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub family: FamilySpec,
    pub driving: DrivingSpec,
    #[serde(default)]
    pub control: StepControl,
    #[serde(default)]
    pub tolerances: SuiteTolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteTolerances {
    pub alpha: f64,
    pub flatness: f64,
    pub flatness_h: f64,
    pub birkhoff: f64,
    pub ledger: f64,
    pub covariance: f64,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        Self { alpha: 1e-6, flatness: 1e-6, flatness_h: 1e-4, birkhoff: 1e-8, ledger: 1e-6, covariance: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub pass: bool,
    pub max_deviation: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, dev: Result<f64, String>, tol: f64) -> SuiteCheck {
    match dev {
        Ok(d) => SuiteCheck { name: name.into(), pass: d.is_finite() && d <= tol, max_deviation: d, tolerance: tol, detail: None },
        Err(e) => SuiteCheck { name: name.into(), pass: false, max_deviation: f64::NAN, tolerance: tol, detail: Some(e) },
    }
}

/// Runs α-constancy, flatness, Birkhoff-vs-g′, drift ledger and covariance-factor checks.
/// Failures, including an invalid family, are reported as data.
pub fn cross_module_suite(cfg: &SuiteConfig) -> SuiteReport {
    let tol = cfg.tolerances;
    let fam = match cfg.family.build() {
        Ok(f) => f,
        Err(e) => {
            return SuiteReport { checks: vec![check("family_validation", Err(e.to_string()), 0.0)] };
        }
    };
    let mut checks = vec![check("family_validation", Ok(0.0), 0.0)];

    let flow = run_observable(&fam, &cfg.driving, &cfg.control, None).map_err(|e: MartingaleError| e.to_string());
    checks.push(check("alpha_constancy", flow.as_ref().map(|f| f.max_alpha_drift).map_err(Clone::clone), tol.alpha));
    checks.push(check(
        "flatness",
        flatness_defect(&fam, tol.flatness_h).map_err(|e| e.to_string()),
        tol.flatness,
    ));
    let birkhoff = run_trajectory(&cfg.driving, &fam.lambda, &fam.s, &cfg.control)
        .map_err(|e: FlowError| e.to_string())
        .and_then(|states| {
            let s0 = &states[0].birkhoff;
            let mut d: f64 = 0.0;
            for st in &states {
                for (i, s) in s0.iter().enumerate() {
                    let via = st.birkhoff_via_gprime(i, 1, *s).map_err(|e| e.to_string())?;
                    d = d.max((st.birkhoff[i] - via).norm() / s.norm().max(1.0));
                }
            }
            Ok(d)
        });
    checks.push(check("birkhoff_vs_gprime", birkhoff, tol.birkhoff));
    checks.push(check("drift_ledger", flow.as_ref().map(|f| f.max_ledger).map_err(Clone::clone), tol.ledger));
    checks.push(check("covariance_two_ways", flow.map(|f| f.max_f_mismatch), tol.covariance));
    SuiteReport { checks }
}
