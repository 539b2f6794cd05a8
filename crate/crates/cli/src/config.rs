//! Experiment configuration: canonical JSON schema with an optional TOML front end.

use std::path::{Path, PathBuf};

use isosle_core::algebra::Complex;
use isosle_core::confluence::{ConfluenceSpec, DEFAULT_LADDER};
use isosle_core::isomonodromy::FamilySpec;
use isosle_core::loewner::driving::DrivingSpec;
use isosle_core::loewner::StepControl;
use isosle_core::verify::{HormanderConfig, SuiteTolerances, H_LADDER};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Experiment {
    Trajectory,
    Ledger,
    Mc,
    McRho,
    Confluence,
    Bpz,
    Hormander,
    Suite,
}

impl Experiment {
    pub fn file_stem(self) -> &'static str {
        match self {
            Self::Trajectory => "trajectory",
            Self::Ledger => "ledger",
            Self::Mc => "mc",
            Self::McRho => "mc_rho",
            Self::Confluence => "confluence",
            Self::Bpz => "bpz",
            Self::Hormander => "hormander",
            Self::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub family: FamilySpec,
    pub driving: DrivingSpec,
    #[serde(default)]
    pub control: StepControl,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Monte Carlo path count.
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub confluence: Option<ConfluenceParams>,
    #[serde(default)]
    pub bpz: Option<BpzParams>,
    #[serde(default)]
    pub hormander: Option<HormanderParams>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_paths() -> usize {
    1000
}

/// Tolerance overrides; every field has a default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative drift-ledger bound.
    pub ledger: f64,
    pub alpha: f64,
    /// Allowed `|mean Tr M − Tr M₀|` in standard errors.
    pub mc_sigma: f64,
    pub slope_min: f64,
    pub slope_max: f64,
    pub split: f64,
    pub bpz_order: f64,
    pub tol_ode: f64,
    pub hormander_det: f64,
    pub hormander_rank: f64,
    pub suite: SuiteTolerances,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            ledger: 1e-6,
            alpha: 1e-6,
            mc_sigma: 3.0,
            slope_min: 0.9,
            slope_max: 1.1,
            split: 1e-12,
            bpz_order: 1.8,
            tol_ode: 1e-12,
            hormander_det: 1e-12,
            hormander_rank: 1e-10,
            suite: SuiteTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfluenceParams {
    pub spec: ConfluenceSpec,
    #[serde(default = "default_eps")]
    pub eps_ladder: Vec<f64>,
    #[serde(default = "default_probes")]
    pub probes: Vec<Complex>,
}

fn default_eps() -> Vec<f64> {
    DEFAULT_LADDER.to_vec()
}

fn default_probes() -> Vec<Complex> {
    vec![Complex64::new(1.0, 0.0), Complex64::new(0.5, 1.0), Complex64::new(-1.5, -0.5)]
}

impl Default for ConfluenceParams {
    fn default() -> Self {
        Self { spec: ConfluenceSpec::diagonal(1e-2), eps_ladder: default_eps(), probes: default_probes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpzParams {
    pub z0: f64,
    pub z_base: Complex,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default = "default_h")]
    pub h_ladder: Vec<f64>,
}

fn default_h() -> Vec<f64> {
    H_LADDER.to_vec()
}

impl Default for BpzParams {
    fn default() -> Self {
        Self { z0: -2.0, z_base: Complex64::new(-1.0, 0.0), xi: None, h_ladder: default_h() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderParams {
    /// Explicit configurations; random generic ones are appended.
    #[serde(default)]
    pub configs: Vec<HormanderConfig>,
    #[serde(default = "default_random")]
    pub random: usize,
    #[serde(default = "default_separation")]
    pub min_separation: f64,
}

fn default_random() -> usize {
    100
}

fn default_separation() -> f64 {
    0.5
}

impl Default for HormanderParams {
    fn default() -> Self {
        Self { configs: Vec::new(), random: default_random(), min_separation: default_separation() }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses JSON, or TOML when the extension is `.toml`.
    pub fn parse(text: &str, toml_syntax: bool) -> Result<Self, CliError> {
        if toml_syntax {
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
        } else {
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::parse(&text, is_toml)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.driving.seed = s;
        }
        if let Some(dt) = o.dt {
            self.driving.dt = dt;
        }
        if let Some(p) = o.paths {
            self.paths = p;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// Schema checks that do not require running anything.
    pub fn validate(&self) -> Result<(), CliError> {
        self.driving.validate().map_err(|e| CliError::Validation(format!("driving: {e}")))?;
        if self.experiment != Experiment::Suite {
            self.family.build().map_err(|e| CliError::Validation(format!("family: {e}")))?;
        }
        if matches!(self.experiment, Experiment::Mc | Experiment::McRho) && self.paths < 100 {
            return Err(CliError::Validation(format!("MC needs at least 100 paths, got {}", self.paths)));
        }
        if let Some(c) = &self.confluence {
            c.spec.validate().map_err(|e| CliError::Validation(format!("confluence: {e}")))?;
            if c.eps_ladder.len() < 2 {
                return Err(CliError::Validation("confluence: eps_ladder needs two or more entries".into()));
            }
        }
        if let Some(b) = &self.bpz {
            if b.h_ladder.len() < 2 || b.h_ladder.iter().any(|h| !(*h > 0.0)) {
                return Err(CliError::Validation("bpz: h_ladder needs two or more positive steps".into()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.driving.seed
    }
}
