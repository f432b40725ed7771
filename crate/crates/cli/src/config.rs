//! Experiment configuration: TOML sections, validation and overrides.

use std::path::{Path, PathBuf};

use qbsde::regression::{BasisConfig, BasisKind};
use qbsde::solver::PicardConfig;
use qbsde::{example_generator, GeneratorSpec, SolverConfig, TerminalSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Upper bound on the working set of a run, in MiB.
    #[serde(default = "default_budget")]
    pub memory_budget_mb: f64,
    pub generator: GeneratorSection,
    #[serde(default)]
    pub terminal: Option<TerminalSection>,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub dual: Option<DualSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_budget() -> f64 {
    4096.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    /// Built-in generator id, e.g. `pure_quadratic(1)` or `3.1.i`.
    pub id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    /// Terminal id, e.g. `sin`, `sin(3)`, `bm_sq`, `const(1)`.
    pub id: String,
    /// Known `M` with `xi <= M`, for the bounded-above check.
    #[serde(default)]
    pub upper_bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "one")]
    pub horizon: f64,
    pub steps: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub paths: usize,
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub antithetic: bool,
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub basis: BasisKind,
    pub degree: usize,
    pub hat_knots: usize,
    /// Hermite input clamp in standard deviations; 0 disables it.
    pub input_clamp: f64,
    pub truncation: f64,
    pub theta: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let b = BasisConfig::default();
        let p = PicardConfig::default();
        let s = SolverConfig::default();
        SolverSection {
            basis: b.kind,
            degree: b.degree,
            hat_knots: b.hat_knots,
            input_clamp: b.input_clamp.unwrap_or(0.0),
            truncation: s.truncation,
            theta: p.theta,
            picard_tol: p.tol,
            picard_max_iters: p.max_iters,
        }
    }
}

impl SolverSection {
    pub fn to_solver(&self) -> SolverConfig {
        SolverConfig {
            basis: BasisConfig {
                kind: self.basis,
                degree: self.degree,
                hat_knots: self.hat_knots,
                input_clamp: (self.input_clamp > 0.0).then_some(self.input_clamp),
                ..BasisConfig::default()
            },
            picard: PicardConfig {
                tol: self.picard_tol,
                max_iters: self.picard_max_iters,
                theta: self.theta,
                ..PicardConfig::default()
            },
            truncation: self.truncation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// Closed-form `Y_0` for `pure_quadratic` and `linear` drivers.
    OracleCheck,
    Assumptions,
    Moments,
    ConjugateGrid,
    Weights,
    Refinement,
    LadderProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConjugateKindName {
    ZOnly,
    Joint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub requested: Vec<Diagnostic>,
    /// Exponent for the negative part; defaults to `2 gamma`.
    pub p: Option<f64>,
    /// Exponents for the positive part; defaults to `{1.1, 2, 4} gamma`.
    pub p_bar: Vec<f64>,
    pub lipschitz_l: f64,
    pub conjugate_kind: ConjugateKindName,
    /// `[lo, hi, points]` for q.
    pub q_range: [f64; 3],
    /// `[lo, hi, points]` for y (z-only) or r (joint).
    pub axis_range: [f64; 3],
    pub ladder_levels: Vec<u32>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            requested: Vec::new(),
            p: None,
            p_bar: Vec::new(),
            lipschitz_l: 1e3,
            conjugate_kind: ConjugateKindName::ZOnly,
            q_range: [-10.0, 10.0, 81.0],
            axis_range: [0.0, 0.0, 1.0],
            ladder_levels: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    pub mode: qbsde::DualMode,
    /// `[lo, hi, points]` for constant controls.
    pub constants: [f64; 3],
    /// `[lo, hi, points]` for feedback gains.
    pub kappas: [f64; 3],
}

impl Default for DualSection {
    fn default() -> Self {
        DualSection { mode: qbsde::DualMode::Joint, constants: [-2.0, 2.0, 21.0], kappas: [0.0, 2.0, 21.0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Defaults to the main generator.
    #[serde(default)]
    pub generator_prime: Option<String>,
    /// Defaults to the main terminal.
    #[serde(default)]
    pub terminal_prime: Option<String>,
    #[serde(default)]
    pub n_levels: Vec<u32>,
}

/// Pass/fail thresholds evaluated after the run; any failure gives exit
/// code 4.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    pub oracle_gap_max: Option<f64>,
    pub prime_oracle_gap_max: Option<f64>,
    pub dual_extracted_gap_max: Option<f64>,
    pub weak_duality: Option<bool>,
    pub strict_comparison: Option<bool>,
    pub violation_fraction_max: Option<f64>,
    pub ladder_non_increasing: Option<bool>,
    pub ladder_converges: Option<bool>,
    pub ladder_probe: Option<bool>,
    pub bounds_satisfied: Option<bool>,
    /// `|Y_0(2M) - Y_0(M)| < k SE`.
    pub refinement_se_multiple: Option<f64>,
    /// Weight mean and entropy identity within `k` SE.
    pub weights_se_multiple: Option<f64>,
    pub conjugate_error_max: Option<f64>,
    pub joint_domain: Option<bool>,
    pub no_picard_failures: Option<bool>,
    pub assumptions_pass: Vec<String>,
    pub assumptions_fail: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub save_ensemble: bool,
    pub save_solution: bool,
}

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A validated configuration with resolved ids.
pub struct Resolved {
    pub gen: GeneratorSpec,
    pub term: Option<TerminalSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if o.seed.is_some() || o.paths.is_some() {
            let ens = self
                .ensemble
                .as_mut()
                .ok_or_else(|| CliError::Validation("--seed/--paths need an [ensemble] section".into()))?;
            if let Some(s) = o.seed {
                ens.seed = Some(s);
            }
            if let Some(n) = o.paths {
                ens.paths = n;
            }
        }
        if let Some(m) = o.steps {
            self.grid.as_mut().ok_or_else(|| CliError::Validation("--steps needs a [grid] section".into()))?.steps = m;
        }
        if let Some(dir) = &o.out {
            self.output.dir = Some(dir.clone());
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.grid.as_ref().map_or(1.0, |g| g.horizon)
    }

    pub fn dim(&self) -> usize {
        self.ensemble.as_ref().map_or(1, |e| e.dim)
    }

    /// Rough peak working set: increments, Y and Z columns and one feature
    /// matrix.
    pub fn memory_estimate_mb(&self) -> f64 {
        match (&self.ensemble, &self.grid) {
            (Some(e), Some(g)) => {
                let (n, m, d) = (e.paths as f64, g.steps as f64, e.dim as f64);
                let feature_width = 64.0;
                8.0 * n * ((m + 1.0) * (2.0 * d + 1.0) + feature_width) / (1024.0 * 1024.0)
            }
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<Resolved, CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let gen = example_generator(&self.generator.id, self.dim(), self.horizon())
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let term = match &self.terminal {
            Some(t) => Some(
                t.id.parse::<TerminalSpec>().map_err(|e| CliError::Validation(e.to_string()))?,
            ),
            None => None,
        };
        let needs_paths = self.ensemble.is_some() || self.dual.is_some() || self.compare.is_some();
        if needs_paths {
            let Some(ens) = &self.ensemble else {
                return bad("stages need an [ensemble] section".into());
            };
            if ens.seed.is_none() {
                return bad("ensemble.seed is required; runs must be reproducible".into());
            }
            if ens.paths < 2 || ens.dim == 0 {
                return bad("ensemble needs at least 2 paths and d >= 1".into());
            }
            if self.grid.as_ref().is_none_or(|g| g.steps == 0 || !(g.horizon > 0.0)) {
                return bad("a [grid] with horizon > 0 and steps >= 1 is required".into());
            }
            if term.is_none() {
                return bad("a [terminal] section is required".into());
            }
        }
        let mem = self.memory_estimate_mb();
        if mem > self.memory_budget_mb {
            return bad(format!("estimated {mem:.0} MiB exceeds memory_budget_mb = {}", self.memory_budget_mb));
        }
        if let Some(c) = &self.compare {
            if let Some(g) = &c.generator_prime {
                example_generator(g, self.dim(), self.horizon()).map_err(|e| CliError::Validation(e.to_string()))?;
            }
            if let Some(t) = &c.terminal_prime {
                t.parse::<TerminalSpec>().map_err(|e| CliError::Validation(e.to_string()))?;
            }
        }
        for r in [self.diagnostics.q_range, self.diagnostics.axis_range] {
            if !(r[2] >= 1.0) || r[1] < r[0] {
                return bad(format!("range {r:?} must be [lo, hi, points] with hi >= lo and points >= 1"));
            }
        }
        let name = gen.name();
        if self.diagnostics.requested.contains(&Diagnostic::OracleCheck)
            && !(name.starts_with("pure_quadratic") || name.starts_with("linear"))
        {
            return bad(format!("oracle_check has no closed form for `{name}`"));
        }
        for fam in self.checks.assumptions_pass.iter().chain(&self.checks.assumptions_fail) {
            fam.parse::<qbsde::AssumptionFamily>().map_err(|e| CliError::Validation(e.to_string()))?;
        }
        self.solver.to_solver().validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(Resolved { gen, term })
    }

    /// Canonical JSON form, used for the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}
