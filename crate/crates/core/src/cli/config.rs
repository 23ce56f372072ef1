//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//! pipeline = "solve-lq"          # optional; must agree with the command line
//!
//! [spec]
//! catalog = "lq-mean-drift"
//! horizon = 1.0
//! x0 = [1.0]
//! generator = [[-1.0, 1.0], [2.0, -2.0]]
//!
//! [budget.fbsde]
//! blocks = 32
//! ```
//!
//! Absent sections take the documented defaults; a present but invalid value
//! is always an error naming its field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::ChaosBudget;
use crate::error::{Error, Result};
use crate::fbsde::FbsdeBudget;
use crate::game_model::{build_lq_spec, catalog, GameSpec, Interaction, LqParams, LqRegime};
use crate::nash_pde::PdeGrid;
use crate::regime_chain::GeneratorMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Validate,
    SolveLq,
    SolveFbsde,
    SolvePde,
    Simulate,
    Chaos,
    NashGap,
    FullLqAcceptance,
}

impl Pipeline {
    pub const ALL: [Pipeline; 8] = [
        Pipeline::Validate,
        Pipeline::SolveLq,
        Pipeline::SolveFbsde,
        Pipeline::SolvePde,
        Pipeline::Simulate,
        Pipeline::Chaos,
        Pipeline::NashGap,
        Pipeline::FullLqAcceptance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Validate => "validate",
            Pipeline::SolveLq => "solve-lq",
            Pipeline::SolveFbsde => "solve-fbsde",
            Pipeline::SolvePde => "solve-pde",
            Pipeline::Simulate => "simulate",
            Pipeline::Chaos => "chaos",
            Pipeline::NashGap => "nash-gap",
            Pipeline::FullLqAcceptance => "full-lq-acceptance",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Pipeline::ALL.iter().map(|p| p.name()).collect();
            Error::config("pipeline", format!("unknown pipeline `{s}` (known: {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<Pipeline>,
    /// Master seed. Required here or on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub spec: SpecConfig,
    #[serde(default)]
    pub budget: Budgets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub catalog: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub initial_regime: usize,
    /// Rows of `Q`; one regime when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_bound: Option<f64>,
    /// Scalar LQ parameters per regime, replacing the catalog's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<Vec<LqOverride>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_mean_coupling: Option<bool>,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_x0() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqOverride {
    pub state_cost: f64,
    pub control_cost: f64,
    pub terminal_cost: f64,
    pub b1: f64,
    pub b2: f64,
    pub sigma: f64,
    #[serde(default)]
    pub mean_coupling: f64,
    #[serde(default)]
    pub mean_drift: f64,
    #[serde(default)]
    pub drift_const: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// Riccati grid cells.
    pub riccati_steps: usize,
    pub validation_samples: usize,
    pub fbsde: FbsdeSection,
    pub pde: PdeSection,
    pub simulate: SimulateSection,
    pub chaos: ChaosSection,
    pub gap: GapSection,
    pub suite: SuiteSection,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            riccati_steps: 2000,
            validation_samples: 10_000,
            fbsde: FbsdeSection::default(),
            pde: PdeSection::default(),
            simulate: SimulateSection::default(),
            chaos: ChaosSection::default(),
            gap: GapSection::default(),
            suite: SuiteSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbsdeSection {
    pub blocks: usize,
    pub particles: usize,
    pub probes: usize,
    pub steps: usize,
    pub max_picard: usize,
    pub tol: f64,
    pub damping: f64,
    pub degree: usize,
}

impl Default for FbsdeSection {
    fn default() -> Self {
        let b = FbsdeBudget::default();
        Self {
            blocks: b.blocks,
            particles: b.particles,
            probes: b.probes,
            steps: b.steps,
            max_picard: b.max_picard,
            tol: b.tol,
            damping: b.damping,
            degree: b.degree,
        }
    }
}

impl FbsdeSection {
    pub fn budget(&self) -> FbsdeBudget {
        FbsdeBudget {
            blocks: self.blocks,
            particles: self.particles,
            probes: self.probes,
            steps: self.steps,
            max_picard: self.max_picard,
            tol: self.tol,
            damping: self.damping,
            degree: self.degree,
            ..FbsdeBudget::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    pub n_x: usize,
    pub n_t: usize,
    /// 1 or 2.
    pub players: usize,
}

impl Default for PdeSection {
    fn default() -> Self {
        let g = PdeGrid::default();
        Self {
            n_x: g.n_x,
            n_t: g.n_t,
            players: 1,
        }
    }
}

impl PdeSection {
    pub fn grid(&self) -> PdeGrid {
        PdeGrid {
            n_x: self.n_x,
            n_t: self.n_t,
            ..PdeGrid::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub players: usize,
    pub reps: usize,
    pub steps: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            players: 64,
            reps: 200,
            steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosSection {
    pub players: Vec<usize>,
    pub reps: usize,
    pub steps: usize,
    pub t_nodes: usize,
    pub reference_factor: usize,
}

impl Default for ChaosSection {
    fn default() -> Self {
        let b = ChaosBudget::default();
        Self {
            players: vec![8, 16, 32, 64, 128],
            reps: b.reps,
            steps: b.steps,
            t_nodes: b.t_nodes,
            reference_factor: b.reference_factor,
        }
    }
}

impl ChaosSection {
    pub fn budget(&self) -> ChaosBudget {
        ChaosBudget {
            reps: self.reps,
            steps: self.steps,
            t_nodes: self.t_nodes,
            reference_factor: self.reference_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSection {
    pub players: Vec<usize>,
    pub reps: usize,
    pub steps: usize,
}

impl Default for GapSection {
    fn default() -> Self {
        Self {
            players: vec![8, 16, 32, 64],
            reps: 1000,
            steps: 64,
        }
    }
}

/// Sample sizes of the self-contained checks in `full-lq-acceptance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub hamiltonian_points: usize,
    pub chain_paths: usize,
    pub w2_instances: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            hamiltonian_points: 10_000,
            chain_paths: 10_000,
            w2_instances: 1000,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

fn increasing(field: &str, v: &[usize], min: usize) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    if v[0] < min || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(field, format!("must be strictly increasing with every entry >= {min}")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates. Errors name the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config("<syntax>", e.to_string().trim().to_string()))?;
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The master seed; wall-clock seeding is never used.
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("seed", "missing: set `seed` in the config or pass --seed"))
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.budget.validate()
    }

    /// Builds the game. Config problems come back as [`Error::Config`].
    pub fn build_spec(&self) -> Result<GameSpec> {
        self.spec.build()
    }
}

impl SpecConfig {
    pub fn generator(&self) -> Result<GeneratorMatrix> {
        match &self.generator {
            None => Ok(GeneratorMatrix::trivial()),
            Some(rows) => {
                GeneratorMatrix::new(rows, self.rate_bound).map_err(|e| Error::config("spec.generator", e.to_string()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !catalog::CATALOG.contains(&self.catalog.as_str()) {
            return Err(Error::config(
                "spec.catalog",
                format!("unknown catalog entry `{}` (known: {})", self.catalog, catalog::CATALOG.join(", ")),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("spec.horizon", "must be positive and finite"));
        }
        if self.x0.len() != 1 {
            return Err(Error::config("spec.x0", format!("catalog families have d = 1 (got {} entries)", self.x0.len())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("spec.x0", "entries must be finite"));
        }
        if let Some(b) = self.rate_bound {
            if !(b > 0.0) {
                return Err(Error::config("spec.rate_bound", "must be positive"));
            }
        }
        let states = self.generator()?.states();
        if self.initial_regime >= states {
            return Err(Error::config(
                "spec.initial_regime",
                format!("{} is out of range for {states} regime(s)", self.initial_regime),
            ));
        }
        let lq_family = matches!(self.catalog.as_str(), "lq" | "lq-mean-drift");
        if self.terminal_mean_coupling.is_some() && self.lq.is_none() {
            return Err(Error::config("spec.terminal_mean_coupling", "only meaningful together with spec.lq"));
        }
        if let Some(regimes) = &self.lq {
            if !lq_family {
                return Err(Error::config("spec.lq", format!("`{}` is not an LQ family", self.catalog)));
            }
            if regimes.len() != states {
                return Err(Error::config(
                    "spec.lq",
                    format!("{} entries for {states} regime(s)", regimes.len()),
                ));
            }
            for (i, r) in regimes.iter().enumerate() {
                let field = |name: &str| format!("spec.lq[{i}].{name}");
                let all = [
                    ("state_cost", r.state_cost),
                    ("control_cost", r.control_cost),
                    ("terminal_cost", r.terminal_cost),
                    ("b1", r.b1),
                    ("b2", r.b2),
                    ("sigma", r.sigma),
                    ("mean_coupling", r.mean_coupling),
                    ("mean_drift", r.mean_drift),
                    ("drift_const", r.drift_const),
                ];
                if let Some((name, _)) = all.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::config(field(name), "must be finite"));
                }
                if r.state_cost < 0.0 {
                    return Err(Error::config(field("state_cost"), "must be >= 0"));
                }
                if r.terminal_cost < 0.0 {
                    return Err(Error::config(field("terminal_cost"), "must be >= 0"));
                }
                if !(r.control_cost > 0.0) {
                    return Err(Error::config(field("control_cost"), "must be > 0"));
                }
                if r.sigma == 0.0 {
                    return Err(Error::config(field("sigma"), "must be nonzero (ellipticity)"));
                }
                if r.b2 == 0.0 {
                    return Err(Error::config(field("b2"), "must be nonzero (full-rank control)"));
                }
            }
        }
        Ok(())
    }

    fn build(&self) -> Result<GameSpec> {
        self.validate()?;
        let generator = self.generator()?;
        let x0 = DVector::from_vec(self.x0.clone());
        let Some(overrides) = &self.lq else {
            return catalog::build(&self.catalog, generator, self.horizon, x0, self.initial_regime);
        };
        let regimes = overrides
            .iter()
            .map(|r| {
                let mut reg = LqRegime::scalar(r.state_cost, r.control_cost, r.terminal_cost, r.b1, r.b2, r.sigma)
                    .with_mean_coupling(r.mean_coupling)
                    .with_mean_drift(DMatrix::from_element(1, 1, r.mean_drift));
                reg.drift_const = DVector::from_element(1, r.drift_const);
                reg
            })
            .collect();
        let coupling = self.terminal_mean_coupling.unwrap_or(self.catalog == "lq-mean-drift");
        let params = LqParams::new(regimes, coupling).map_err(|e| Error::config("spec.lq", e.to_string()))?;
        let mut spec = build_lq_spec(params, generator, self.horizon, x0, self.initial_regime)
            .map_err(|e| Error::config("spec.lq", e.to_string()))?;
        spec.name = self.catalog.clone();
        Ok(spec)
    }
}

impl Budgets {
    fn validate(&self) -> Result<()> {
        positive("budget.riccati_steps", self.riccati_steps)?;
        positive("budget.validation_samples", self.validation_samples)?;

        let f = &self.fbsde;
        for (name, v) in [
            ("blocks", f.blocks),
            ("particles", f.particles),
            ("steps", f.steps),
            ("max_picard", f.max_picard),
        ] {
            positive(&format!("budget.fbsde.{name}"), v)?;
        }
        f.budget().validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                Error::config(format!("budget.fbsde.{}", name.trim_start_matches("budget.")), reason)
            }
            other => other,
        })?;

        let p = &self.pde;
        positive("budget.pde.n_x", p.n_x)?;
        positive("budget.pde.n_t", p.n_t)?;
        if !(1..=2).contains(&p.players) {
            return Err(Error::config("budget.pde.players", "must be 1 or 2"));
        }
        p.grid().validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                Error::config(format!("budget.pde.{}", name.trim_start_matches("grid.")), reason)
            }
            other => other,
        })?;

        let s = &self.simulate;
        positive("budget.simulate.players", s.players)?;
        if s.players < 2 {
            return Err(Error::config("budget.simulate.players", "must be at least 2"));
        }
        if s.reps < 2 {
            return Err(Error::config("budget.simulate.reps", "must be at least 2"));
        }
        positive("budget.simulate.steps", s.steps)?;

        let c = &self.chaos;
        increasing("budget.chaos.players", &c.players, 2)?;
        if c.players.len() < 3 {
            return Err(Error::config("budget.chaos.players", "need at least 3 populations for a slope"));
        }
        if c.reps < 2 {
            return Err(Error::config("budget.chaos.reps", "must be at least 2"));
        }
        positive("budget.chaos.reference_factor", c.reference_factor)?;
        if c.t_nodes < 2 {
            return Err(Error::config("budget.chaos.t_nodes", "must be at least 2"));
        }
        if c.steps == 0 || c.steps % (c.t_nodes - 1) != 0 {
            return Err(Error::config("budget.chaos.steps", "must be a positive multiple of t_nodes - 1"));
        }

        let g = &self.gap;
        increasing("budget.gap.players", &g.players, 2)?;
        if g.reps < 2 {
            return Err(Error::config("budget.gap.reps", "must be at least 2"));
        }
        positive("budget.gap.steps", g.steps)?;

        let u = &self.suite;
        positive("budget.suite.hamiltonian_points", u.hamiltonian_points)?;
        positive("budget.suite.chain_paths", u.chain_paths)?;
        positive("budget.suite.w2_instances", u.w2_instances)?;
        Ok(())
    }
}

/// Interaction used by the `solve-pde` pipeline.
pub(crate) fn pde_interaction(players: usize) -> Interaction {
    Interaction::General { players }
}
