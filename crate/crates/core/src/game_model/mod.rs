//! Game coefficients per regime and their sampled validation.
//!
//! The drift is always affine in the state and the control,
//!
//! ```text
//! b(t, x, mu, alpha, i) = b0(t, mu, i) + b1(t, i) x + b2(t, i) alpha
//! ```
//!
//! and the diffusion `sigma(t, x, mu, i)` never depends on the control.
//! Concrete families implement [`Coefficients`]; a [`GameSpec`] binds one
//! family to a horizon, a regime generator, an initial condition and the
//! constants the hypotheses are stated with.

pub mod catalog;
mod lq;
mod validate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measure::MeasureArg;
use crate::regime_chain::GeneratorMatrix;

pub use lq::{build_lq_spec, LqCoefficients, LqParams, LqRegime};
pub use validate::{validate_spec, CheckStatus, ValidationCheck, ValidationReport};

/// Evaluable coefficient functions of one game family.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim_state(&self) -> usize;
    fn dim_control(&self) -> usize;

    /// `b0(t, mu, i)`.
    fn drift_offset(&self, t: f64, mu: &MeasureArg, regime: usize) -> DVector<f64>;
    /// `b1(t, i)`, `d x d`.
    fn drift_state(&self, t: f64, regime: usize) -> DMatrix<f64>;
    /// `b2(t, i)`, `d x m`.
    fn drift_control(&self, t: f64, regime: usize) -> DMatrix<f64>;

    fn diffusion(&self, t: f64, x: &DVector<f64>, mu: &MeasureArg, regime: usize) -> DMatrix<f64>;

    /// Whether `sigma` ignores `x`. Particle loops then evaluate it once per
    /// block and node.
    fn diffusion_state_free(&self) -> bool {
        false
    }

    fn running_cost(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> f64;
    fn running_cost_grad_x(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64>;
    fn running_cost_grad_alpha(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64>;

    /// Hessian of `f` in `alpha`. The default differentiates the analytic
    /// gradient numerically.
    fn running_cost_hess_alpha(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> DMatrix<f64> {
        let m = alpha.len();
        let h = 1e-6;
        let mut hess = DMatrix::zeros(m, m);
        for j in 0..m {
            let mut up = alpha.clone();
            let mut dn = alpha.clone();
            up[j] += h;
            dn[j] -= h;
            let col = (self.running_cost_grad_alpha(t, x, mu, &up, regime)
                - self.running_cost_grad_alpha(t, x, mu, &dn, regime))
                / (2.0 * h);
            hess.set_column(j, &col);
        }
        (&hess + hess.transpose()) * 0.5
    }

    fn terminal_cost(&self, x: &DVector<f64>, mu: &MeasureArg, regime: usize) -> f64;
    fn terminal_cost_grad_x(&self, x: &DVector<f64>, mu: &MeasureArg, regime: usize) -> DVector<f64>;

    /// Linear-quadratic parameters, when the family is LQ. Enables closed
    /// forms in the minimizer and the Riccati oracle.
    fn lq(&self) -> Option<&LqParams> {
        None
    }
}

/// How players interact through the measure argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    /// Finite game where player `k` sees the empirical law of the others.
    General { players: usize },
    /// Mean-field N-player game with the full empirical measure.
    Empirical { players: usize },
    /// Limit game driven by the conditional law given the regime path.
    ConditionalLaw,
}

/// Constants the hypotheses are stated with. The validator compares its
/// sampled estimates against these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeclaredConstants {
    /// Strong convexity in the form `f(a') - f(a) - <a'-a, grad f(a)> >= lambda |a'-a|^2`.
    pub lambda: f64,
    /// Lipschitz bound for `b`, `sigma`, `grad f`, `grad g` (in `x` and `alpha`).
    pub lipschitz: f64,
    /// Lower ellipticity bound on `sigma sigma'`.
    pub nu1: f64,
    /// Upper ellipticity bound on `sigma sigma'`.
    pub nu2: f64,
}

/// One fully specified game.
#[derive(Clone)]
pub struct GameSpec {
    pub name: String,
    pub horizon: f64,
    pub generator: GeneratorMatrix,
    pub coefficients: Arc<dyn Coefficients>,
    pub constants: DeclaredConstants,
    pub initial_state: DVector<f64>,
    pub initial_regime: usize,
    pub interaction: Interaction,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("regimes", &self.generator.states())
            .field("dim_state", &self.dim_state())
            .field("dim_control", &self.dim_control())
            .field("interaction", &self.interaction)
            .finish()
    }
}

/// Everything `eval_coefficients` returns for one argument tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBundle {
    pub drift: DVector<f64>,
    pub diffusion: DMatrix<f64>,
    pub running_cost: f64,
    pub grad_x: DVector<f64>,
    pub grad_alpha: DVector<f64>,
}

impl GameSpec {
    pub fn new(
        name: impl Into<String>,
        coefficients: Arc<dyn Coefficients>,
        generator: GeneratorMatrix,
        horizon: f64,
        initial_state: DVector<f64>,
        initial_regime: usize,
        constants: DeclaredConstants,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", format!("must be positive, got {horizon}")));
        }
        if initial_state.len() != coefficients.dim_state() {
            return Err(Error::DimensionMismatch {
                what: "initial_state".into(),
                expected: coefficients.dim_state(),
                got: initial_state.len(),
            });
        }
        if initial_regime >= generator.states() {
            return Err(Error::RegimeOutOfRange {
                regime: initial_regime,
                states: generator.states(),
            });
        }
        if let Some(lq) = coefficients.lq() {
            if lq.regimes.len() != generator.states() {
                return Err(Error::DimensionMismatch {
                    what: "LQ regimes vs generator states".into(),
                    expected: generator.states(),
                    got: lq.regimes.len(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            horizon,
            generator,
            coefficients,
            constants,
            initial_state,
            initial_regime,
            interaction: Interaction::ConditionalLaw,
        })
    }

    pub fn with_interaction(mut self, interaction: Interaction) -> Self {
        self.interaction = interaction;
        self
    }

    pub fn dim_state(&self) -> usize {
        self.coefficients.dim_state()
    }

    pub fn dim_control(&self) -> usize {
        self.coefficients.dim_control()
    }

    pub fn regimes(&self) -> usize {
        self.generator.states()
    }

    pub fn lq(&self) -> Option<&LqParams> {
        self.coefficients.lq()
    }

    pub fn check_regime(&self, regime: usize) -> Result<()> {
        if regime < self.regimes() {
            Ok(())
        } else {
            Err(Error::RegimeOutOfRange {
                regime,
                states: self.regimes(),
            })
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                start: 0.0,
                end: self.horizon,
            })
        }
    }

    /// `b(t, x, mu, alpha, i)`.
    pub fn drift(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64> {
        let c = &self.coefficients;
        c.drift_offset(t, mu, regime) + c.drift_state(t, regime) * x + c.drift_control(t, regime) * alpha
    }

    /// Single bundled evaluation of every coefficient at one argument tuple.
    pub fn eval_coefficients(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> Result<CoefficientBundle> {
        self.check_regime(regime)?;
        self.check_time(t)?;
        let c = &self.coefficients;
        Ok(CoefficientBundle {
            drift: self.drift(t, x, mu, alpha, regime),
            diffusion: c.diffusion(t, x, mu, regime),
            running_cost: c.running_cost(t, x, mu, alpha, regime),
            grad_x: c.running_cost_grad_x(t, x, mu, alpha, regime),
            grad_alpha: c.running_cost_grad_alpha(t, x, mu, alpha, regime),
        })
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub(crate) fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

pub(crate) fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigen().eigenvalues;
    (ev.min(), ev.max())
}
