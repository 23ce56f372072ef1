//! Built-in coefficient families, selectable by name from a config file.
//!
//! | name                        | family                                            |
//! |-----------------------------|---------------------------------------------------|
//! | `lq`                        | scalar LQ, no mean interaction                    |
//! | `lq-mean-drift`             | scalar LQ with mean coupling in cost and drift    |
//! | `smooth-nonquadratic-test`  | quartic-plus-quadratic control cost, `b = alpha`  |
//!
//! Regime `i` of the LQ families gets state cost `1 + i` (resp. `1 + i/2`) and
//! diffusion `max(1 - i/4, 1/4)`, so multi-regime chains have genuinely
//! different per-regime solutions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{build_lq_spec, Coefficients, DeclaredConstants, GameSpec, LqParams, LqRegime};
use crate::error::{Error, Result};
use crate::measure::MeasureArg;
use crate::regime_chain::GeneratorMatrix;

pub const CATALOG: [&str; 3] = ["lq", "lq-mean-drift", "smooth-nonquadratic-test"];

fn regime_sigma(i: usize) -> f64 {
    (1.0 - 0.25 * i as f64).max(0.25)
}

/// Parameters of the named LQ family for a chain with `states` regimes.
pub fn lq_params(name: &str, states: usize) -> Result<LqParams> {
    match name {
        "lq" => LqParams::new(
            (0..states)
                .map(|i| LqRegime::scalar(1.0 + i as f64, 1.0, 1.0, 0.0, 1.0, regime_sigma(i)))
                .collect(),
            false,
        ),
        "lq-mean-drift" => LqParams::new(
            (0..states)
                .map(|i| {
                    LqRegime::scalar(1.0 + 0.5 * i as f64, 1.0, 1.0, -0.2, 1.0, regime_sigma(i))
                        .with_mean_coupling(0.5)
                        .with_mean_drift(DMatrix::from_element(1, 1, 0.3))
                })
                .collect(),
            true,
        ),
        other => Err(Error::config(
            "spec.catalog",
            format!("`{other}` is not an LQ catalog entry"),
        )),
    }
}

/// Builds any catalog entry.
pub fn build(
    name: &str,
    generator: GeneratorMatrix,
    horizon: f64,
    initial_state: DVector<f64>,
    initial_regime: usize,
) -> Result<GameSpec> {
    let mut spec = match name {
        "lq" | "lq-mean-drift" => build_lq_spec(
            lq_params(name, generator.states())?,
            generator,
            horizon,
            initial_state,
            initial_regime,
        )?,
        "smooth-nonquadratic-test" => {
            let states = generator.states();
            let coeffs = QuarticControl {
                sigma: (0..states).map(regime_sigma).collect(),
                state_weight: (0..states).map(|i| 1.0 + 0.5 * i as f64).collect(),
            };
            let constants = coeffs.declared_constants();
            GameSpec::new(
                name,
                Arc::new(coeffs),
                generator,
                horizon,
                initial_state,
                initial_regime,
                constants,
            )?
        }
        other => {
            return Err(Error::config(
                "spec.catalog",
                format!("unknown catalog entry `{other}` (known: {})", CATALOG.join(", ")),
            ))
        }
    };
    spec.name = name.to_string();
    Ok(spec)
}

/// Scalar game with `f = |a|^4/4 + |a|^2/2 + w_i |x|^2/2`, `g = |x|^2/2`,
/// `b = a`, `sigma = sigma_i`.
#[derive(Debug, Clone)]
pub struct QuarticControl {
    pub sigma: Vec<f64>,
    pub state_weight: Vec<f64>,
}

impl QuarticControl {
    /// Lipschitz constants hold on the validator's sampling box `|a| <= 3`.
    pub fn declared_constants(&self) -> DeclaredConstants {
        let s_min = self.sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let s_max = self.sigma.iter().copied().fold(0.0, f64::max);
        let w_max = self.state_weight.iter().copied().fold(0.0, f64::max);
        DeclaredConstants {
            lambda: 0.5,
            lipschitz: (3.0 * 9.0 + 1.0_f64).max(w_max),
            nu1: s_min * s_min,
            nu2: s_max * s_max,
        }
    }
}

impl Coefficients for QuarticControl {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_control(&self) -> usize {
        1
    }

    fn drift_offset(&self, _t: f64, _mu: &MeasureArg, _regime: usize) -> DVector<f64> {
        DVector::zeros(1)
    }

    fn drift_state(&self, _t: f64, _regime: usize) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn drift_control(&self, _t: f64, _regime: usize) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _mu: &MeasureArg, regime: usize) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma[regime])
    }

    fn diffusion_state_free(&self) -> bool {
        true
    }

    fn running_cost(&self, _t: f64, x: &DVector<f64>, _mu: &MeasureArg, alpha: &DVector<f64>, regime: usize) -> f64 {
        let a2 = alpha.norm_squared();
        0.25 * a2 * a2 + 0.5 * a2 + 0.5 * self.state_weight[regime] * x.norm_squared()
    }

    fn running_cost_grad_x(
        &self,
        _t: f64,
        x: &DVector<f64>,
        _mu: &MeasureArg,
        _alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64> {
        x * self.state_weight[regime]
    }

    fn running_cost_grad_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        alpha: &DVector<f64>,
        _regime: usize,
    ) -> DVector<f64> {
        alpha * (alpha.norm_squared() + 1.0)
    }

    fn running_cost_hess_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        alpha: &DVector<f64>,
        _regime: usize,
    ) -> DMatrix<f64> {
        let m = alpha.len();
        DMatrix::identity(m, m) * (alpha.norm_squared() + 1.0) + alpha * alpha.transpose() * 2.0
    }

    fn terminal_cost(&self, x: &DVector<f64>, _mu: &MeasureArg, _regime: usize) -> f64 {
        0.5 * x.norm_squared()
    }

    fn terminal_cost_grad_x(&self, x: &DVector<f64>, _mu: &MeasureArg, _regime: usize) -> DVector<f64> {
        x.clone()
    }
}

/// Controlled Brownian motion `dX = a dt + sigma dW` with
/// `f = running + control_weight |a|^2 / 2` and
/// `g = terminal + terminal_weight |x|^2 / 2`, identical in every regime.
/// Handy for cost-accounting checks where the answer is known in closed form.
#[derive(Debug, Clone)]
pub struct FreeMotion {
    pub dim: usize,
    pub sigma: f64,
    pub running: f64,
    pub control_weight: f64,
    pub terminal: f64,
    pub terminal_weight: f64,
}

impl FreeMotion {
    pub fn spec(self, generator: GeneratorMatrix, horizon: f64, x0: DVector<f64>) -> Result<GameSpec> {
        let constants = DeclaredConstants {
            lambda: 0.5 * self.control_weight,
            lipschitz: self.control_weight.max(self.terminal_weight).max(1.0),
            nu1: self.sigma * self.sigma,
            nu2: self.sigma * self.sigma,
        };
        GameSpec::new("free-motion", Arc::new(self), generator, horizon, x0, 0, constants)
    }
}

impl Coefficients for FreeMotion {
    fn dim_state(&self) -> usize {
        self.dim
    }

    fn dim_control(&self) -> usize {
        self.dim
    }

    fn drift_offset(&self, _t: f64, _mu: &MeasureArg, _regime: usize) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn drift_state(&self, _t: f64, _regime: usize) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }

    fn drift_control(&self, _t: f64, _regime: usize) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _mu: &MeasureArg, _regime: usize) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.sigma
    }

    fn diffusion_state_free(&self) -> bool {
        true
    }

    fn running_cost(&self, _t: f64, _x: &DVector<f64>, _mu: &MeasureArg, alpha: &DVector<f64>, _regime: usize) -> f64 {
        self.running + 0.5 * self.control_weight * alpha.norm_squared()
    }

    fn running_cost_grad_x(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        _alpha: &DVector<f64>,
        _regime: usize,
    ) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn running_cost_grad_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        alpha: &DVector<f64>,
        _regime: usize,
    ) -> DVector<f64> {
        alpha * self.control_weight
    }

    fn running_cost_hess_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        _alpha: &DVector<f64>,
        _regime: usize,
    ) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.control_weight
    }

    fn terminal_cost(&self, x: &DVector<f64>, _mu: &MeasureArg, _regime: usize) -> f64 {
        self.terminal + 0.5 * self.terminal_weight * x.norm_squared()
    }

    fn terminal_cost_grad_x(&self, x: &DVector<f64>, _mu: &MeasureArg, _regime: usize) -> DVector<f64> {
        x * self.terminal_weight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_builds() {
        let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap();
        for name in CATALOG {
            let spec = build(name, q.clone(), 1.0, DVector::zeros(1), 0).unwrap();
            assert_eq!(spec.name, name);
            assert_eq!(spec.regimes(), 2);
        }
        assert!(matches!(
            build("nope", q, 1.0, DVector::zeros(1), 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn quartic_hessian_matches_finite_differences() {
        let c = QuarticControl {
            sigma: vec![1.0],
            state_weight: vec![1.0],
        };
        let x = DVector::zeros(1);
        let mu = MeasureArg::dirac(&x);
        let a = DVector::from_element(1, 0.7);
        let h = c.running_cost_hess_alpha(0.0, &x, &mu, &a, 0)[(0, 0)];
        assert!((h - (3.0 * 0.49 + 1.0)).abs() < 1e-12);
    }
}
