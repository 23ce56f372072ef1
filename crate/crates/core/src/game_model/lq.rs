use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{spectral_norm, sym_eigen_range, Coefficients, DeclaredConstants, GameSpec};
use crate::error::{Error, Result};
use crate::measure::MeasureArg;
use crate::regime_chain::GeneratorMatrix;

/// Linear-quadratic coefficients for one regime.
///
/// ```text
/// f = 1/2 a'Ra + 1/2 (x - s m)' Qx (x - s m)
/// g = 1/2 (x - s_g m)' G (x - s_g m)          (s_g = s or 0)
/// b = b0 + b1 x + b2 a + c m                   (m = mean of mu)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LqRegime {
    pub state_cost: DMatrix<f64>,
    pub control_cost: DMatrix<f64>,
    pub mean_coupling: f64,
    pub terminal_cost: DMatrix<f64>,
    pub drift_state: DMatrix<f64>,
    pub drift_control: DMatrix<f64>,
    pub mean_drift: DMatrix<f64>,
    pub drift_const: DVector<f64>,
    pub diffusion: DMatrix<f64>,
}

impl LqRegime {
    /// Scalar regime (`d = m = 1`), no mean interaction.
    pub fn scalar(state_cost: f64, control_cost: f64, terminal_cost: f64, b1: f64, b2: f64, sigma: f64) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self {
            state_cost: s(state_cost),
            control_cost: s(control_cost),
            mean_coupling: 0.0,
            terminal_cost: s(terminal_cost),
            drift_state: s(b1),
            drift_control: s(b2),
            mean_drift: s(0.0),
            drift_const: DVector::zeros(1),
            diffusion: s(sigma),
        }
    }

    pub fn with_mean_coupling(mut self, s: f64) -> Self {
        self.mean_coupling = s;
        self
    }

    pub fn with_mean_drift(mut self, c: DMatrix<f64>) -> Self {
        self.mean_drift = c;
        self
    }

    pub fn dim_state(&self) -> usize {
        self.state_cost.nrows()
    }

    pub fn dim_control(&self) -> usize {
        self.control_cost.nrows()
    }

    /// `R^{-1}`; `R` is checked positive definite at construction.
    pub fn control_cost_inv(&self) -> DMatrix<f64> {
        self.control_cost
            .clone()
            .cholesky()
            .expect("control cost is positive definite")
            .inverse()
    }

    /// `b2 R^{-1} b2'`.
    pub fn feedback_gain(&self) -> DMatrix<f64> {
        &self.drift_control * self.control_cost_inv() * self.drift_control.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqParams {
    pub regimes: Vec<LqRegime>,
    /// Whether the mean coupling `s` also enters the terminal cost.
    pub terminal_mean_coupling: bool,
}

impl LqParams {
    pub fn new(regimes: Vec<LqRegime>, terminal_mean_coupling: bool) -> Result<Self> {
        let p = Self {
            regimes,
            terminal_mean_coupling,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim_state(&self) -> usize {
        self.regimes[0].dim_state()
    }

    pub fn dim_control(&self) -> usize {
        self.regimes[0].dim_control()
    }

    pub fn terminal_coupling(&self, regime: usize) -> f64 {
        if self.terminal_mean_coupling {
            self.regimes[regime].mean_coupling
        } else {
            0.0
        }
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .regimes
            .first()
            .ok_or_else(|| Error::invalid("lq.regimes", "at least one regime is required"))?;
        let d = first.dim_state();
        let m = first.dim_control();
        for (i, r) in self.regimes.iter().enumerate() {
            let shape = |name: &str, mat: &DMatrix<f64>, rows: usize, cols: usize| -> Result<()> {
                if mat.nrows() != rows || mat.ncols() != cols {
                    return Err(Error::DimensionMismatch {
                        what: format!("regime {i} {name} ({}x{})", mat.nrows(), mat.ncols()),
                        expected: rows * cols,
                        got: mat.nrows() * mat.ncols(),
                    });
                }
                Ok(())
            };
            shape("state_cost", &r.state_cost, d, d)?;
            shape("control_cost", &r.control_cost, m, m)?;
            shape("terminal_cost", &r.terminal_cost, d, d)?;
            shape("drift_state", &r.drift_state, d, d)?;
            shape("drift_control", &r.drift_control, d, m)?;
            shape("mean_drift", &r.mean_drift, d, d)?;
            shape("diffusion", &r.diffusion, d, d)?;
            if r.drift_const.len() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("regime {i} drift_const"),
                    expected: d,
                    got: r.drift_const.len(),
                });
            }
            let symmetric = |name: &str, mat: &DMatrix<f64>| -> Result<()> {
                if (mat - mat.transpose()).amax() > 1e-12 {
                    return Err(Error::invalid(format!("regime {i} {name}"), "must be symmetric"));
                }
                Ok(())
            };
            symmetric("state_cost", &r.state_cost)?;
            symmetric("control_cost", &r.control_cost)?;
            symmetric("terminal_cost", &r.terminal_cost)?;
            if r.control_cost.clone().cholesky().is_none() {
                return Err(Error::invalid(format!("regime {i} control_cost"), "must be positive definite"));
            }
            for (name, mat) in [("state_cost", &r.state_cost), ("terminal_cost", &r.terminal_cost)] {
                if sym_eigen_range(mat).0 < -1e-12 {
                    return Err(Error::invalid(format!("regime {i} {name}"), "must be positive semidefinite"));
                }
            }
            if !r.mean_coupling.is_finite() {
                return Err(Error::invalid(format!("regime {i} mean_coupling"), "not finite"));
            }
        }
        Ok(())
    }

    /// Constants matching this family: `lambda = lambda_min(R)/2` in the
    /// `lambda |a'-a|^2` convexity form, ellipticity from `sigma sigma'`.
    pub fn declared_constants(&self) -> DeclaredConstants {
        let mut lambda = f64::INFINITY;
        let mut lip: f64 = 0.0;
        let mut nu1 = f64::INFINITY;
        let mut nu2: f64 = 0.0;
        for r in &self.regimes {
            lambda = lambda.min(0.5 * sym_eigen_range(&r.control_cost).0);
            let s = r.mean_coupling.abs();
            let sg = if self.terminal_mean_coupling { s } else { 0.0 };
            lip = lip
                .max(spectral_norm(&r.drift_state))
                .max(spectral_norm(&r.drift_control))
                .max(spectral_norm(&r.control_cost))
                .max(spectral_norm(&r.state_cost) * (1.0 + s))
                .max(spectral_norm(&r.terminal_cost) * (1.0 + sg))
                .max(spectral_norm(&r.mean_drift));
            let (lo, hi) = sym_eigen_range(&(&r.diffusion * r.diffusion.transpose()));
            nu1 = nu1.min(lo);
            nu2 = nu2.max(hi);
        }
        DeclaredConstants {
            lambda,
            lipschitz: lip.max(1e-12),
            nu1,
            nu2,
        }
    }
}

/// [`Coefficients`] for an [`LqParams`] family.
#[derive(Debug, Clone)]
pub struct LqCoefficients {
    params: LqParams,
}

impl LqCoefficients {
    pub fn new(params: LqParams) -> Self {
        Self { params }
    }

    fn shifted(&self, x: &DVector<f64>, mu: &MeasureArg, s: f64) -> DVector<f64> {
        if s == 0.0 {
            x.clone()
        } else {
            x - mu.mean() * s
        }
    }
}

impl Coefficients for LqCoefficients {
    fn dim_state(&self) -> usize {
        self.params.dim_state()
    }

    fn dim_control(&self) -> usize {
        self.params.dim_control()
    }

    fn drift_offset(&self, _t: f64, mu: &MeasureArg, regime: usize) -> DVector<f64> {
        let r = &self.params.regimes[regime];
        if r.mean_drift.iter().all(|&v| v == 0.0) {
            r.drift_const.clone()
        } else {
            &r.drift_const + &r.mean_drift * mu.mean()
        }
    }

    fn drift_state(&self, _t: f64, regime: usize) -> DMatrix<f64> {
        self.params.regimes[regime].drift_state.clone()
    }

    fn drift_control(&self, _t: f64, regime: usize) -> DMatrix<f64> {
        self.params.regimes[regime].drift_control.clone()
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _mu: &MeasureArg, regime: usize) -> DMatrix<f64> {
        self.params.regimes[regime].diffusion.clone()
    }

    fn diffusion_state_free(&self) -> bool {
        true
    }

    fn running_cost(&self, _t: f64, x: &DVector<f64>, mu: &MeasureArg, alpha: &DVector<f64>, regime: usize) -> f64 {
        let r = &self.params.regimes[regime];
        let y = self.shifted(x, mu, r.mean_coupling);
        0.5 * alpha.dot(&(&r.control_cost * alpha)) + 0.5 * y.dot(&(&r.state_cost * &y))
    }

    fn running_cost_grad_x(
        &self,
        _t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        _alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64> {
        let r = &self.params.regimes[regime];
        &r.state_cost * self.shifted(x, mu, r.mean_coupling)
    }

    fn running_cost_grad_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        alpha: &DVector<f64>,
        regime: usize,
    ) -> DVector<f64> {
        &self.params.regimes[regime].control_cost * alpha
    }

    fn running_cost_hess_alpha(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _mu: &MeasureArg,
        _alpha: &DVector<f64>,
        regime: usize,
    ) -> DMatrix<f64> {
        self.params.regimes[regime].control_cost.clone()
    }

    fn terminal_cost(&self, x: &DVector<f64>, mu: &MeasureArg, regime: usize) -> f64 {
        let r = &self.params.regimes[regime];
        let y = self.shifted(x, mu, self.params.terminal_coupling(regime));
        0.5 * y.dot(&(&r.terminal_cost * &y))
    }

    fn terminal_cost_grad_x(&self, x: &DVector<f64>, mu: &MeasureArg, regime: usize) -> DVector<f64> {
        let r = &self.params.regimes[regime];
        &r.terminal_cost * self.shifted(x, mu, self.params.terminal_coupling(regime))
    }

    fn lq(&self) -> Option<&LqParams> {
        Some(&self.params)
    }
}

/// Wraps LQ parameters into a [`GameSpec`] with analytic gradients.
pub fn build_lq_spec(
    params: LqParams,
    generator: GeneratorMatrix,
    horizon: f64,
    initial_state: DVector<f64>,
    initial_regime: usize,
) -> Result<GameSpec> {
    params.validate()?;
    if params.regimes.len() != generator.states() {
        return Err(Error::DimensionMismatch {
            what: "LQ regimes vs generator states".into(),
            expected: generator.states(),
            got: params.regimes.len(),
        });
    }
    let constants = params.declared_constants();
    GameSpec::new(
        "lq",
        Arc::new(LqCoefficients::new(params)),
        generator,
        horizon,
        initial_state,
        initial_regime,
        constants,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> GameSpec {
        let p = LqParams::new(vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0)], false).unwrap();
        build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let spec = unit();
        let x0 = DVector::zeros(1);
        let a0 = DVector::zeros(1);
        let b = spec
            .eval_coefficients(0.0, &x0, &MeasureArg::dirac(&x0), &a0, 0)
            .unwrap();
        assert_eq!(b.drift[0], 0.0);
        assert_eq!(b.running_cost, 0.0);
        let a1 = DVector::from_element(1, 1.0);
        let b = spec.eval_coefficients(0.0, &x0, &MeasureArg::dirac(&x0), &a1, 0).unwrap();
        assert_eq!(b.running_cost, 0.5);
        assert!(matches!(
            spec.eval_coefficients(0.0, &x0, &MeasureArg::dirac(&x0), &a0, 3),
            Err(Error::RegimeOutOfRange { regime: 3, states: 1 })
        ));
    }

    #[test]
    fn mean_coupling_cancels_state_cost() {
        let p = LqParams::new(
            vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0).with_mean_coupling(1.0)],
            true,
        )
        .unwrap();
        let spec = build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap();
        let x = DVector::from_element(1, 1.0);
        let b = spec
            .eval_coefficients(0.0, &x, &MeasureArg::dirac(&x), &DVector::zeros(1), 0)
            .unwrap();
        assert_eq!(b.running_cost, 0.0);
    }

    #[test]
    fn identical_regimes_give_identical_coefficients() {
        let r = LqRegime::scalar(1.5, 2.0, 0.5, -0.3, 1.0, 0.8);
        let p = LqParams::new(vec![r.clone(), r], false).unwrap();
        let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![1.0, -1.0]], None).unwrap();
        let spec = build_lq_spec(p, q, 1.0, DVector::zeros(1), 0).unwrap();
        let x = DVector::from_element(1, 0.7);
        let a = DVector::from_element(1, -0.2);
        let mu = MeasureArg::dirac(&x);
        let b0 = spec.eval_coefficients(0.3, &x, &mu, &a, 0).unwrap();
        let b1 = spec.eval_coefficients(0.3, &x, &mu, &a, 1).unwrap();
        assert_eq!(b0, b1);
    }

    #[test]
    fn rejects_bad_params() {
        let mut r = LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0);
        r.control_cost[(0, 0)] = -1.0;
        assert!(LqParams::new(vec![r], false).is_err());
        let mut r = LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0);
        r.drift_control = DMatrix::zeros(2, 1);
        assert!(matches!(
            LqParams::new(vec![r], false),
            Err(Error::DimensionMismatch { .. })
        ));
        let p = LqParams::new(vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0)], false).unwrap();
        let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![1.0, -1.0]], None).unwrap();
        assert!(build_lq_spec(p, q, 1.0, DVector::zeros(1), 0).is_err());
    }
}
