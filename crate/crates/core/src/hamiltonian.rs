//! `H(t, x, mu, alpha, p, q, i) = p.b + f + tr(q' sigma)` and its minimizer in
//! `alpha`. Since `sigma` does not see the control, the minimizer never
//! depends on `q`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game_model::{spectral_norm, GameSpec};
use crate::measure::MeasureArg;

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizerResult {
    pub alpha_hat: DVector<f64>,
    pub h_value: f64,
    pub gradient_norm_at_opt: f64,
    pub iterations: usize,
    pub closed_form: bool,
    /// `C` in `|alpha_hat| <= C (1 + |p|)` implied by strong convexity at
    /// this `(t, x, mu, i)`.
    pub growth_constant: f64,
}

pub fn hamiltonian_value(
    spec: &GameSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &MeasureArg,
    alpha: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    regime: usize,
) -> Result<f64> {
    spec.check_regime(regime)?;
    let c = &spec.coefficients;
    let drift = spec.drift(t, x, mu, alpha, regime);
    let sigma = c.diffusion(t, x, mu, regime);
    let trace = if q.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        q.component_mul(&sigma).sum()
    };
    Ok(p.dot(&drift) + c.running_cost(t, x, mu, alpha, regime) + trace)
}

/// The part of `H` that depends on `alpha`, up to a constant.
fn reduced(spec: &GameSpec, t: f64, x: &DVector<f64>, mu: &MeasureArg, b2p: &DVector<f64>, a: &DVector<f64>, i: usize) -> f64 {
    spec.coefficients.running_cost(t, x, mu, a, i) + b2p.dot(a)
}

pub fn minimize(
    spec: &GameSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &MeasureArg,
    p: &DVector<f64>,
    regime: usize,
    tol: f64,
) -> Result<MinimizerResult> {
    spec.check_regime(regime)?;
    let c = &spec.coefficients;
    let b2 = c.drift_control(t, regime);
    let b2p = b2.transpose() * p;
    let zero_q = DMatrix::zeros(spec.dim_state(), spec.dim_state());
    let lambda = spec.constants.lambda.max(f64::MIN_POSITIVE);
    let grad0 = c.running_cost_grad_alpha(t, x, mu, &DVector::zeros(spec.dim_control()), regime);
    let growth_constant = grad0.norm().max(spectral_norm(&b2)) / (2.0 * lambda);

    if let Some(lq) = c.lq() {
        let reg = &lq.regimes[regime];
        let alpha_hat = -(reg.control_cost_inv() * &b2p);
        let grad = c.running_cost_grad_alpha(t, x, mu, &alpha_hat, regime) + &b2p;
        return Ok(MinimizerResult {
            h_value: hamiltonian_value(spec, t, x, mu, &alpha_hat, p, &zero_q, regime)?,
            gradient_norm_at_opt: grad.norm(),
            alpha_hat,
            iterations: 0,
            closed_form: true,
            growth_constant,
        });
    }

    // Damped Newton from 0 with Armijo backtracking.
    let mut a = DVector::zeros(spec.dim_control());
    let mut iterations = 0;
    loop {
        let g = c.running_cost_grad_alpha(t, x, mu, &a, regime) + &b2p;
        let gn = g.norm();
        if gn <= tol {
            return Ok(MinimizerResult {
                h_value: hamiltonian_value(spec, t, x, mu, &a, p, &zero_q, regime)?,
                alpha_hat: a,
                gradient_norm_at_opt: gn,
                iterations,
                closed_form: false,
                growth_constant,
            });
        }
        if iterations >= MAX_NEWTON || !gn.is_finite() {
            return Err(Error::NonConvergence {
                iterations,
                residual: gn,
            });
        }
        iterations += 1;
        let hess = c.running_cost_hess_alpha(t, x, mu, &a, regime);
        let step = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -&g,
        };
        let phi0 = reduced(spec, t, x, mu, &b2p, &a, regime);
        let slope = g.dot(&step);
        // Slack for round-off in the reduced value: without it the test can
        // accept tiny steps at random near the optimum and Newton stalls.
        let slack = 16.0 * f64::EPSILON * (1.0 + phi0.abs());
        let mut s = 1.0;
        let mut next = &a + &step;
        while s > 1e-12 && reduced(spec, t, x, mu, &b2p, &next, regime) > phi0 + 1e-4 * s * slope + slack {
            s *= 0.5;
            next = &a + &step * s;
        }
        if s <= 1e-12 {
            next = &a + &step;
        }
        a = next;
    }
}

/// `alpha_hat` with the per-regime LQ gains `-R^{-1} b2'` cached, for
/// particle loops. Falls back to [`minimize`] for other families.
#[derive(Debug, Clone)]
pub struct Minimizer<'a> {
    spec: &'a GameSpec,
    gains: Option<Vec<DMatrix<f64>>>,
}

impl<'a> Minimizer<'a> {
    pub fn new(spec: &'a GameSpec) -> Self {
        let gains = spec.lq().map(|lq| {
            lq.regimes
                .iter()
                .map(|r| -(r.control_cost_inv() * r.drift_control.transpose()))
                .collect()
        });
        Self { spec, gains }
    }

    pub fn alpha(&self, t: f64, x: &DVector<f64>, mu: &MeasureArg, p: &DVector<f64>, regime: usize) -> Result<DVector<f64>> {
        match &self.gains {
            Some(g) => Ok(&g[regime] * p),
            None => Ok(minimize(self.spec, t, x, mu, p, regime, DEFAULT_TOL)?.alpha_hat),
        }
    }

    /// [`Minimizer::alpha`] into a preallocated vector.
    pub fn alpha_into(
        &self,
        t: f64,
        x: &DVector<f64>,
        mu: &MeasureArg,
        p: &DVector<f64>,
        regime: usize,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        match &self.gains {
            Some(g) => out.gemv(1.0, &g[regime], p, 0.0),
            None => out.copy_from(&minimize(self.spec, t, x, mu, p, regime, DEFAULT_TOL)?.alpha_hat),
        }
        Ok(())
    }
}

/// `grad_x H` at `(t, x, mu, alpha, p, q, i)`. The `q` term is differentiated
/// numerically and skipped when `q == 0` or `sigma` is state-free.
pub fn grad_x(
    spec: &GameSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &MeasureArg,
    alpha: &DVector<f64>,
    p: &DVector<f64>,
    q: Option<&DMatrix<f64>>,
    regime: usize,
) -> DVector<f64> {
    let c = &spec.coefficients;
    let mut g = c.drift_state(t, regime).transpose() * p + c.running_cost_grad_x(t, x, mu, alpha, regime);
    if let Some(q) = q.filter(|q| q.iter().any(|&v| v != 0.0)) {
        let h = 1e-6;
        for k in 0..x.len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            let ds = (c.diffusion(t, &up, mu, regime) - c.diffusion(t, &dn, mu, regime)) / (2.0 * h);
            g[k] += q.component_mul(&ds).sum();
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::{build_lq_spec, catalog, LqParams, LqRegime};
    use crate::regime_chain::GeneratorMatrix;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn unit_spec() -> GameSpec {
        let p = LqParams::new(vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0)], false).unwrap();
        build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap()
    }

    #[test]
    fn value_examples() {
        let s = unit_spec();
        let mu = MeasureArg::dirac(&v(0.0));
        let z = DMatrix::zeros(1, 1);
        assert_eq!(hamiltonian_value(&s, 0.0, &v(0.0), &mu, &v(0.0), &v(0.0), &z, 0).unwrap(), 0.0);
        assert_eq!(hamiltonian_value(&s, 0.0, &v(0.0), &mu, &v(1.0), &v(1.0), &z, 0).unwrap(), 1.5);
        let id = DMatrix::identity(1, 1);
        assert_eq!(hamiltonian_value(&s, 0.0, &v(0.0), &mu, &v(0.0), &v(0.0), &id, 0).unwrap(), 1.0);
        assert!(matches!(
            hamiltonian_value(&s, 0.0, &v(0.0), &mu, &v(0.0), &v(0.0), &z, 3),
            Err(Error::RegimeOutOfRange { .. })
        ));
    }

    #[test]
    fn lq_closed_form() {
        let s = unit_spec();
        let r = minimize(&s, 0.0, &v(0.0), &MeasureArg::dirac(&v(0.0)), &v(2.0), 0, DEFAULT_TOL).unwrap();
        assert!(r.closed_form);
        assert_eq!(r.alpha_hat[0], -2.0);
    }

    /// Root of `a^3 + a + 1` by a fine grid scan and then bisection.
    fn cubic_root_oracle() -> f64 {
        let cubic = |a: f64| a * a * a + a + 1.0;
        let h = 1e-6;
        let (mut lo, mut hi) = (-2.0, 0.0);
        let mut a = -2.0;
        while a < 0.0 {
            if cubic(a) <= 0.0 && cubic(a + h) > 0.0 {
                lo = a;
                hi = a + h;
                break;
            }
            a += h;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cubic(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quartic_newton_matches_cubic_root() {
        let s = catalog::build("smooth-nonquadratic-test", GeneratorMatrix::trivial(), 1.0, v(0.0), 0).unwrap();
        let r = minimize(&s, 0.0, &v(0.0), &MeasureArg::dirac(&v(0.0)), &v(1.0), 0, DEFAULT_TOL).unwrap();
        assert!(!r.closed_form);
        let root = cubic_root_oracle();
        assert!((root + 0.68233).abs() < 1e-5);
        assert!((r.alpha_hat[0] - root).abs() < 1e-9, "{} vs {root}", r.alpha_hat[0]);
        assert!(r.gradient_norm_at_opt <= DEFAULT_TOL);
    }

    #[test]
    fn zero_costate_gives_zero_control() {
        let s = catalog::build("smooth-nonquadratic-test", GeneratorMatrix::trivial(), 1.0, v(0.0), 0).unwrap();
        let r = minimize(&s, 0.0, &v(1.0), &MeasureArg::dirac(&v(0.0)), &v(0.0), 0, DEFAULT_TOL).unwrap();
        assert_eq!(r.alpha_hat[0], 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn grad_x_is_adjoint_drift_plus_cost_gradient() {
        let s = unit_spec();
        let g = grad_x(&s, 0.0, &v(2.0), &MeasureArg::dirac(&v(0.0)), &v(0.0), &v(5.0), None, 0);
        // b1 = 0, grad_x f = Qx x.
        assert_eq!(g[0], 2.0);
    }
}
