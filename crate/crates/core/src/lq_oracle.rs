//! Riccati ground truth for the regime-switching LQ game.
//!
//! With `B = b2 R^{-1} b2'` and the ansatz `P = K(t,i) X + L(t,i) m + k(t,i)`,
//! `m` the conditional mean given the regime path, matching drift terms of the
//! adjoint equation gives, per regime `i`,
//!
//! ```text
//! K' + K b1 + b1'K - K B K + Qx               + sum_j q_ij (K_j - K_i) = 0,  K(T) = G
//! L' + L(b1+c) + b1'L - K B L + K c
//!    - L B (K+L) - s Qx                       + sum_j q_ij (L_j - L_i) = 0,  L(T) = -s_g G
//! k' + b1'k - (K+L) B k + (K+L) b0            + sum_j q_ij (k_j - k_i) = 0,  k(T) = 0
//! ```
//!
//! and the conditional mean and covariance follow
//! `m' = (b1 + c - B(K+L)) m - B k + b0`, `S' = A S + S A' + sigma sigma'`
//! with `A = b1 - B K`. The conditional law is Gaussian, which also gives the
//! expected cost along a regime path in closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game_model::{LqParams, LqRegime};
use crate::io::fmt_f64;
use crate::regime_chain::{GeneratorMatrix, RegimePath};

const LOCAL_TOL: f64 = 1e-8;
const BLOWUP: f64 = 1e8;
const MAX_SPLIT_DEPTH: u32 = 16;
const MEAN_FLOW_STEP: f64 = 1e-3;

/// `n + 1` equally spaced nodes on `[0, horizon]`.
pub fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| horizon * k as f64 / n as f64).collect()
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub params: LqParams,
    pub generator: GeneratorMatrix,
    pub grid: Vec<f64>,
    /// `K[node][regime]`.
    pub quadratic: Vec<Vec<DMatrix<f64>>>,
    /// `L[node][regime]`.
    pub mean_coef: Vec<Vec<DMatrix<f64>>>,
    /// `k[node][regime]`.
    pub affine: Vec<Vec<DVector<f64>>>,
    pub max_local_error: f64,
    /// RK4 steps actually taken (step doubling may subdivide grid cells).
    pub steps: usize,
}

/// Flat layout per regime: `K (d*d, column-major) | L (d*d) | k (d)`.
struct Layout {
    d: usize,
    regimes: usize,
}

impl Layout {
    fn block(&self) -> usize {
        2 * self.d * self.d + self.d
    }
    fn len(&self) -> usize {
        self.block() * self.regimes
    }
    fn unpack(&self, y: &[f64], i: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let d = self.d;
        let o = i * self.block();
        (
            DMatrix::from_column_slice(d, d, &y[o..o + d * d]),
            DMatrix::from_column_slice(d, d, &y[o + d * d..o + 2 * d * d]),
            DVector::from_column_slice(&y[o + 2 * d * d..o + self.block()]),
        )
    }
    fn pack(&self, y: &mut [f64], i: usize, k: &DMatrix<f64>, l: &DMatrix<f64>, a: &DVector<f64>) {
        let d = self.d;
        let o = i * self.block();
        y[o..o + d * d].copy_from_slice(k.as_slice());
        y[o + d * d..o + 2 * d * d].copy_from_slice(l.as_slice());
        y[o + 2 * d * d..o + self.block()].copy_from_slice(a.as_slice());
    }
}

struct System<'a> {
    params: &'a LqParams,
    q: &'a GeneratorMatrix,
    gains: Vec<DMatrix<f64>>,
    layout: Layout,
}

impl<'a> System<'a> {
    fn new(params: &'a LqParams, q: &'a GeneratorMatrix) -> Self {
        Self {
            params,
            q,
            gains: params.regimes.iter().map(LqRegime::feedback_gain).collect(),
            layout: Layout {
                d: params.dim_state(),
                regimes: params.regimes.len(),
            },
        }
    }

    /// `d/dt` of the packed state (the system is autonomous).
    fn rhs(&self, y: &[f64]) -> Vec<f64> {
        let lay = &self.layout;
        let blocks: Vec<_> = (0..lay.regimes).map(|i| lay.unpack(y, i)).collect();
        let mut out = vec![0.0; lay.len()];
        for (i, (k, l, a)) in blocks.iter().enumerate() {
            let r = &self.params.regimes[i];
            let b = &self.gains[i];
            let b1 = &r.drift_state;
            let c = &r.mean_drift;
            let kl = k + l;
            let mut dk = k * b1 + b1.transpose() * k - k * b * k + &r.state_cost;
            let mut dl = l * (b1 + c) + b1.transpose() * l - k * b * l + k * c - l * b * &kl
                - &r.state_cost * r.mean_coupling;
            let mut da = b1.transpose() * a - &kl * b * a + &kl * &r.drift_const;
            for (j, (kj, lj, aj)) in blocks.iter().enumerate() {
                let q = self.q.rate(i, j);
                if j != i && q != 0.0 {
                    dk += (kj - k) * q;
                    dl += (lj - l) * q;
                    da += (aj - a) * q;
                }
            }
            lay.pack(&mut out, i, &(-dk), &(-dl), &(-da));
        }
        out
    }

    fn terminal(&self) -> Vec<f64> {
        let lay = &self.layout;
        let mut y = vec![0.0; lay.len()];
        for (i, r) in self.params.regimes.iter().enumerate() {
            let l = &r.terminal_cost * -self.params.terminal_coupling(i);
            lay.pack(&mut y, i, &r.terminal_cost, &l, &DVector::zeros(lay.d));
        }
        y
    }
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn rk4(sys: &System, y: &[f64], h: f64) -> Vec<f64> {
    let k1 = sys.rhs(y);
    let k2 = sys.rhs(&axpy(y, 0.5 * h, &k1));
    let k3 = sys.rhs(&axpy(y, 0.5 * h, &k2));
    let k4 = sys.rhs(&axpy(y, h, &k3));
    y.iter()
        .enumerate()
        .map(|(n, v)| v + h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]))
        .collect()
}

/// One step of size `h` (negative = backward) with step-doubling control.
/// Returns the new state, the worst accepted local error and the steps taken.
fn controlled_step(sys: &System, y: &[f64], h: f64, depth: u32) -> (Vec<f64>, f64, usize) {
    let full = rk4(sys, y, h);
    let half = rk4(sys, &rk4(sys, y, 0.5 * h), 0.5 * h);
    let err = full
        .iter()
        .zip(&half)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / 15.0;
    if err <= LOCAL_TOL || depth >= MAX_SPLIT_DEPTH || !err.is_finite() {
        return (half, err, 2);
    }
    let (mid, e1, n1) = controlled_step(sys, y, 0.5 * h, depth + 1);
    let (end, e2, n2) = controlled_step(sys, &mid, 0.5 * h, depth + 1);
    (end, e1.max(e2), n1 + n2)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 {
        return Err(Error::invalid("grid", "needs at least two nodes starting at 0"));
    }
    let horizon = grid[grid.len() - 1];
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        if !(h > 0.0) {
            return Err(Error::GridOutOfRange { t: w[1], horizon });
        }
        if h > horizon / 200.0 * (1.0 + 1e-9) {
            return Err(Error::invalid("grid", format!("step {h} exceeds T/200")));
        }
    }
    Ok(())
}

pub fn solve_riccati(params: &LqParams, generator: &GeneratorMatrix, grid: &[f64]) -> Result<RiccatiSolution> {
    check_grid(grid)?;
    if params.regimes.len() != generator.states() {
        return Err(Error::DimensionMismatch {
            what: "LQ regimes vs generator states".into(),
            expected: generator.states(),
            got: params.regimes.len(),
        });
    }
    let sys = System::new(params, generator);
    let lay = &sys.layout;
    let n = grid.len();
    let mut states = vec![Vec::new(); n];
    let mut y = sys.terminal();
    let mut max_err: f64 = 0.0;
    let mut steps = 0;
    states[n - 1] = y.clone();
    for node in (0..n - 1).rev() {
        let h = grid[node] - grid[node + 1];
        let (mut next, err, taken) = controlled_step(&sys, &y, h, 0);
        if !(err <= LOCAL_TOL) {
            // Step doubling cannot resolve the cell: the flow is crossing a pole.
            let norm = next.iter().chain(&y).fold(0.0_f64, |a, v| a.max(v.abs()));
            return Err(Error::BlowUp {
                t: grid[node],
                norm: if norm.is_finite() { norm.max(BLOWUP) } else { f64::INFINITY },
            });
        }
        max_err = max_err.max(err);
        steps += taken;
        for i in 0..lay.regimes {
            let (k, l, a) = lay.unpack(&next, i);
            let norm = k.norm().max(l.norm()).max(a.norm());
            if !(norm <= BLOWUP) {
                return Err(Error::BlowUp { t: grid[node], norm });
            }
            let asym = (&k - k.transpose()).amax();
            if asym > 1e-8 {
                return Err(Error::AsymmetryDrift {
                    t: grid[node],
                    asymmetry: asym,
                });
            }
            let k = (&k + k.transpose()) * 0.5;
            lay.pack(&mut next, i, &k, &l, &a);
        }
        states[node] = next.clone();
        y = next;
    }
    let mut quadratic = Vec::with_capacity(n);
    let mut mean_coef = Vec::with_capacity(n);
    let mut affine = Vec::with_capacity(n);
    for s in &states {
        let (mut ks, mut ls, mut as_) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..lay.regimes {
            let (k, l, a) = lay.unpack(s, i);
            ks.push(k);
            ls.push(l);
            as_.push(a);
        }
        quadratic.push(ks);
        mean_coef.push(ls);
        affine.push(as_);
    }
    Ok(RiccatiSolution {
        params: params.clone(),
        generator: generator.clone(),
        grid: grid.to_vec(),
        quadratic,
        mean_coef,
        affine,
        max_local_error: max_err,
        steps,
    })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn dim(&self) -> usize {
        self.params.dim_state()
    }

    /// Bracketing node and weight of `t` (linear interpolation).
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.horizon();
        if !(0.0..=end).contains(&t) {
            return Err(Error::TimeOutOfRange { t, start: 0.0, end });
        }
        let n = self.grid.partition_point(|&g| g <= t).clamp(1, self.grid.len() - 1) - 1;
        let w = (t - self.grid[n]) / (self.grid[n + 1] - self.grid[n]);
        Ok((n, w))
    }

    /// `(K, L, k)` at time `t` in regime `i`.
    pub fn coefficients_at(&self, t: f64, regime: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        if regime >= self.generator.states() {
            return Err(Error::RegimeOutOfRange {
                regime,
                states: self.generator.states(),
            });
        }
        let (n, w) = self.locate(t)?;
        let lerp_m = |v: &Vec<Vec<DMatrix<f64>>>| &v[n][regime] * (1.0 - w) + &v[n + 1][regime] * w;
        Ok((
            lerp_m(&self.quadratic),
            lerp_m(&self.mean_coef),
            &self.affine[n][regime] * (1.0 - w) + &self.affine[n + 1][regime] * w,
        ))
    }

    /// `-R^{-1} b2' p` at the decoupling field value.
    pub fn feedback(&self, t: f64, x: &DVector<f64>, xbar: &DVector<f64>, regime: usize) -> Result<DVector<f64>> {
        let p = decoupling_field_lq(self, t, x, xbar, regime)?;
        let r = &self.params.regimes[regime];
        Ok(-(r.control_cost_inv() * r.drift_control.transpose() * p))
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t,regime");
        for name in ["K", "L"] {
            for a in 0..d {
                for b in 0..d {
                    out.push_str(&format!(",{name}_{a}{b}"));
                }
            }
        }
        for a in 0..d {
            out.push_str(&format!(",k_{a}"));
        }
        out.push('\n');
        for (n, t) in self.grid.iter().enumerate() {
            for i in 0..self.generator.states() {
                out.push_str(&format!("{},{i}", fmt_f64(*t)));
                for m in [&self.quadratic[n][i], &self.mean_coef[n][i]] {
                    for a in 0..d {
                        for b in 0..d {
                            out.push(',');
                            out.push_str(&fmt_f64(m[(a, b)]));
                        }
                    }
                }
                for v in self.affine[n][i].iter() {
                    out.push(',');
                    out.push_str(&fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// `p = K(t,i) x + L(t,i) xbar + k(t,i)`.
pub fn decoupling_field_lq(
    sol: &RiccatiSolution,
    t: f64,
    x: &DVector<f64>,
    xbar: &DVector<f64>,
    regime: usize,
) -> Result<DVector<f64>> {
    let (k, l, a) = sol.coefficients_at(t, regime)?;
    Ok(k * x + l * xbar + a)
}

/// Max over grid cells of the defect of the stored solution in the ODE
/// system: the cell increment against Simpson's rule with the midpoint taken
/// from cubic Hermite interpolation of the stored nodes.
pub fn riccati_residual(sol: &RiccatiSolution) -> f64 {
    let sys = System::new(&sol.params, &sol.generator);
    let lay = &sys.layout;
    let pack = |n: usize| {
        let mut y = vec![0.0; lay.len()];
        for i in 0..lay.regimes {
            lay.pack(&mut y, i, &sol.quadratic[n][i], &sol.mean_coef[n][i], &sol.affine[n][i]);
        }
        y
    };
    let mut worst: f64 = 0.0;
    let mut y0 = pack(0);
    let mut f0 = sys.rhs(&y0);
    for n in 0..sol.grid.len() - 1 {
        let h = sol.grid[n + 1] - sol.grid[n];
        let y1 = pack(n + 1);
        let f1 = sys.rhs(&y1);
        let mid: Vec<f64> = (0..y0.len())
            .map(|k| 0.5 * (y0[k] + y1[k]) + h / 8.0 * (f0[k] - f1[k]))
            .collect();
        let fm = sys.rhs(&mid);
        for k in 0..y0.len() {
            let simpson = h / 6.0 * (f0[k] + 4.0 * fm[k] + f1[k]);
            worst = worst.max(((y1[k] - y0[k]) - simpson).abs() / h);
        }
        y0 = y1;
        f0 = f1;
    }
    worst
}

/// Conditional mean, covariance and expected cost given one regime path.
#[derive(Debug, Clone)]
pub struct MeanFlow {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    /// `E[ int f dt + g | regime path ]` for a player in equilibrium.
    pub expected_cost: f64,
}

impl MeanFlow {
    /// Linear interpolation of the mean.
    pub fn mean_at(&self, t: f64) -> DVector<f64> {
        let n = self
            .times
            .partition_point(|&g| g <= t)
            .clamp(1, self.times.len() - 1)
            - 1;
        let w = ((t - self.times[n]) / (self.times[n + 1] - self.times[n])).clamp(0.0, 1.0);
        &self.mean[n] * (1.0 - w) + &self.mean[n + 1] * w
    }

    pub fn covariance_at(&self, t: f64) -> DMatrix<f64> {
        let n = self
            .times
            .partition_point(|&g| g <= t)
            .clamp(1, self.times.len() - 1)
            - 1;
        let w = ((t - self.times[n]) / (self.times[n + 1] - self.times[n])).clamp(0.0, 1.0);
        &self.covariance[n] * (1.0 - w) + &self.covariance[n + 1] * w
    }
}

/// Packed `(m, S, J)`.
fn flow_rhs(sol: &RiccatiSolution, t: f64, regime: usize, y: &[f64]) -> Vec<f64> {
    let d = sol.dim();
    let r = &sol.params.regimes[regime];
    let (k, l, a) = sol
        .coefficients_at(t.clamp(0.0, sol.horizon()), regime)
        .expect("regime checked by caller");
    let m = DVector::from_column_slice(&y[..d]);
    let s = DMatrix::from_column_slice(d, d, &y[d..d + d * d]);
    let rinv_b2t = r.control_cost_inv() * r.drift_control.transpose();
    let b = &r.drift_control * &rinv_b2t;
    let kl = &k + &l;
    let dm = (&r.drift_state + &r.mean_drift - &b * &kl) * &m - &b * &a + &r.drift_const;
    let ax = &r.drift_state - &b * &k;
    let ds = &ax * &s + &s * ax.transpose() + &r.diffusion * r.diffusion.transpose();
    let alpha_mean = -(&rinv_b2t * (&kl * &m + &a));
    let alpha_gain = &rinv_b2t * &k;
    let y_mean = &m * (1.0 - r.mean_coupling);
    let control = alpha_mean.dot(&(&r.control_cost * &alpha_mean))
        + (&r.control_cost * &alpha_gain * &s * alpha_gain.transpose()).trace();
    let state = y_mean.dot(&(&r.state_cost * &y_mean)) + (&r.state_cost * &s).trace();
    let mut out = Vec::with_capacity(y.len());
    out.extend_from_slice(dm.as_slice());
    out.extend_from_slice(ds.as_slice());
    out.push(0.5 * (control + state));
    out
}

/// Integrates the conditional mean, covariance and cost along `path` from
/// the deterministic initial state `x0`, reporting at the solution grid.
pub fn mean_flow_lq(sol: &RiccatiSolution, path: &RegimePath, x0: &DVector<f64>) -> Result<MeanFlow> {
    let d = sol.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            what: "x0".into(),
            expected: d,
            got: x0.len(),
        });
    }
    if path.initial_state() >= sol.generator.states()
        || path.jumps().iter().any(|&(_, s)| s >= sol.generator.states())
    {
        return Err(Error::RegimeOutOfRange {
            regime: path.jumps().iter().map(|j| j.1).chain([path.initial_state()]).max().unwrap_or(0),
            states: sol.generator.states(),
        });
    }
    let mut y = vec![0.0; d + d * d + 1];
    y[..d].copy_from_slice(x0.as_slice());
    let mut mean = vec![x0.clone()];
    let mut covariance = vec![DMatrix::zeros(d, d)];
    for w in sol.grid.windows(2) {
        // Break the cell at regime jumps, then into RK4 substeps.
        let mut cuts = vec![w[0]];
        cuts.extend(path.jumps_between(w[0], w[1]).map(|(t, _, _)| t).filter(|&t| t > w[0] && t < w[1]));
        cuts.push(w[1]);
        for seg in cuts.windows(2) {
            let regime = path.state_at(seg[0]);
            let n = ((seg[1] - seg[0]) / MEAN_FLOW_STEP).ceil().max(1.0) as usize;
            let h = (seg[1] - seg[0]) / n as f64;
            for s in 0..n {
                let t = seg[0] + s as f64 * h;
                let k1 = flow_rhs(sol, t, regime, &y);
                let k2 = flow_rhs(sol, t + 0.5 * h, regime, &axpy(&y, 0.5 * h, &k1));
                let k3 = flow_rhs(sol, t + 0.5 * h, regime, &axpy(&y, 0.5 * h, &k2));
                let k4 = flow_rhs(sol, t + h, regime, &axpy(&y, h, &k3));
                for (n, v) in y.iter_mut().enumerate() {
                    *v += h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]);
                }
            }
        }
        mean.push(DVector::from_column_slice(&y[..d]));
        covariance.push(DMatrix::from_column_slice(d, d, &y[d..d + d * d]));
    }
    let end = sol.horizon();
    let regime = path.state_at(end);
    let r = &sol.params.regimes[regime];
    let m = mean.last().unwrap();
    let s = covariance.last().unwrap();
    let y_mean = m * (1.0 - sol.params.terminal_coupling(regime));
    let terminal = 0.5 * (y_mean.dot(&(&r.terminal_cost * &y_mean)) + (&r.terminal_cost * s).trace());
    Ok(MeanFlow {
        times: sol.grid.clone(),
        mean,
        covariance,
        expected_cost: y[d + d * d] + terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn single(qx: f64) -> LqParams {
        LqParams::new(vec![LqRegime::scalar(qx, 1.0, 1.0, 0.0, 1.0, 1.0)], false).unwrap()
    }

    #[test]
    fn stationary_riccati() {
        let sol = solve_riccati(&single(1.0), &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        for n in 0..sol.grid.len() {
            assert_abs_diff_eq!(sol.quadratic[n][0][(0, 0)], 1.0, epsilon = 1e-12);
        }
        let p = decoupling_field_lq(&sol, 0.37, &v(2.0), &v(0.0), 0).unwrap();
        assert_abs_diff_eq!(p[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn no_state_cost_closed_form() {
        let sol = solve_riccati(&single(0.0), &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        for (n, t) in sol.grid.iter().enumerate() {
            assert_abs_diff_eq!(sol.quadratic[n][0][(0, 0)], 1.0 / (2.0 - t), epsilon = 1e-10);
        }
        let p = decoupling_field_lq(&sol, 0.0, &v(1.0), &v(0.0), 0).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-10);
        assert!(sol.max_local_error <= LOCAL_TOL);
        assert!(riccati_residual(&sol) < 1e-6);
    }

    #[test]
    fn identical_regimes_decouple() {
        let r = LqRegime::scalar(2.0, 1.0, 0.5, -0.3, 1.0, 0.8).with_mean_coupling(0.4);
        let params = LqParams::new(vec![r.clone(), r], true).unwrap();
        let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![3.0, -3.0]], None).unwrap();
        let sol = solve_riccati(&params, &q, &uniform_grid(1.0, 400)).unwrap();
        for n in 0..sol.grid.len() {
            assert_eq!(sol.quadratic[n][0], sol.quadratic[n][1]);
            assert_eq!(sol.mean_coef[n][0], sol.mean_coef[n][1]);
        }
        let p0 = decoupling_field_lq(&sol, 0.5, &v(1.0), &v(0.3), 0).unwrap();
        let p1 = decoupling_field_lq(&sol, 0.5, &v(1.0), &v(0.3), 1).unwrap();
        assert_eq!(p0, p1);
    }

    #[test]
    fn mean_decays_exponentially() {
        let sol = solve_riccati(&single(1.0), &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        let flow = mean_flow_lq(&sol, &RegimePath::constant(0, 1.0), &v(1.0)).unwrap();
        for (t, m) in flow.times.iter().zip(&flow.mean) {
            assert_abs_diff_eq!(m[0], (-t).exp(), epsilon = 1e-10);
        }
        // S' = -2S + 1 from S(0) = 0.
        let s1 = flow.covariance.last().unwrap()[(0, 0)];
        assert_abs_diff_eq!(s1, 0.5 * (1.0 - (-2.0f64).exp()), epsilon = 1e-10);
        let zero = mean_flow_lq(&sol, &RegimePath::constant(0, 1.0), &v(0.0)).unwrap();
        assert!(zero.mean.iter().all(|m| m[0] == 0.0));
    }

    #[test]
    fn stationary_expected_cost() {
        // K = 1: cost = int (m^2 + S) dt + (m_T^2 + S_T)/2 with m = e^{-t},
        // S = (1 - e^{-2t})/2. Equals K(0) x0^2/2 + int sigma^2 K / 2 dt.
        let sol = solve_riccati(&single(1.0), &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        let flow = mean_flow_lq(&sol, &RegimePath::constant(0, 1.0), &v(1.0)).unwrap();
        assert_abs_diff_eq!(flow.expected_cost, 0.5 + 0.5, epsilon = 1e-9);
    }

    #[test]
    fn terminal_coupling_can_blow_up() {
        let params = LqParams::new(
            vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0).with_mean_coupling(10.0)],
            true,
        )
        .unwrap();
        let res = solve_riccati(&params, &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200));
        assert!(matches!(res, Err(Error::BlowUp { .. })), "{res:?}");
    }

    #[test]
    fn rejects_coarse_grid_and_bad_times() {
        let p = single(1.0);
        assert!(solve_riccati(&p, &GeneratorMatrix::trivial(), &uniform_grid(1.0, 100)).is_err());
        let sol = solve_riccati(&p, &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        assert!(matches!(
            decoupling_field_lq(&sol, 1.5, &v(0.0), &v(0.0), 0),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn csv_shape() {
        let sol = solve_riccati(&single(1.0), &GeneratorMatrix::trivial(), &uniform_grid(1.0, 200)).unwrap();
        let csv = sol.to_csv();
        assert!(csv.starts_with("t,regime,K_00,L_00,k_0\n"));
        assert_eq!(csv.lines().count(), 202);
    }
}
