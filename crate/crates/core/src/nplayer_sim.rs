//! N-player simulation under the limiting feedback, cost estimation and the
//! epsilon-Nash gap.
//!
//! Every player's control is `alpha_hat(t, X^k, L(X_t | regimes), u(t, X^k, I), I)`:
//! the law argument handed to the strategy is the *limit* conditional law,
//! while the dynamics and costs see the empirical measure of the N players
//! (or the limit law in [`Coupling::Limit`] mode).
//!
//! Randomness per replication `r`:
//! - regime path: stream `r` of `seeds.child("regime")`;
//! - player `k`'s Brownian path: stream `k` of
//!   `seeds.child_indexed("brownian", r)`, built by the Levy midpoint
//!   construction so that halving `dt` refines, rather than redraws, the path.
//!
//! Player `k`'s noise is therefore the same for every `N` in a sweep and for
//! every deviation arm (common random numbers).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analysis::{epsilon_rate, mean_stderr};
use crate::error::{Error, Result};
use crate::fbsde::{DecouplingField, ParticleEnsemble};
use crate::game_model::GameSpec;
use crate::hamiltonian::Minimizer;
use crate::io::fmt_f64;
use crate::lq_oracle::{mean_flow_lq, RiccatiSolution};
use crate::measure::MeasureArg;
use crate::regime_chain::{sample_path, RegimePath};
use crate::rng::{SeedTree, StreamRng};

/// The limiting strategy and the source of the limit law it is fed.
#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    /// LQ oracle: `u = K x + L m + k`, with `m` and the covariance from the
    /// oracle mean flow along each regime path.
    Riccati(&'a RiccatiSolution),
    /// Solver field. The limit law is taken from the ensemble block whose
    /// regime history best matches the replication's (occupation times on
    /// `[0, t]`, same current regime preferred). Without an ensemble the
    /// strategy is fed the empirical measure instead.
    Field {
        field: &'a DecouplingField,
        ensemble: Option<&'a ParticleEnsemble>,
    },
}

/// What the dynamics and the costs see as the measure argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Empirical,
    /// "N = infinity": the exact limit law replaces the empirical measure.
    Limit,
}

/// A population in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Players(usize),
    Limit,
}

impl Population {
    fn players(self) -> usize {
        match self {
            Population::Players(n) => n,
            Population::Limit => 1,
        }
    }

    fn coupling(self) -> Coupling {
        match self {
            Population::Players(_) => Coupling::Empirical,
            Population::Limit => Coupling::Limit,
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Players(n) => write!(f, "{n}"),
            Population::Limit => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub players: usize,
    pub reps: usize,
    pub steps: usize,
    pub coupling: Coupling,
    /// Brownian stream used by each player (default: player `k` uses stream
    /// `k`). Permuting it permutes the trajectories exactly.
    pub stream_order: Option<Vec<usize>>,
    /// Added to every stream index: an offset past the largest population
    /// gives an independent block on the same regime paths.
    pub stream_offset: usize,
}

impl SimConfig {
    pub fn new(players: usize, reps: usize, steps: usize) -> Self {
        Self {
            players,
            reps,
            steps,
            coupling: Coupling::Empirical,
            stream_order: None,
            stream_offset: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.coupling == Coupling::Empirical && self.players < 2 {
            return Err(Error::invalid("players", "the empirical game needs N >= 2"));
        }
        if self.players == 0 || self.reps == 0 || self.steps == 0 {
            return Err(Error::invalid("budget", "players, reps and steps must be positive"));
        }
        if let Some(order) = &self.stream_order {
            let mut seen = order.clone();
            seen.sort_unstable();
            if seen != (0..self.players).collect::<Vec<_>>() {
                return Err(Error::invalid("stream_order", "must be a permutation of the players"));
            }
        }
        Ok(())
    }
}

/// One replication.
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub path: RegimePath,
    pub times: Vec<f64>,
    pub players: usize,
    pub dim: usize,
    pub control_dim: usize,
    /// `[node][player][coordinate]`.
    pub x: Vec<f64>,
    /// Realized controls, `[node][player][coordinate]` (the last node is
    /// used by the trapezoidal cost only).
    pub alpha: Vec<f64>,
    /// Measure argument seen by the dynamics at each node, as moments.
    pub law_mean: Vec<DVector<f64>>,
    pub law_second_moment: Vec<f64>,
    /// Mean of the limit law fed to the strategy.
    pub limit_mean: Vec<DVector<f64>>,
    /// Trace of the limit covariance (LQ only, else NaN).
    pub limit_variance: Vec<f64>,
    /// Evaluations outside the field's fitted range (linearly extrapolated).
    pub domain_exits: usize,
}

impl SimulationRun {
    pub fn x(&self, node: usize, player: usize) -> &[f64] {
        let o = (node * self.players + player) * self.dim;
        &self.x[o..o + self.dim]
    }

    pub fn alpha(&self, node: usize, player: usize) -> &[f64] {
        let o = (node * self.players + player) * self.control_dim;
        &self.alpha[o..o + self.control_dim]
    }

    /// `mu_hat^N_t`: N atoms of weight `1/N`.
    pub fn empirical(&self, node: usize) -> MeasureArg {
        let o = node * self.players * self.dim;
        MeasureArg::uniform(self.dim, self.x[o..o + self.players * self.dim].to_vec())
    }

    fn law(&self, node: usize) -> MeasureArg {
        MeasureArg::Moments {
            mean: self.law_mean[node].clone(),
            second_moment: self.law_second_moment[node],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    pub values: Vec<f64>,
    /// Time step: the estimate carries an `O(dt)` discretization bias.
    pub dt: f64,
}

impl CostEstimate {
    fn from_values(values: Vec<f64>, dt: f64) -> Self {
        let (mean, stderr) = mean_stderr(&values);
        Self {
            mean,
            stderr: if values.len() < 2 { 0.0 } else { stderr },
            reps: values.len(),
            values,
            dt,
        }
    }
}

/// A deviation of player 0 while the others keep `alpha_hat`.
#[derive(Debug, Clone, PartialEq)]
pub enum Deviation {
    Identity,
    Scaled(f64),
    Shift { coord: usize, delta: f64 },
    /// Exact LQ best response against the others' feedback, with the others'
    /// empirical mean and the limit mean carried as extra state.
    BestResponse,
}

impl Deviation {
    pub fn name(&self) -> String {
        match self {
            Deviation::Identity => "identity".into(),
            Deviation::Scaled(c) => format!("scale:{c}"),
            Deviation::Shift { coord, delta } => format!("shift:{coord}:{delta:+}"),
            Deviation::BestResponse => "best-response".into(),
        }
    }

    /// Best response (LQ only), scalings `{0.5, 0.9, 1.1, 1.5}` and shifts
    /// `{+-0.1, +-0.5}` per control coordinate.
    pub fn default_family(spec: &GameSpec) -> Vec<Deviation> {
        let mut v = Vec::new();
        if spec.lq().is_some() {
            v.push(Deviation::BestResponse);
        }
        v.extend([0.5, 0.9, 1.1, 1.5].map(Deviation::Scaled));
        for coord in 0..spec.dim_control() {
            for delta in [-0.5, -0.1, 0.1, 0.5] {
                v.push(Deviation::Shift { coord, delta });
            }
        }
        v
    }
}

/// Feedback gains of the LQ best response on a time grid.
///
/// The deviator's state is `z = (X, Y, m, 1)` with `Y` the others' mean and
/// `m` the limit mean (`z = (X, m, 1)` in the limit), so that its problem is a
/// regime-switching LQ problem in `z` with time-varying drift. The value is
/// `z'K z / 2` and `beta = -R^{-1} b2' (K z)_X`.
#[derive(Debug, Clone)]
pub struct BestResponse {
    pub times: Vec<f64>,
    pub players: Option<usize>,
    /// `K[node][regime]`.
    pub value: Vec<Vec<DMatrix<f64>>>,
    /// `beta = gain[node][regime] * z`.
    pub gain: Vec<Vec<DMatrix<f64>>>,
}

struct BrLayout {
    d: usize,
    /// `None` in the limit.
    weights: Option<(f64, f64)>,
}

impl BrLayout {
    fn len(&self) -> usize {
        if self.weights.is_some() {
            3 * self.d + 1
        } else {
            2 * self.d + 1
        }
    }
    fn y(&self) -> usize {
        self.d
    }
    fn m(&self) -> usize {
        if self.weights.is_some() {
            2 * self.d
        } else {
            self.d
        }
    }
    fn one(&self) -> usize {
        self.len() - 1
    }

    /// `d x nz` map `z -> mu_hat` mean.
    fn mean_map(&self) -> DMatrix<f64> {
        let d = self.d;
        let mut mh = DMatrix::zeros(d, self.len());
        match self.weights {
            Some((w, w_rest)) => {
                for a in 0..d {
                    mh[(a, a)] = w;
                    mh[(a, self.y() + a)] = w_rest;
                }
            }
            None => {
                for a in 0..d {
                    mh[(a, self.m() + a)] = 1.0;
                }
            }
        }
        mh
    }

    fn own(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.d, self.len());
        for a in 0..self.d {
            e[(a, a)] = 1.0;
        }
        e
    }
}

/// Solves the best-response Riccati system backward and samples its gains
/// at `times`.
pub fn best_response_lq(sol: &RiccatiSolution, players: Option<usize>, times: &[f64]) -> Result<BestResponse> {
    if let Some(n) = players {
        if n < 2 {
            return Err(Error::invalid("players", "best response needs N >= 2 (or the limit)"));
        }
    }
    let params = &sol.params;
    let d = params.dim_state();
    let lay = BrLayout {
        d,
        weights: players.map(|n| (1.0 / n as f64, (n - 1) as f64 / n as f64)),
    };
    let nz = lay.len();
    let s = params.regimes.len();
    let mh = lay.mean_map();
    let ex = lay.own();
    let q = &sol.generator;

    let static_parts: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = params
        .regimes
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cx = &ex - &mh * r.mean_coupling;
            let cg = &ex - &mh * params.terminal_coupling(i);
            let bt = ex.transpose() * r.feedback_gain() * &ex;
            (cx.transpose() * &r.state_cost * cx, cg.transpose() * &r.terminal_cost * cg, bt)
        })
        .collect();

    let drift = |t: f64, i: usize| -> Result<DMatrix<f64>> {
        let r = &params.regimes[i];
        let (k, l, kk) = sol.coefficients_at(t.clamp(0.0, sol.horizon()), i)?;
        let b = r.feedback_gain();
        let mut a = DMatrix::zeros(nz, nz);
        let mut put = |row: usize, col: usize, m: &DMatrix<f64>| {
            let mut v = a.view_mut((row, col), (m.nrows(), m.ncols()));
            v += m;
        };
        let c_mh = &r.mean_drift * &mh;
        put(0, 0, &r.drift_state);
        put(0, 0, &c_mh);
        let b0 = DMatrix::from_column_slice(d, 1, r.drift_const.as_slice());
        put(0, lay.one(), &b0);
        let forcing = &b0 - &b * DMatrix::from_column_slice(d, 1, kk.as_slice());
        if lay.weights.is_some() {
            put(lay.y(), 0, &c_mh);
            put(lay.y(), lay.y(), &(&r.drift_state - &b * &k));
            put(lay.y(), lay.m(), &(-(&b * &l)));
            put(lay.y(), lay.one(), &forcing);
        }
        put(lay.m(), lay.m(), &(&r.drift_state + &r.mean_drift - &b * (&k + &l)));
        put(lay.m(), lay.one(), &forcing);
        Ok(a)
    };

    let rhs = |t: f64, kk: &[DMatrix<f64>]| -> Result<Vec<DMatrix<f64>>> {
        // dK/dt = -(K A + A'K - K B K + Q + sum_j q_ij (K_j - K_i)).
        (0..s)
            .map(|i| {
                let a = drift(t, i)?;
                let (qx, _, bt) = &static_parts[i];
                let mut out = &kk[i] * &a + a.transpose() * &kk[i] - &kk[i] * bt * &kk[i] + qx;
                for j in 0..s {
                    if j != i {
                        out += (&kk[j] - &kk[i]) * q.rate(i, j);
                    }
                }
                Ok(-out)
            })
            .collect()
    };

    let horizon = sol.horizon();
    if times.is_empty() || (times[times.len() - 1] - horizon).abs() > 1e-12 || times[0] != 0.0 {
        return Err(Error::invalid("times", "must run from 0 to the Riccati horizon"));
    }
    let mut kk: Vec<DMatrix<f64>> = static_parts.iter().map(|p| p.1.clone()).collect();
    let mut value = vec![Vec::new(); times.len()];
    value[times.len() - 1] = kk.clone();
    for n in (0..times.len() - 1).rev() {
        let (t0, t1) = (times[n], times[n + 1]);
        let sub = ((t1 - t0) / 1e-3).ceil().max(1.0) as usize;
        let h = (t1 - t0) / sub as f64;
        for step in 0..sub {
            let t = t1 - step as f64 * h;
            let axpy = |y: &[DMatrix<f64>], c: f64, k: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
                y.iter().zip(k).map(|(a, b)| a + b * c).collect()
            };
            let k1 = rhs(t, &kk)?;
            let k2 = rhs(t - 0.5 * h, &axpy(&kk, -0.5 * h, &k1))?;
            let k3 = rhs(t - 0.5 * h, &axpy(&kk, -0.5 * h, &k2))?;
            let k4 = rhs(t - h, &axpy(&kk, -h, &k3))?;
            for i in 0..s {
                kk[i] -= (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0);
                kk[i] = (&kk[i] + kk[i].transpose()) * 0.5;
            }
            let norm = kk.iter().map(|m| m.amax()).fold(0.0, f64::max);
            if !norm.is_finite() || norm > 1e8 {
                return Err(Error::BlowUp { t: t - h, norm });
            }
        }
        value[n] = kk.clone();
    }
    let gain = value
        .iter()
        .map(|per| {
            per.iter()
                .enumerate()
                .map(|(i, k)| {
                    let r = &params.regimes[i];
                    -(r.control_cost_inv() * r.drift_control.transpose() * &ex * k)
                })
                .collect()
        })
        .collect();
    Ok(BestResponse {
        times: times.to_vec(),
        players,
        value,
        gain,
    })
}

/// Brownian path on `steps` equal cells of `[0, horizon]` by midpoint
/// refinement of an odd base grid. Normals are consumed level by level, so
/// the path on `steps` cells is a refinement of the one on `steps / 2`.
fn brownian_increments(rng: &mut StreamRng, steps: usize, dim: usize, horizon: f64) -> Vec<f64> {
    let levels = steps.trailing_zeros();
    let base = steps >> levels;
    let mut w = vec![0.0; (base + 1) * dim];
    let h0 = horizon / base as f64;
    for n in 0..base {
        for c in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            w[(n + 1) * dim + c] = w[n * dim + c] + h0.sqrt() * z;
        }
    }
    let mut h = h0;
    let mut cells = base;
    for _ in 0..levels {
        let mut next = vec![0.0; (2 * cells + 1) * dim];
        for n in 0..cells {
            for c in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                next[2 * n * dim + c] = w[n * dim + c];
                next[(2 * n + 1) * dim + c] = 0.5 * (w[n * dim + c] + w[(n + 1) * dim + c]) + (0.25 * h).sqrt() * z;
            }
        }
        next[2 * cells * dim..].copy_from_slice(&w[cells * dim..]);
        w = next;
        cells *= 2;
        h *= 0.5;
    }
    (0..steps * dim).map(|k| w[k + dim] - w[k]).collect()
}

/// Limit law along one regime path, sampled at the simulation nodes.
struct LimitLaw {
    mean: Vec<DVector<f64>>,
    second: Vec<f64>,
    variance: Vec<f64>,
}

/// Per-replication random inputs, shared by every arm.
struct RepInputs {
    path: RegimePath,
    law: Option<LimitLaw>,
    /// Per player, `[step][coordinate]`.
    noise: Vec<Vec<f64>>,
}

struct Prepared<'a> {
    spec: &'a GameSpec,
    strategy: Strategy<'a>,
    minimizer: Minimizer<'a>,
    times: Vec<f64>,
    noise_dim: usize,
    seeds: SeedTree,
}

/// Moments of the point cloud summed in sorted order, so that relabelling
/// the players cannot change a single bit.
fn sorted_moments(points: &[f64], dim: usize, scratch: &mut Vec<f64>) -> (DVector<f64>, f64) {
    scratch.clear();
    scratch.extend_from_slice(points);
    let n = points.len() / dim;
    if dim == 1 {
        scratch.sort_by(f64::total_cmp);
    } else {
        let mut rows: Vec<&[f64]> = points.chunks_exact(dim).collect();
        rows.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        let flat: Vec<f64> = rows.concat();
        scratch.copy_from_slice(&flat);
    }
    let mut mean = DVector::zeros(dim);
    let mut second = 0.0;
    for row in scratch.chunks_exact(dim) {
        for (a, v) in row.iter().enumerate() {
            mean[a] += v;
            second += v * v;
        }
    }
    (mean / n as f64, second / n as f64)
}

impl<'a> Prepared<'a> {
    fn new(spec: &'a GameSpec, strategy: Strategy<'a>, steps: usize, seeds: &SeedTree) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        match strategy {
            Strategy::Riccati(sol) => {
                if spec.lq().is_none() {
                    return Err(Error::invalid("strategy", "the Riccati strategy needs an LQ spec"));
                }
                if (sol.horizon() - spec.horizon).abs() > 1e-12 {
                    return Err(Error::invalid("strategy", "Riccati horizon differs from the spec's"));
                }
            }
            Strategy::Field { field, .. } => {
                if (field.horizon() - spec.horizon).abs() > 1e-12 || field.dim != spec.dim_state() {
                    return Err(Error::invalid("strategy", "field does not cover the spec's horizon or dimension"));
                }
            }
        }
        let x0 = &spec.initial_state;
        let noise_dim = spec
            .coefficients
            .diffusion(0.0, x0, &MeasureArg::dirac(x0), spec.initial_regime)
            .ncols();
        Ok(Self {
            spec,
            strategy,
            minimizer: Minimizer::new(spec),
            times: (0..=steps).map(|n| spec.horizon * n as f64 / steps as f64).collect(),
            noise_dim,
            seeds: *seeds,
        })
    }

    fn steps(&self) -> usize {
        self.times.len() - 1
    }

    fn limit_law(&self, path: &RegimePath) -> Result<Option<LimitLaw>> {
        let d = self.spec.dim_state();
        match self.strategy {
            Strategy::Riccati(sol) => {
                let flow = mean_flow_lq(sol, path, &self.spec.initial_state)?;
                let mut law = LimitLaw {
                    mean: Vec::with_capacity(self.times.len()),
                    second: Vec::with_capacity(self.times.len()),
                    variance: Vec::with_capacity(self.times.len()),
                };
                for &t in &self.times {
                    let m = flow.mean_at(t);
                    let v = flow.covariance_at(t).trace();
                    law.second.push(v + m.norm_squared());
                    law.variance.push(v);
                    law.mean.push(m);
                }
                Ok(Some(law))
            }
            Strategy::Field { ensemble: None, .. } => Ok(None),
            Strategy::Field {
                ensemble: Some(ens), ..
            } => {
                let s = self.spec.regimes();
                let mut law = LimitLaw {
                    mean: Vec::new(),
                    second: Vec::new(),
                    variance: Vec::new(),
                };
                for &t in &self.times {
                    let node = nearest(&ens.grid, t);
                    let tn = ens.grid[node];
                    let key = path.occupation_between(0.0, tn, s);
                    let here = path.state_at(tn);
                    let best = (0..ens.blocks.len())
                        .min_by(|&a, &b| {
                            let score = |bi: usize| {
                                let p = &ens.blocks[bi].path;
                                let occ = p.occupation_between(0.0, tn, s);
                                let dist: f64 = occ.iter().zip(&key).map(|(u, v)| (u - v).abs()).sum();
                                (p.state_at(tn) != here, dist)
                            };
                            let (sa, sb) = (score(a), score(b));
                            sa.0.cmp(&sb.0).then(sa.1.total_cmp(&sb.1))
                        })
                        .ok_or_else(|| Error::invalid("ensemble", "has no blocks"))?;
                    let b = &ens.blocks[best];
                    let m = b.mean[node].clone();
                    law.variance.push((b.second_moment[node] - m.norm_squared()).max(0.0));
                    law.second.push(b.second_moment[node]);
                    law.mean.push(m);
                }
                debug_assert!(law.mean.iter().all(|m| m.len() == d));
                Ok(Some(law))
            }
        }
    }

    fn inputs(&self, rep: usize, players: usize, order: Option<&[usize]>, offset: usize) -> Result<RepInputs> {
        let spec = self.spec;
        let mut rng = self.seeds.child("regime").stream(rep as u64);
        let path = sample_path(&spec.generator, spec.initial_regime, spec.horizon, &mut rng);
        let law = self.limit_law(&path)?;
        let tree = self.seeds.child_indexed("brownian", rep as u64);
        let noise = (0..players)
            .map(|k| {
                let stream = offset + order.map_or(k, |o| o[k]);
                brownian_increments(&mut tree.stream(stream as u64), self.steps(), self.noise_dim, spec.horizon)
            })
            .collect();
        Ok(RepInputs { path, law, noise })
    }

    /// `u` at one state, with linear extrapolation outside the field range.
    fn field_value(field: &DecouplingField, t: f64, x: &DVector<f64>, m: &DVector<f64>, i: usize, exits: &mut usize) -> Result<DVector<f64>> {
        if field.in_domain(x.as_slice()) {
            return field.evaluate(t, x, m, i);
        }
        *exits += 1;
        let xc = DVector::from_iterator(
            x.len(),
            x.iter().zip(field.x_min.iter().zip(&field.x_max)).map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        );
        let (n, w) = field.locate(t)?;
        let mut jac = field.fits[n][i].jacobian_x(xc.as_slice(), m.as_slice()) * (1.0 - w);
        if w > 0.0 {
            jac += field.fits[n + 1][i].jacobian_x(xc.as_slice(), m.as_slice()) * w;
        }
        Ok(field.evaluate(t, &xc, m, i)? + jac * (x - &xc))
    }

    fn run(
        &self,
        inputs: &RepInputs,
        players: usize,
        coupling: Coupling,
        deviation: Option<(&Deviation, Option<&BestResponse>)>,
    ) -> Result<SimulationRun> {
        let spec = self.spec;
        let c = &spec.coefficients;
        let d = spec.dim_state();
        let mc = spec.dim_control();
        let steps = self.steps();
        let dt = spec.horizon / steps as f64;
        let law_lim = inputs.law.as_ref();
        if coupling == Coupling::Limit && law_lim.is_none() {
            return Err(Error::invalid("coupling", "limit mode needs a limit law (Riccati or ensemble)"));
        }

        let mut x = vec![0.0; (steps + 1) * players * d];
        for k in 0..players {
            x[k * d..(k + 1) * d].copy_from_slice(spec.initial_state.as_slice());
        }
        let mut alpha = vec![0.0; (steps + 1) * players * mc];
        let mut law_mean = Vec::with_capacity(steps + 1);
        let mut law_second = Vec::with_capacity(steps + 1);
        let mut limit_mean = Vec::with_capacity(steps + 1);
        let mut limit_variance = Vec::with_capacity(steps + 1);
        let mut exits = 0;

        let mut scratch = Vec::new();
        let mut xk = DVector::zeros(d);
        let mut p = DVector::zeros(d);
        let mut a = DVector::zeros(mc);
        let mut drift = DVector::zeros(d);
        let mut z = DVector::zeros(0);

        for n in 0..=steps {
            let t = self.times[n];
            let i = inputs.path.state_at(t);
            let here = n * players * d;
            let (emp_mean, emp_second) = sorted_moments(&x[here..here + players * d], d, &mut scratch);
            let (lim_mean, lim_second, lim_var) = match law_lim {
                Some(l) => (l.mean[n].clone(), l.second[n], l.variance[n]),
                None => (emp_mean.clone(), emp_second, f64::NAN),
            };
            let (dyn_mean, dyn_second) = match coupling {
                Coupling::Empirical => (emp_mean.clone(), emp_second),
                Coupling::Limit => (lim_mean.clone(), lim_second),
            };
            let dyn_law = MeasureArg::Moments {
                mean: dyn_mean.clone(),
                second_moment: dyn_second,
            };
            let strat_law = MeasureArg::Moments {
                mean: lim_mean.clone(),
                second_moment: lim_second,
            };

            let affine = match self.strategy {
                Strategy::Riccati(sol) => {
                    let (k, l, kk) = sol.coefficients_at(t, i)?;
                    Some((k, l * &lim_mean + kk))
                }
                Strategy::Field { .. } => None,
            };
            for k in 0..players {
                let o = here + k * d;
                xk.copy_from_slice(&x[o..o + d]);
                match (&affine, self.strategy) {
                    (Some((kmat, off)), _) => {
                        p.copy_from(off);
                        p.gemv(1.0, kmat, &xk, 1.0);
                    }
                    (None, Strategy::Field { field, .. }) => {
                        p = Self::field_value(field, t, &xk, &lim_mean, i, &mut exits)?;
                    }
                    _ => unreachable!(),
                }
                self.minimizer.alpha_into(t, &xk, &strat_law, &p, i, &mut a)?;
                if k == 0 {
                    if let Some((dev, br)) = deviation {
                        match dev {
                            Deviation::Identity => {}
                            Deviation::Scaled(s) => a *= *s,
                            Deviation::Shift { coord, delta } => a[*coord] += delta,
                            Deviation::BestResponse => {
                                let br = br.ok_or_else(|| Error::invalid("deviation", "best response gains missing"))?;
                                let lay = BrLayout {
                                    d,
                                    weights: br.players.map(|m| (1.0 / m as f64, (m - 1) as f64 / m as f64)),
                                };
                                if z.len() != lay.len() {
                                    z = DVector::zeros(lay.len());
                                }
                                z.rows_mut(0, d).copy_from(&xk);
                                if lay.weights.is_some() {
                                    let others = (&emp_mean * players as f64 - &xk) / (players - 1) as f64;
                                    z.rows_mut(lay.y(), d).copy_from(&others);
                                }
                                z.rows_mut(lay.m(), d).copy_from(&lim_mean);
                                z[lay.one()] = 1.0;
                                a.gemv(1.0, &br.gain[n][i], &z, 0.0);
                            }
                        }
                    }
                }
                alpha[(n * players + k) * mc..(n * players + k + 1) * mc].copy_from_slice(a.as_slice());
            }

            if n < steps {
                let b0 = c.drift_offset(t, &dyn_law, i);
                let b1 = c.drift_state(t, i);
                let b2 = c.drift_control(t, i);
                let sigma_fixed = c.diffusion_state_free().then(|| c.diffusion(t, &spec.initial_state, &dyn_law, i));
                let next = (n + 1) * players * d;
                for k in 0..players {
                    let o = here + k * d;
                    xk.copy_from_slice(&x[o..o + d]);
                    a.copy_from_slice(&alpha[(n * players + k) * mc..(n * players + k + 1) * mc]);
                    drift.copy_from(&b0);
                    drift.gemv(1.0, &b1, &xk, 1.0);
                    drift.gemv(1.0, &b2, &a, 1.0);
                    let owned;
                    let sigma = match &sigma_fixed {
                        Some(s) => s,
                        None => {
                            owned = c.diffusion(t, &xk, &dyn_law, i);
                            &owned
                        }
                    };
                    let dw = &inputs.noise[k][n * self.noise_dim..(n + 1) * self.noise_dim];
                    for r in 0..d {
                        let noise: f64 = (0..self.noise_dim).map(|q| sigma[(r, q)] * dw[q]).sum();
                        x[next + k * d + r] = xk[r] + drift[r] * dt + noise;
                    }
                }
            }
            law_mean.push(dyn_mean);
            law_second.push(dyn_second);
            limit_mean.push(lim_mean);
            limit_variance.push(lim_var);
        }
        Ok(SimulationRun {
            path: inputs.path.clone(),
            times: self.times.clone(),
            players,
            dim: d,
            control_dim: mc,
            x,
            alpha,
            law_mean,
            law_second_moment: law_second,
            limit_mean,
            limit_variance,
            domain_exits: exits,
        })
    }
}

fn nearest(grid: &[f64], t: f64) -> usize {
    let k = grid.partition_point(|&g| g < t);
    if k == 0 {
        0
    } else if k == grid.len() || (t - grid[k - 1]) <= (grid[k] - t) {
        k - 1
    } else {
        k
    }
}

/// Euler-Maruyama replications of the N-player game, every player using the
/// limiting strategy.
pub fn simulate(spec: &GameSpec, strategy: Strategy<'_>, cfg: &SimConfig, seeds: &SeedTree) -> Result<Vec<SimulationRun>> {
    cfg.validate()?;
    let prep = Prepared::new(spec, strategy, cfg.steps, seeds)?;
    (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let inputs = prep.inputs(r, cfg.players, cfg.stream_order.as_deref(), cfg.stream_offset)?;
            prep.run(&inputs, cfg.players, cfg.coupling, None)
        })
        .collect()
}

/// Replication `rep` of [`simulate`] alone (`cfg.reps` is ignored).
pub fn simulate_rep(spec: &GameSpec, strategy: Strategy<'_>, cfg: &SimConfig, seeds: &SeedTree, rep: usize) -> Result<SimulationRun> {
    cfg.validate()?;
    let prep = Prepared::new(spec, strategy, cfg.steps, seeds)?;
    let inputs = prep.inputs(rep, cfg.players, cfg.stream_order.as_deref(), cfg.stream_offset)?;
    prep.run(&inputs, cfg.players, cfg.coupling, None)
}

/// Trapezoidal running cost plus terminal cost of one player on one run.
pub fn player_cost(spec: &GameSpec, run: &SimulationRun, player: usize) -> f64 {
    let c = &spec.coefficients;
    let steps = run.times.len() - 1;
    let f = |n: usize| {
        let t = run.times[n];
        let x = DVector::from_column_slice(run.x(n, player));
        let a = DVector::from_column_slice(run.alpha(n, player));
        c.running_cost(t, &x, &run.law(n), &a, run.path.state_at(t))
    };
    let mut total = 0.0;
    let mut prev = f(0);
    for n in 0..steps {
        let next = f(n + 1);
        total += 0.5 * (prev + next) * (run.times[n + 1] - run.times[n]);
        prev = next;
    }
    let xt = DVector::from_column_slice(run.x(steps, player));
    total + c.terminal_cost(&xt, &run.law(steps), run.path.state_at(run.times[steps]))
}

/// Monte Carlo estimate of player `player`'s cost.
pub fn estimate_cost(spec: &GameSpec, runs: &[SimulationRun], player: usize) -> Result<CostEstimate> {
    let first = runs.first().ok_or_else(|| Error::invalid("runs", "no replications"))?;
    if player >= first.players {
        return Err(Error::invalid("player", format!("{player} >= N = {}", first.players)));
    }
    let values: Vec<f64> = runs.iter().map(|r| player_cost(spec, r, player)).collect();
    Ok(CostEstimate::from_values(values, spec.horizon / (first.times.len() - 1) as f64))
}

/// Summary CSV: per replication and node, the regime, the measure argument
/// of the dynamics and the limit mean.
pub fn runs_to_csv(runs: &[SimulationRun]) -> String {
    let d = runs.first().map_or(1, |r| r.dim);
    let mut s = String::from("rep,t,regime");
    for a in 0..d {
        s.push_str(&format!(",mean_{a}"));
    }
    s.push_str(",second_moment");
    for a in 0..d {
        s.push_str(&format!(",limit_mean_{a}"));
    }
    s.push('\n');
    for (r, run) in runs.iter().enumerate() {
        for (n, &t) in run.times.iter().enumerate() {
            s.push_str(&format!("{r},{},{}", fmt_f64(t), run.path.state_at(t)));
            for v in run.law_mean[n].iter() {
                s.push_str(&format!(",{}", fmt_f64(*v)));
            }
            s.push_str(&format!(",{}", fmt_f64(run.law_second_moment[n])));
            for v in run.limit_mean[n].iter() {
                s.push_str(&format!(",{}", fmt_f64(*v)));
            }
            s.push('\n');
        }
    }
    s
}

/// Doubles `steps` until the baseline cost of player 0 moves by at most half
/// its standard error under refinement (common random numbers make the two
/// resolutions comparable path by path). Returns the coarser step count.
pub fn calibrate_steps(
    spec: &GameSpec,
    strategy: Strategy<'_>,
    players: usize,
    reps: usize,
    start: usize,
    max_steps: usize,
    seeds: &SeedTree,
) -> Result<usize> {
    let mut steps = start;
    loop {
        let coarse = estimate_cost(spec, &simulate(spec, strategy, &SimConfig::new(players, reps, steps), seeds)?, 0)?;
        if 2 * steps > max_steps {
            return Ok(steps);
        }
        let fine = estimate_cost(spec, &simulate(spec, strategy, &SimConfig::new(players, reps, 2 * steps), seeds)?, 0)?;
        if (coarse.mean - fine.mean).abs() <= 0.5 * coarse.stderr {
            return Ok(steps);
        }
        steps *= 2;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmEstimate {
    pub arm: String,
    /// `J(baseline) - J(deviation)`, per replication averaged.
    pub difference: f64,
    pub stderr: f64,
    pub deviating_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub population: Population,
    pub baseline: CostEstimate,
    pub arms: Vec<ArmEstimate>,
    pub best_arm: usize,
    pub gap: f64,
    pub gap_clamped: f64,
    pub gap_stderr: f64,
    pub eps_n: Option<f64>,
    pub domain_exits: usize,
    /// Sup over time of the mean of `|X^0_t|^2`.
    pub second_moment_sup: f64,
    /// Mean of `int |alpha^0_t|^2 dt`.
    pub control_energy: f64,
}

impl GapRow {
    /// 95% normal interval of the signed gap.
    pub fn ci(&self) -> (f64, f64) {
        (self.gap - 1.96 * self.gap_stderr, self.gap + 1.96 * self.gap_stderr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashGapReport {
    pub rows: Vec<GapRow>,
    pub reps: usize,
    pub steps: usize,
    /// State dimension (enters `eps_N`).
    pub dim: usize,
    /// `gap / eps_N` at the first finite population (not asserted).
    pub fitted_constant: Option<f64>,
}

impl NashGapReport {
    /// `c eps_N` with the fitted constant.
    pub fn reference(&self, n: usize) -> Option<f64> {
        self.fitted_constant.map(|c| c * epsilon_rate(n, self.dim))
    }

    /// Clamped gaps non-increasing along the finite rows, each step allowed
    /// a 95% combined-interval slack.
    pub fn non_increasing_within_ci(&self) -> bool {
        let finite: Vec<&GapRow> = self.rows.iter().filter(|r| matches!(r.population, Population::Players(_))).collect();
        finite.windows(2).all(|w| {
            let slack = 1.96 * (w[0].gap_stderr.powi(2) + w[1].gap_stderr.powi(2)).sqrt();
            w[1].gap_clamped <= w[0].gap_clamped + slack
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# reps={},steps={},fitted_constant={}\nplayers,baseline,baseline_stderr,best_arm,gap,gap_clamped,gap_stderr,eps_n,reference,domain_exits,second_moment_sup,control_energy\n",
            self.reps,
            self.steps,
            self.fitted_constant.map_or("none".into(), fmt_f64)
        );
        for r in &self.rows {
            let (eps, refv) = match r.population {
                Population::Players(n) => (
                    r.eps_n.map_or("".into(), fmt_f64),
                    self.reference(n).map_or("".into(), fmt_f64),
                ),
                Population::Limit => (String::new(), String::new()),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.population,
                fmt_f64(r.baseline.mean),
                fmt_f64(r.baseline.stderr),
                r.arms.get(r.best_arm).map_or("", |a| a.arm.as_str()),
                fmt_f64(r.gap),
                fmt_f64(r.gap_clamped),
                fmt_f64(r.gap_stderr),
                eps,
                refv,
                r.domain_exits,
                fmt_f64(r.second_moment_sup),
                fmt_f64(r.control_energy)
            ));
        }
        s
    }

    pub fn arms_csv(&self) -> String {
        let mut s = String::from("players,arm,difference,stderr,deviating_cost\n");
        for r in &self.rows {
            for a in &r.arms {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.population,
                    a.arm,
                    fmt_f64(a.difference),
                    fmt_f64(a.stderr),
                    fmt_f64(a.deviating_cost)
                ));
            }
        }
        s
    }
}

/// Budget of a gap sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapBudget {
    pub reps: usize,
    pub steps: usize,
}

/// Player 0's cost under `alpha_hat` against each deviation, with common
/// random numbers across arms, for every population in `sweep`.
pub fn nash_gap(
    spec: &GameSpec,
    strategy: Strategy<'_>,
    sweep: &[Population],
    family: &[Deviation],
    budget: GapBudget,
    seeds: &SeedTree,
) -> Result<NashGapReport> {
    if family.is_empty() {
        return Err(Error::invalid("deviation_family", "must not be empty"));
    }
    if sweep.is_empty() || budget.reps < 2 || budget.steps == 0 {
        return Err(Error::invalid("budget", "need a nonempty sweep, reps >= 2 and steps >= 1"));
    }
    let prep = Prepared::new(spec, strategy, budget.steps, seeds)?;
    let d = spec.dim_state();
    let mut rows = Vec::new();
    for &pop in sweep {
        if let Population::Players(n) = pop {
            if n < 2 {
                return Err(Error::invalid("N_sweep", format!("N = {n} < 2")));
            }
        }
        let br = if family.contains(&Deviation::BestResponse) {
            match strategy {
                Strategy::Riccati(sol) => Some(best_response_lq(
                    sol,
                    match pop {
                        Population::Players(n) => Some(n),
                        Population::Limit => None,
                    },
                    &prep.times,
                )?),
                Strategy::Field { .. } => {
                    return Err(Error::invalid("deviation_family", "the best-response arm needs the Riccati strategy"))
                }
            }
        } else {
            None
        };
        let players = pop.players();
        let coupling = pop.coupling();
        let steps = budget.steps;
        let per_rep: Vec<(f64, Vec<f64>, usize, Vec<f64>, f64)> = (0..budget.reps)
            .into_par_iter()
            .map(|r| {
                let inputs = prep.inputs(r, players, None, 0)?;
                let base = prep.run(&inputs, players, coupling, None)?;
                let jb = player_cost(spec, &base, 0);
                let second: Vec<f64> = (0..=steps).map(|n| base.x(n, 0).iter().map(|v| v * v).sum()).collect();
                let energy: f64 = (0..steps)
                    .map(|n| {
                        let e = |m: usize| base.alpha(m, 0).iter().map(|v| v * v).sum::<f64>();
                        0.5 * (e(n) + e(n + 1)) * (base.times[n + 1] - base.times[n])
                    })
                    .sum();
                let mut exits = base.domain_exits;
                let arms = family
                    .iter()
                    .map(|dev| {
                        let run = prep.run(&inputs, players, coupling, Some((dev, br.as_ref())))?;
                        exits += run.domain_exits;
                        Ok(player_cost(spec, &run, 0))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok((jb, arms, exits, second, energy))
            })
            .collect::<Result<_>>()?;

        let baseline = CostEstimate::from_values(per_rep.iter().map(|v| v.0).collect(), spec.horizon / steps as f64);
        let arms: Vec<ArmEstimate> = family
            .iter()
            .enumerate()
            .map(|(a, dev)| {
                let diffs: Vec<f64> = per_rep.iter().map(|v| v.0 - v.1[a]).collect();
                let (difference, stderr) = mean_stderr(&diffs);
                ArmEstimate {
                    arm: dev.name(),
                    difference,
                    stderr,
                    deviating_cost: per_rep.iter().map(|v| v.1[a]).sum::<f64>() / per_rep.len() as f64,
                }
            })
            .collect();
        let best_arm = (0..arms.len())
            .max_by(|&a, &b| arms[a].difference.total_cmp(&arms[b].difference))
            .expect("family is nonempty");
        let gap = arms[best_arm].difference;
        let reps = per_rep.len() as f64;
        let second_moment_sup = (0..=steps)
            .map(|n| per_rep.iter().map(|v| v.3[n]).sum::<f64>() / reps)
            .fold(0.0, f64::max);
        rows.push(GapRow {
            population: pop,
            baseline,
            gap,
            gap_clamped: gap.max(0.0),
            gap_stderr: arms[best_arm].stderr,
            best_arm,
            arms,
            eps_n: match pop {
                Population::Players(n) => Some(epsilon_rate(n, d)),
                Population::Limit => None,
            },
            domain_exits: per_rep.iter().map(|v| v.2).sum(),
            second_moment_sup,
            control_energy: per_rep.iter().map(|v| v.4).sum::<f64>() / reps,
        });
    }
    let fitted_constant = rows.iter().find_map(|r| match (r.population, r.eps_n) {
        (Population::Players(_), Some(eps)) => Some(r.gap_clamped / eps),
        _ => None,
    });
    Ok(NashGapReport {
        rows,
        reps: budget.reps,
        steps: budget.steps,
        dim: d,
        fitted_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn levy_construction_refines() {
        let mut r1 = StreamRng::seed_from_u64(7);
        let mut r2 = StreamRng::seed_from_u64(7);
        let coarse = brownian_increments(&mut r1, 12, 2, 1.5);
        let fine = brownian_increments(&mut r2, 24, 2, 1.5);
        for n in 0..12 {
            for c in 0..2 {
                let pair = fine[2 * n * 2 + c] + fine[(2 * n + 1) * 2 + c];
                assert!((coarse[n * 2 + c] - pair).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn levy_increments_have_the_right_variance() {
        let mut rng = StreamRng::seed_from_u64(3);
        let (steps, reps) = (8, 20_000);
        let mut acc = vec![0.0; steps];
        for _ in 0..reps {
            let inc = brownian_increments(&mut rng, steps, 1, 2.0);
            for (a, v) in acc.iter_mut().zip(&inc) {
                *a += v * v;
            }
        }
        for a in acc {
            // E dW^2 = 0.25, sd of the estimate ~ 0.25 sqrt(2 / reps).
            assert!((a / reps as f64 - 0.25).abs() < 5.0 * 0.25 * (2.0 / reps as f64).sqrt());
        }
    }

    #[test]
    fn sorted_moments_ignore_order() {
        let mut s = Vec::new();
        let a = sorted_moments(&[0.1, 0.7, -0.3, 1e-17], 1, &mut s);
        let b = sorted_moments(&[1e-17, -0.3, 0.1, 0.7], 1, &mut s);
        assert_eq!(a, b);
        let a = sorted_moments(&[1.0, 2.0, 0.0, 5.0], 2, &mut s);
        assert_eq!(a.0, DVector::from_vec(vec![0.5, 3.5]));
        assert_eq!(a.1, 15.0);
    }

    #[test]
    fn nearest_node() {
        let g = [0.0, 0.5, 1.0];
        assert_eq!(nearest(&g, 0.2), 0);
        assert_eq!(nearest(&g, 0.3), 1);
        assert_eq!(nearest(&g, 1.0), 2);
    }
}
