use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::field::{basis_terms, DecouplingField, NodeFit, MAX_DEGREE};
use crate::analysis::wasserstein2_1d;
use crate::error::{Error, Result};
use crate::game_model::GameSpec;
use crate::hamiltonian::{self, Minimizer};
use crate::io::fmt_f64;
use crate::measure::MeasureArg;
use crate::regime_chain::{sample_path, RegimePath};
use crate::rng::SeedTree;

const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeBudget {
    /// Blocks, each with its own regime path.
    pub blocks: usize,
    /// Population particles per block; they define the block law.
    pub particles: usize,
    /// Extra particles per block started on `x0 + U[-w, w]^d`. They follow
    /// the same dynamics but stay out of the block law, so the field is
    /// identified away from the population.
    pub probes: usize,
    pub probe_width: f64,
    pub steps: usize,
    pub max_picard: usize,
    /// Picard stops once the sup-change of the field drops to this.
    pub tol: f64,
    /// Weight of the new fit in the damped update.
    pub damping: f64,
    pub degree: usize,
    /// Cap on the degree in the conditional-mean variables.
    pub mean_degree: usize,
    /// Start block `b` in regime `(i0 + b) mod s` so that every regime is
    /// fitted from `t = 0`. The field does not depend on the initial regime.
    pub stratify_regimes: bool,
}

impl Default for FbsdeBudget {
    fn default() -> Self {
        Self {
            blocks: 32,
            particles: 1024,
            probes: 512,
            probe_width: 3.0,
            steps: 64,
            max_picard: 40,
            tol: 1e-4,
            damping: 0.5,
            degree: 3,
            mean_degree: 1,
            stratify_regimes: true,
        }
    }
}

impl FbsdeBudget {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &str, reason: &str| Err(Error::invalid(format!("budget.{name}"), reason));
        if self.blocks < 16 {
            return fail("blocks", "must be at least 16");
        }
        if self.particles < 256 {
            return fail("particles", "must be at least 256");
        }
        if self.steps < 32 {
            return fail("steps", "must be at least 32");
        }
        if self.max_picard == 0 {
            return fail("max_picard", "must be positive");
        }
        if !(self.tol > 0.0) {
            return fail("tol", "must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return fail("damping", "must lie in (0, 1]");
        }
        if self.degree > MAX_DEGREE {
            return fail("degree", "must be at most 5");
        }
        if !(self.probe_width >= 0.0) {
            return fail("probe_width", "must be nonnegative");
        }
        Ok(())
    }
}

/// One block: a regime path shared by `population + probes` particles.
#[derive(Debug, Clone)]
pub struct Block {
    pub path: RegimePath,
    /// Regime in force on `[t_n, t_{n+1})`.
    pub regime: Vec<usize>,
    /// Per step: `(from, to, dM)` increments of the compensated jump
    /// martingales that are nonzero on the step.
    pub jumps: Vec<Vec<(usize, usize, f64)>>,
    /// `X`, laid out `[node][particle][coordinate]`.
    pub x: Vec<f64>,
    /// `alpha_hat`, `[step][particle][coordinate]`.
    pub alpha: Vec<f64>,
    /// Brownian increments, `[step][particle][coordinate]`.
    pub dw: Vec<f64>,
    /// Backward values `P`, `[node][particle][coordinate]`.
    pub p: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub control_dim: usize,
    pub population: usize,
    pub probes: usize,
    pub blocks: Vec<Block>,
}

impl ParticleEnsemble {
    pub fn particles(&self) -> usize {
        self.population + self.probes
    }

    pub fn x(&self, block: usize, node: usize, particle: usize) -> &[f64] {
        let d = self.dim;
        let o = (node * self.particles() + particle) * d;
        &self.blocks[block].x[o..o + d]
    }

    pub fn p(&self, block: usize, node: usize, particle: usize) -> &[f64] {
        let d = self.dim;
        let o = (node * self.particles() + particle) * d;
        &self.blocks[block].p[o..o + d]
    }

    /// Block law at a node as a moment summary (what the coefficients see).
    pub fn moments(&self, block: usize, node: usize) -> MeasureArg {
        let b = &self.blocks[block];
        MeasureArg::Moments {
            mean: b.mean[node].clone(),
            second_moment: b.second_moment[node],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardIteration {
    /// Sup over the check grid of `|u^{k+1} - u^k|`.
    pub change: f64,
    /// Mean over blocks of `W2` between successive terminal block laws
    /// (first coordinate).
    pub law_drift: f64,
    /// Not part of the CSV: wall clock is not reproducible.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    pub iterations: Vec<PicardIteration>,
    pub tol: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl PicardReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,change,law_drift\n");
        for (k, it) in self.iterations.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", k + 1, fmt_f64(it.change), fmt_f64(it.law_drift)));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub field: DecouplingField,
    /// Undamped fits of the last backward sweep; they define `ensemble.p`.
    pub last_fit: DecouplingField,
    pub ensemble: ParticleEnsemble,
    pub report: PicardReport,
}

fn jump_increments(path: &RegimePath, q: &crate::regime_chain::GeneratorMatrix, a: f64, b: f64) -> Vec<(usize, usize, f64)> {
    let s = q.states();
    let occ = path.occupation_between(a, b, s);
    let mut dm = vec![0.0; s * s];
    for (from, tau) in occ.iter().enumerate() {
        if *tau > 0.0 {
            for to in 0..s {
                if to != from {
                    dm[from * s + to] -= q.rate(from, to) * tau;
                }
            }
        }
    }
    for (_, from, to) in path.jumps_between(a, b) {
        dm[from * s + to] += 1.0;
    }
    dm.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(k, v)| (k / s, k % s, *v))
        .collect()
}

fn setup(spec: &GameSpec, budget: &FbsdeBudget, seeds: &SeedTree) -> Vec<Block> {
    let d = spec.dim_state();
    let m = spec.dim_control();
    let n = budget.steps;
    let np = budget.particles + budget.probes;
    let dt = spec.horizon / n as f64;
    let grid: Vec<f64> = (0..=n).map(|k| spec.horizon * k as f64 / n as f64).collect();
    let paths = seeds.child("regime");
    let noise = seeds.child("noise");
    (0..budget.blocks)
        .into_par_iter()
        .map(|b| {
            let i0 = if budget.stratify_regimes {
                (spec.initial_regime + b) % spec.regimes()
            } else {
                spec.initial_regime
            };
            let path = sample_path(&spec.generator, i0, spec.horizon, &mut paths.stream(b as u64));
            let regime = grid.iter().map(|&t| path.state_at(t)).collect();
            let jumps = grid.windows(2).map(|w| jump_increments(&path, &spec.generator, w[0], w[1])).collect();
            let mut rng = noise.stream(b as u64);
            let mut x = vec![0.0; (n + 1) * np * d];
            for k in 0..np {
                for c in 0..d {
                    let shift = if k >= budget.particles {
                        rng.random_range(-budget.probe_width..=budget.probe_width)
                    } else {
                        0.0
                    };
                    x[k * d + c] = spec.initial_state[c] + shift;
                }
            }
            let sd = dt.sqrt();
            let dw = (0..n * np * d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            Block {
                path,
                regime,
                jumps,
                x,
                alpha: vec![0.0; n * np * m],
                dw,
                p: vec![0.0; (n + 1) * np * d],
                mean: vec![DVector::zeros(d); n + 1],
                second_moment: vec![0.0; n + 1],
            }
        })
        .collect()
}

fn population_moments(x: &[f64], d: usize, population: usize) -> (DVector<f64>, f64) {
    let mut mean = DVector::zeros(d);
    let mut sm = 0.0;
    for k in 0..population {
        for c in 0..d {
            let v = x[k * d + c];
            mean[c] += v;
            sm += v * v;
        }
    }
    (mean / population as f64, sm / population as f64)
}

/// Euler-Maruyama under the frozen field, coefficients at the regime in
/// force at the left end of each step.
fn forward_block(spec: &GameSpec, field: &DecouplingField, block: &mut Block, population: usize, dt: f64) -> Result<()> {
    let d = spec.dim_state();
    let m = spec.dim_control();
    let n_steps = block.regime.len() - 1;
    let np = block.x.len() / ((n_steps + 1) * d);
    let c = &spec.coefficients;
    let minimizer = Minimizer::new(spec);
    let state_free = c.diffusion_state_free();
    for n in 0..n_steps {
        let t = field.grid[n];
        let i = block.regime[n];
        let base = n * np * d;
        let (mean, sm) = population_moments(&block.x[base..base + np * d], d, population);
        block.mean[n] = mean.clone();
        block.second_moment[n] = sm;
        let mu = MeasureArg::Moments {
            mean,
            second_moment: sm,
        };
        let b0 = c.drift_offset(t, &mu, i);
        let b1 = c.drift_state(t, i);
        let b2 = c.drift_control(t, i);
        let fit = &field.fits[n][i];
        let mbar = block.mean[n].clone();
        let sigma_fixed = state_free.then(|| c.diffusion(t, &DVector::zeros(d), &mu, i));
        let mut x = DVector::zeros(d);
        let mut p = DVector::zeros(d);
        let mut a = DVector::zeros(m);
        let mut dw = DVector::zeros(d);
        let mut next = DVector::zeros(d);
        for k in 0..np {
            let o = base + k * d;
            x.copy_from_slice(&block.x[o..o + d]);
            p.fill(0.0);
            fit.eval_add(x.as_slice(), mbar.as_slice(), 1.0, p.as_mut_slice());
            minimizer.alpha_into(t, &x, &mu, &p, i, &mut a)?;
            dw.copy_from_slice(&block.dw[o..o + d]);
            next.copy_from(&b0);
            next.gemv(1.0, &b1, &x, 1.0);
            next.gemv(1.0, &b2, &a, 1.0);
            next *= dt;
            next += &x;
            match &sigma_fixed {
                Some(s) => next.gemv(1.0, s, &dw, 1.0),
                None => next.gemv(1.0, &c.diffusion(t, &x, &mu, i), &dw, 1.0),
            }
            block.x[o + np * d..o + np * d + d].copy_from_slice(next.as_slice());
            block.alpha[(n * np + k) * m..(n * np + k + 1) * m].copy_from_slice(a.as_slice());
        }
    }
    let base = n_steps * np * d;
    let (mean, sm) = population_moments(&block.x[base..], d, population);
    block.mean[n_steps] = mean;
    block.second_moment[n_steps] = sm;
    Ok(())
}

/// Sufficient statistics of one regression problem.
#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    mean_sum: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; 2 * d],
            sumsq: vec![0.0; 2 * d],
            lo: vec![f64::INFINITY; d],
            hi: vec![f64::NEG_INFINITY; d],
            mean_sum: vec![0.0; d],
        }
    }

    fn add(&mut self, x: &[f64], m: &[f64]) {
        let d = x.len();
        self.count += 1;
        for (k, v) in x.iter().chain(m).enumerate() {
            self.sum[k] += v;
            self.sumsq[k] += v * v;
        }
        for k in 0..d {
            self.lo[k] = self.lo[k].min(x[k]);
            self.hi[k] = self.hi[k].max(x[k]);
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        for k in 0..self.sum.len() {
            self.sum[k] += o.sum[k];
            self.sumsq[k] += o.sumsq[k];
        }
        for k in 0..self.lo.len() {
            self.lo[k] = self.lo[k].min(o.lo[k]);
            self.hi[k] = self.hi[k].max(o.hi[k]);
            self.mean_sum[k] += o.mean_sum[k];
        }
    }

    /// Center, scale and which variables actually vary.
    fn normalization(&self) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let n = self.count.max(1) as f64;
        let mut center = Vec::new();
        let mut scale = Vec::new();
        let mut active = Vec::new();
        for k in 0..self.sum.len() {
            let mu = self.sum[k] / n;
            let var = (self.sumsq[k] / n - mu * mu).max(0.0);
            let sd = var.sqrt();
            let varies = sd > 1e-9 * (1.0 + mu.abs());
            center.push(mu);
            scale.push(if varies { sd } else { 1.0 });
            active.push(varies);
        }
        (center, scale, active)
    }
}

#[derive(Debug, Clone)]
struct Normal {
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
    rhs_damped: DMatrix<f64>,
    yy: f64,
    count: usize,
}

impl Normal {
    fn new(k: usize, d: usize) -> Self {
        Self {
            gram: DMatrix::zeros(k, k),
            rhs: DMatrix::zeros(k, d),
            rhs_damped: DMatrix::zeros(k, d),
            yy: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, phi: &[f64], y: &[f64], yd: &[f64]) {
        let k = phi.len();
        for a in 0..k {
            for b in 0..=a {
                self.gram[(a, b)] += phi[a] * phi[b];
            }
            for (j, (v, vd)) in y.iter().zip(yd).enumerate() {
                self.rhs[(a, j)] += phi[a] * v;
                self.rhs_damped[(a, j)] += phi[a] * vd;
            }
        }
        self.yy += y.iter().map(|v| v * v).sum::<f64>();
        self.count += 1;
    }

    fn merge(&mut self, o: &Normal) {
        self.gram += &o.gram;
        self.rhs += &o.rhs;
        self.rhs_damped += &o.rhs_damped;
        self.yy += o.yy;
        self.count += o.count;
    }

    fn symmetrized(&self) -> DMatrix<f64> {
        let mut g = self.gram.clone();
        for a in 0..g.nrows() {
            for b in 0..a {
                g[(b, a)] = g[(a, b)];
            }
        }
        g
    }
}

fn condition(g: &DMatrix<f64>) -> f64 {
    let diag: Vec<f64> = (0..g.nrows()).map(|k| g[(k, k)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let scaled = DMatrix::from_fn(g.nrows(), g.ncols(), |a, b| g[(a, b)] / (diag[a] * diag[b]));
    let ev = scaled.symmetric_eigen().eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves the normal equations on a subset of the full basis, shrinking it
/// (mean terms first, then total degree) until the system is conditioned.
fn solve_normal(
    normal: &Normal,
    full_terms: &[u8],
    d: usize,
    degree: usize,
    node: usize,
    regime: usize,
    warnings: &mut Vec<String>,
) -> Result<(Vec<u8>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let nvar = 2 * d;
    let gram = normal.symmetrized();
    let mut candidates: Vec<(usize, bool)> = Vec::new();
    for deg in (0..=degree).rev() {
        candidates.push((deg, true));
        candidates.push((deg, false));
    }
    for (attempt, (deg, with_mean)) in candidates.into_iter().enumerate() {
        let keep: Vec<usize> = full_terms
            .chunks_exact(nvar)
            .enumerate()
            .filter(|(_, e)| {
                let total: usize = e.iter().map(|&v| v as usize).sum();
                let m_deg: usize = e[d..].iter().map(|&v| v as usize).sum();
                total <= deg && (with_mean || m_deg == 0)
            })
            .map(|(t, _)| t)
            .collect();
        if keep.is_empty() {
            continue;
        }
        let g = gram.select_rows(&keep).select_columns(&keep);
        if keep.len() > normal.count || condition(&g) > CONDITION_LIMIT {
            continue;
        }
        let Some(ch) = g.clone().cholesky() else { continue };
        let rhs = normal.rhs.select_rows(&keep);
        let coef = ch.solve(&rhs);
        let coef_damped = ch.solve(&normal.rhs_damped.select_rows(&keep));
        let explained: f64 = coef.iter().zip(rhs.iter()).map(|(c, r)| c * r).sum();
        let resid = ((normal.yy - explained) / normal.count.max(1) as f64).max(0.0);
        if attempt > 1 {
            warnings.push(format!(
                "node {node} regime {regime}: basis reduced to degree {deg}{} (ill-conditioned normal equations)",
                if with_mean { "" } else { " without mean terms" }
            ));
        }
        let terms = keep.iter().flat_map(|&t| full_terms[t * nvar..(t + 1) * nvar].to_vec()).collect();
        return Ok((terms, coef, coef_damped, resid));
    }
    Err(Error::RegressionRankDeficiency { node, regime })
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            v.push(m[(a, b)]);
        }
    }
    v
}

struct Sweep {
    damped: DecouplingField,
    undamped: DecouplingField,
    warnings: Vec<String>,
}

/// Per-(block, step) quantities shared by every particle, and buffers.
struct StepContext<'a> {
    spec: &'a GameSpec,
    d: usize,
    m: usize,
    np: usize,
    dt: f64,
    t: f64,
    mu_n: MeasureArg,
    mu_next: MeasureArg,
    sigma_fixed: Option<DMatrix<f64>>,
    b1t: DMatrix<f64>,
    x: DVector<f64>,
    alpha: DVector<f64>,
    dw: DVector<f64>,
    p_tilde: DVector<f64>,
    q_hat: DMatrix<f64>,
    y: Vec<f64>,
}

impl<'a> StepContext<'a> {
    fn new(spec: &'a GameSpec, ens: &ParticleEnsemble, block: usize, n: usize) -> Self {
        let (d, m) = (ens.dim, ens.control_dim);
        let t = ens.grid[n];
        let i = ens.blocks[block].regime[n];
        let c = &spec.coefficients;
        let mu_n = ens.moments(block, n);
        let sigma_fixed = c.diffusion_state_free().then(|| c.diffusion(t, &DVector::zeros(d), &mu_n, i));
        Self {
            spec,
            d,
            m,
            np: ens.particles(),
            dt: ens.grid[n + 1] - t,
            t,
            mu_next: ens.moments(block, n + 1),
            mu_n,
            sigma_fixed,
            b1t: c.drift_state(t, i).transpose(),
            x: DVector::zeros(d),
            alpha: DVector::zeros(m),
            dw: DVector::zeros(d),
            p_tilde: DVector::zeros(d),
            q_hat: DMatrix::zeros(d, d),
            y: vec![0.0; d],
        }
    }

    /// One-step target for node `n` at particle `k`, left in `self.y`: the
    /// undamped fit at `n + 1` (terminal gradient at the last node) plus the
    /// driver, minus the Brownian and jump control variates built from the
    /// same fit at `X_n`.
    fn target(&mut self, block: &Block, next: &[NodeFit], n: usize, k: usize) {
        let (d, m, np) = (self.d, self.m, self.np);
        let c = &self.spec.coefficients;
        let last = n + 1 == block.regime.len() - 1;
        let i = block.regime[n];
        let xs = &block.x[(n * np + k) * d..(n * np + k + 1) * d];
        let x1 = &block.x[((n + 1) * np + k) * d..((n + 1) * np + k + 1) * d];
        let mbar = block.mean[n].as_slice();
        self.y.fill(0.0);
        if last {
            let g = c.terminal_cost_grad_x(&DVector::from_column_slice(x1), &self.mu_next, block.regime[n + 1]);
            self.y.copy_from_slice(g.as_slice());
        } else {
            next[block.regime[n + 1]].eval_add(x1, block.mean[n + 1].as_slice(), 1.0, &mut self.y);
        }
        let fit = &next[i];
        self.x.copy_from_slice(xs);
        self.p_tilde.fill(0.0);
        fit.eval_add(xs, mbar, 1.0, self.p_tilde.as_mut_slice());
        let jac = fit.jacobian_x(xs, mbar);
        match &self.sigma_fixed {
            Some(s) => self.q_hat.gemm(1.0, &jac, s, 0.0),
            None => self.q_hat.gemm(1.0, &jac, &c.diffusion(self.t, &self.x, &self.mu_n, i), 0.0),
        }
        self.alpha.copy_from_slice(&block.alpha[(n * np + k) * m..(n * np + k + 1) * m]);
        self.dw.copy_from_slice(&block.dw[(n * np + k) * d..(n * np + k + 1) * d]);
        // grad_x H = b1' p + grad_x f (+ q-term when sigma sees the state).
        let gf = c.running_cost_grad_x(self.t, &self.x, &self.mu_n, &self.alpha, i);
        let extra = self
            .sigma_fixed
            .is_none()
            .then(|| hamiltonian::grad_x(self.spec, self.t, &self.x, &self.mu_n, &self.alpha, &self.p_tilde, Some(&self.q_hat), i));
        for a in 0..d {
            let driver = match &extra {
                Some(g) => g[a],
                None => (0..d).map(|b| self.b1t[(a, b)] * self.p_tilde[b]).sum::<f64>() + gf[a],
            };
            let noise: f64 = (0..d).map(|b| self.q_hat[(a, b)] * self.dw[b]).sum();
            self.y[a] += driver * self.dt - noise;
        }
        for &(a, b, dm) in &block.jumps[n] {
            next[b].eval_add(xs, mbar, -dm, &mut self.y);
            next[a].eval_add(xs, mbar, dm, &mut self.y);
        }
    }
}

fn backward_sweep(spec: &GameSpec, old: &DecouplingField, ens: &ParticleEnsemble, budget: &FbsdeBudget) -> Result<Sweep> {
    let d = ens.dim;
    let np = ens.particles();
    let s = spec.regimes();
    let n_steps = ens.grid.len() - 1;
    let theta = budget.damping;
    let c = &spec.coefficients;
    let mut damped = DecouplingField::zeros(ens.grid.clone(), d, s, budget.degree, budget.mean_degree);
    let mut undamped = damped.clone();
    let mut warnings = Vec::new();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];

    // Terminal node: fit grad_x g for every regime on all terminal samples.
    {
        let stats: Vec<Moments> = ens
            .blocks
            .par_iter()
            .map(|b| {
                let mut mo = Moments::new(d);
                for k in 0..np {
                    mo.add(&b.x[(n_steps * np + k) * d..(n_steps * np + k + 1) * d], b.mean[n_steps].as_slice());
                }
                for c in 0..d {
                    mo.mean_sum[c] = b.mean[n_steps][c] * np as f64;
                }
                mo
            })
            .collect();
        let mut total = Moments::new(d);
        stats.iter().for_each(|m| total.merge(m));
        let (center, scale, active) = total.normalization();
        let terms = basis_terms(d, budget.degree, budget.mean_degree, &active);
        let nt = terms.len() / (2 * d);
        let proto = NodeFit {
            center,
            scale,
            exponents: terms.clone(),
            coef: vec![0.0; nt * d],
            samples: total.count,
            residual_var: 0.0,
            extrapolated: false,
            mean_ref: total.mean_sum.iter().map(|v| v / total.count as f64).collect(),
        };
        for j in 0..s {
            let parts: Vec<Normal> = ens
                .blocks
                .par_iter()
                .enumerate()
                .map(|(bi, b)| {
                    let mu = ens.moments(bi, n_steps);
                    let mut ne = Normal::new(nt, d);
                    let mut phi = vec![0.0; nt];
                    for k in 0..np {
                        let xs = &b.x[(n_steps * np + k) * d..(n_steps * np + k + 1) * d];
                        proto.features(xs, b.mean[n_steps].as_slice(), &mut phi);
                        let y = c.terminal_cost_grad_x(&DVector::from_column_slice(xs), &mu, j);
                        ne.add(&phi, y.as_slice(), y.as_slice());
                    }
                    ne
                })
                .collect();
            let mut normal = Normal::new(nt, d);
            parts.iter().for_each(|p| normal.merge(p));
            let (exps, coef, _, resid) = solve_normal(&normal, &terms, d, budget.degree, n_steps, j, &mut warnings)?;
            let fit = NodeFit {
                exponents: exps,
                coef: to_row_major(&coef),
                residual_var: resid,
                ..proto.clone()
            };
            damped.fits[n_steps][j] = fit.clone();
            undamped.fits[n_steps][j] = fit;
        }
    }

    for n in (0..n_steps).rev() {
        let next = undamped.fits[n + 1].clone();
        // Pass 1: normalization per regime.
        let stats: Vec<Vec<Moments>> = ens
            .blocks
            .par_iter()
            .map(|b| {
                let mut per = vec![Moments::new(d); s];
                let i = b.regime[n];
                for k in 0..np {
                    per[i].add(&b.x[(n * np + k) * d..(n * np + k + 1) * d], b.mean[n].as_slice());
                }
                for c in 0..d {
                    per[i].mean_sum[c] = b.mean[n][c] * np as f64;
                }
                per
            })
            .collect();
        let mut totals = vec![Moments::new(d); s];
        for per in &stats {
            for (tot, mo) in totals.iter_mut().zip(per) {
                tot.merge(mo);
            }
        }
        for t in &totals {
            for k in 0..d {
                lo[k] = lo[k].min(t.lo[k]);
                hi[k] = hi[k].max(t.hi[k]);
            }
        }
        let protos: Vec<Option<(NodeFit, Vec<u8>)>> = totals
            .iter()
            .map(|tot| {
                (tot.count > 0).then(|| {
                    let (center, scale, active) = tot.normalization();
                    let terms = basis_terms(d, budget.degree, budget.mean_degree, &active);
                    let fit = NodeFit {
                        center,
                        scale,
                        exponents: terms.clone(),
                        coef: Vec::new(),
                        samples: tot.count,
                        residual_var: 0.0,
                        extrapolated: false,
                        mean_ref: tot.mean_sum.iter().map(|v| v / tot.count as f64).collect(),
                    };
                    (fit, terms)
                })
            })
            .collect();

        // Pass 2: targets and normal equations.
        let parts: Vec<Result<Option<(usize, Normal)>>> = ens
            .blocks
            .par_iter()
            .enumerate()
            .map(|(bi, b)| {
                let i = b.regime[n];
                let Some((proto, terms)) = &protos[i] else { return Ok(None) };
                let nt = terms.len() / (2 * d);
                let mut ctx = StepContext::new(spec, ens, bi, n);
                let mut ne = Normal::new(nt, d);
                let mut phi = vec![0.0; nt];
                let mut yd = vec![0.0; d];
                let old_fit = &old.fits[n][i];
                for k in 0..np {
                    let xs = &b.x[(n * np + k) * d..(n * np + k + 1) * d];
                    ctx.target(b, &next, n, k);
                    for (v, y) in yd.iter_mut().zip(&ctx.y) {
                        *v = theta * y;
                    }
                    old_fit.eval_add(xs, b.mean[n].as_slice(), 1.0 - theta, &mut yd);
                    proto.features(xs, b.mean[n].as_slice(), &mut phi);
                    ne.add(&phi, &ctx.y, &yd);
                }
                Ok(Some((i, ne)))
            })
            .collect();
        let mut normals: Vec<Option<Normal>> = vec![None; s];
        for part in parts {
            if let Some((i, ne)) = part? {
                match &mut normals[i] {
                    Some(acc) => acc.merge(&ne),
                    slot => *slot = Some(ne),
                }
            }
        }
        for i in 0..s {
            match (&normals[i], &protos[i]) {
                (Some(normal), Some((proto, terms))) => {
                    let (exps, coef, coef_d, resid) =
                        solve_normal(normal, terms, d, budget.degree, n, i, &mut warnings)?;
                    undamped.fits[n][i] = NodeFit {
                        exponents: exps.clone(),
                        coef: to_row_major(&coef),
                        residual_var: resid,
                        ..proto.clone()
                    };
                    damped.fits[n][i] = NodeFit {
                        exponents: exps,
                        coef: to_row_major(&coef_d),
                        residual_var: resid,
                        ..proto.clone()
                    };
                }
                _ => {
                    // No block sits in regime i here: carry the later node.
                    let mut u = undamped.fits[n + 1][i].clone();
                    u.extrapolated = true;
                    u.samples = 0;
                    undamped.fits[n][i] = u;
                    let mut v = damped.fits[n + 1][i].clone();
                    v.extrapolated = true;
                    v.samples = 0;
                    damped.fits[n][i] = v;
                }
            }
        }
    }
    damped.x_min = lo.clone();
    damped.x_max = hi.clone();
    undamped.x_min = lo;
    undamped.x_max = hi;
    Ok(Sweep {
        damped,
        undamped,
        warnings,
    })
}

/// Points `x0 + r e_k`, `r` on a uniform grid of `[-half, half]`, `k` over coordinates.
fn check_points(x0: &DVector<f64>, half: f64, count: usize) -> Vec<DVector<f64>> {
    let mut pts = Vec::new();
    for k in 0..x0.len() {
        for j in 0..count {
            let r = -half + 2.0 * half * j as f64 / (count - 1) as f64;
            let mut p = x0.clone();
            p[k] += r;
            pts.push(p);
        }
    }
    pts
}

/// Sup of `|a - b|` over nodes, regimes directly fitted in `a`, and the
/// check points, with the mean argument at `a`'s reference mean.
fn field_change(a: &DecouplingField, b: &DecouplingField, x0: &DVector<f64>) -> f64 {
    let pts = check_points(x0, 2.0, 9);
    let mut worst: f64 = 0.0;
    for n in 0..a.grid.len() {
        for i in 0..a.regimes {
            let fa = &a.fits[n][i];
            if fa.extrapolated {
                continue;
            }
            for p in &pts {
                let diff = fa.eval(p.as_slice(), &fa.mean_ref) - b.fits[n][i].eval(p.as_slice(), &fa.mean_ref);
                worst = worst.max(diff.amax());
            }
        }
    }
    worst
}

fn lipschitz_and_growth(field: &DecouplingField, x0: &DVector<f64>, half: f64) -> (f64, f64) {
    let count = 25;
    let h = 2.0 * half / (count - 1) as f64;
    let pts = check_points(x0, half, count);
    let mut lip: f64 = 0.0;
    let mut growth: f64 = 0.0;
    for row in &field.fits {
        for f in row {
            let vals: Vec<DVector<f64>> = pts.iter().map(|p| f.eval(p.as_slice(), &f.mean_ref)).collect();
            for (p, v) in pts.iter().zip(&vals) {
                growth = growth.max(v.norm() / (1.0 + p.norm()));
            }
            for k in 0..x0.len() {
                for j in 0..count - 1 {
                    let a = &vals[k * count + j];
                    let b = &vals[k * count + j + 1];
                    lip = lip.max((b - a).norm() / h);
                }
            }
        }
    }
    (lip, growth)
}

fn fill_backward_values(spec: &GameSpec, fit: &DecouplingField, ens: &mut ParticleEnsemble) {
    let d = ens.dim;
    let np = ens.particles();
    let n_steps = ens.grid.len() - 1;
    let c = &spec.coefficients;
    let moments: Vec<MeasureArg> = (0..ens.blocks.len()).map(|b| ens.moments(b, n_steps)).collect();
    ens.blocks.par_iter_mut().zip(moments).for_each(|(b, mu_t)| {
        for n in 0..=n_steps {
            let i = b.regime[n];
            for k in 0..np {
                let o = (n * np + k) * d;
                let xs = DVector::from_column_slice(&b.x[o..o + d]);
                let v = if n == n_steps {
                    c.terminal_cost_grad_x(&xs, &mu_t, i)
                } else {
                    fit.fits[n][i].eval(xs.as_slice(), b.mean[n].as_slice())
                };
                b.p[o..o + d].copy_from_slice(v.as_slice());
            }
        }
    });
}

fn terminal_first_coordinate(ens: &ParticleEnsemble) -> Vec<Vec<f64>> {
    let d = ens.dim;
    let n = ens.grid.len() - 1;
    let np = ens.particles();
    ens.blocks
        .iter()
        .map(|b| (0..ens.population).map(|k| b.x[(n * np + k) * d]).collect())
        .collect()
}

/// Picard iteration over the decoupling field. Every iteration reuses the
/// same regime paths and Brownian increments, so the iteration is a
/// deterministic fixed-point map on one sample.
pub fn solve(spec: &GameSpec, budget: &FbsdeBudget, seeds: &SeedTree) -> Result<FbsdeSolution> {
    budget.validate()?;
    let d = spec.dim_state();
    let grid: Vec<f64> = (0..=budget.steps)
        .map(|k| spec.horizon * k as f64 / budget.steps as f64)
        .collect();
    let dt = spec.horizon / budget.steps as f64;
    let mut ens = ParticleEnsemble {
        grid: grid.clone(),
        dim: d,
        control_dim: spec.dim_control(),
        population: budget.particles,
        probes: budget.probes,
        blocks: setup(spec, budget, seeds),
    };
    let mut field = DecouplingField::zeros(grid.clone(), d, spec.regimes(), budget.degree, budget.mean_degree);
    let mut report = PicardReport {
        iterations: Vec::new(),
        tol: budget.tol,
        converged: false,
        warnings: Vec::new(),
    };
    let mut previous_terminal: Option<Vec<Vec<f64>>> = None;
    let mut last_fit = field.clone();
    for _ in 0..budget.max_picard {
        let started = Instant::now();
        ens.blocks
            .par_iter_mut()
            .map(|b| forward_block(spec, &field, b, budget.particles, dt))
            .collect::<Result<Vec<()>>>()?;
        let sweep = backward_sweep(spec, &field, &ens, budget)?;
        let change = field_change(&sweep.damped, &field, &spec.initial_state);
        let terminal = terminal_first_coordinate(&ens);
        let law_drift = match &previous_terminal {
            Some(prev) => {
                let mut acc = 0.0;
                for (a, b) in prev.iter().zip(&terminal) {
                    acc += wasserstein2_1d(a, b)?;
                }
                acc / terminal.len() as f64
            }
            None => 0.0,
        };
        previous_terminal = Some(terminal);
        report.warnings.extend(sweep.warnings);
        report.iterations.push(PicardIteration {
            change,
            law_drift,
            seconds: started.elapsed().as_secs_f64(),
        });
        field = sweep.damped;
        last_fit = sweep.undamped;
        if change <= budget.tol {
            report.converged = true;
            break;
        }
        let h: Vec<f64> = report.iterations.iter().map(|it| it.change).collect();
        if h.len() >= 4 && h[h.len() - 4..].windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::PicardDivergence { history: h });
        }
    }
    fill_backward_values(spec, &last_fit, &mut ens);
    let (lip, growth) = lipschitz_and_growth(&field, &spec.initial_state, budget.probe_width.max(2.0));
    field.lipschitz = lip;
    field.growth = growth;
    Ok(FbsdeSolution {
        field,
        last_fit,
        ensemble: ens,
        report,
    })
}

/// `u(t, x, xbar, i)` with linear interpolation in time.
pub fn evaluate_field(field: &DecouplingField, t: f64, x: &DVector<f64>, xbar: &DVector<f64>, regime: usize) -> Result<DVector<f64>> {
    field.evaluate(t, x, xbar, regime)
}

/// Empirical law of the block's population at a node.
pub fn conditional_law_summary(ens: &ParticleEnsemble, block: usize, node: usize) -> MeasureArg {
    let d = ens.dim;
    let np = ens.particles();
    let b = &ens.blocks[block];
    let o = node * np * d;
    MeasureArg::uniform(d, b.x[o..o + ens.population * d].to_vec())
}

/// Sum over steps of the mean squared one-step defect
/// `u(t_n, X_n) - [u(t_{n+1}, X_{n+1}) + grad_x H dt - Q dW - Lambda dM]`,
/// with `u(T, .) = grad_x g`. Scales like `dt` for a first-order scheme.
pub fn bsde_residual(ens: &ParticleEnsemble, spec: &GameSpec, field: &DecouplingField) -> f64 {
    let d = ens.dim;
    let np = ens.particles();
    let n_steps = ens.grid.len() - 1;
    let per_block: Vec<Vec<f64>> = ens
        .blocks
        .par_iter()
        .enumerate()
        .map(|(bi, b)| {
            (0..n_steps)
                .map(|n| {
                    let i = b.regime[n];
                    let mut ctx = StepContext::new(spec, ens, bi, n);
                    let mut acc = 0.0;
                    for k in 0..np {
                        let xs = &b.x[(n * np + k) * d..(n * np + k + 1) * d];
                        ctx.target(b, &field.fits[n + 1], n, k);
                        let mut diff = ctx.y.clone();
                        field.fits[n][i].eval_add(xs, b.mean[n].as_slice(), -1.0, &mut diff);
                        acc += diff.iter().map(|v| v * v).sum::<f64>();
                    }
                    acc / np as f64
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for n in 0..n_steps {
        let mut s = 0.0;
        for blk in &per_block {
            s += blk[n];
        }
        total += s / per_block.len() as f64;
    }
    total
}
