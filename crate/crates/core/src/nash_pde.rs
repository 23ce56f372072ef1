//! Finite differences for the Nash system of `N <= 2` players with scalar
//! states and controls.
//!
//! Player `k` solves
//! `d_t v_k + sum_l [b_l . d_l v_k + a_l d_ll v_k] + f_k + sum_j q_ij (v_k(j) - v_k(i)) = 0`,
//! `v_k(T) = g_k`, where `a_l = sigma_l^2 / 2` and player `l` plays
//! `alpha_hat(d_l v_l)`. Each player's coefficients are the spec's family
//! evaluated at the player's own state, with the measure argument the law of
//! the others (`delta` of the other state; the own state when `N = 1`).
//!
//! Time stepping is backward Euler. Within a step, a fixed point freezes the
//! controls, advection and regime coupling at the current iterate and solves
//! the implicit diffusion line by line, so at convergence the step is fully
//! implicit.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game_model::{GameSpec, Interaction};
use crate::hamiltonian::{self, Minimizer};
use crate::io::fmt_f64;
use crate::measure::MeasureArg;

/// Largest admissible contraction ratio of the inner fixed point; at 0.5
/// the 1e-8 tolerance is reached well within 50 sweeps.
pub const CFL_BOUND: f64 = 0.5;

pub const BOUNDARY_POLICY: &str = "neumann: zero second derivative via ghost node v[-1] = 2 v[0] - v[1]";

#[derive(Debug, Clone, PartialEq)]
pub struct PdeGrid {
    /// Nodes per player dimension.
    pub n_x: usize,
    pub n_t: usize,
    /// Half-width of the domain in units of `sigma_max sqrt(T) + drift range`.
    pub padding: f64,
    pub inner_tol: f64,
    pub max_inner: usize,
    pub max_halvings: usize,
    /// Keep every `k`-th time node (plus its neighbours, for the residual).
    /// `None` keeps all nodes when `N = 1` and about 9 snapshots when `N = 2`.
    pub keep_every: Option<usize>,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            n_x: 201,
            n_t: 400,
            padding: 6.0,
            inner_tol: 1e-8,
            max_inner: 50,
            max_halvings: 8,
            keep_every: None,
        }
    }
}

impl PdeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_x < 5 {
            return Err(Error::invalid("grid.n_x", "need at least 5 nodes"));
        }
        if self.n_t < 2 {
            return Err(Error::invalid("grid.n_t", "need at least 2 steps"));
        }
        if !(self.padding > 0.0) {
            return Err(Error::invalid("grid.padding", "must be positive"));
        }
        if !(self.inner_tol > 0.0) || self.max_inner == 0 {
            return Err(Error::invalid("grid.inner_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// Values on a tensor grid. `values[s]` holds time node `stored[s]`, laid
/// out `[player][regime][node]` with node `j0 + n_x j1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub players: usize,
    pub regimes: usize,
    pub x: Vec<f64>,
    /// Full time grid actually used (after any halving).
    pub t: Vec<f64>,
    pub stored: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub boundary: &'static str,
    pub halvings: usize,
    /// Most inner iterations any step needed.
    pub max_inner_used: usize,
    /// `max |g|` over the grid.
    pub terminal_bound: f64,
    /// `max |f|` over the grid along the computed controls.
    pub running_bound: f64,
}

impl ValueGrid {
    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    pub fn nodes(&self) -> usize {
        self.n_x().pow(self.players as u32)
    }

    pub fn dx(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    fn offset(&self, player: usize, regime: usize) -> usize {
        (player * self.regimes + regime) * self.nodes()
    }

    /// Player `k`'s values in regime `i` at stored snapshot `s`.
    pub fn slice(&self, s: usize, player: usize, regime: usize) -> &[f64] {
        let o = self.offset(player, regime);
        &self.values[s][o..o + self.nodes()]
    }

    /// Snapshot index holding time node `n`, if stored.
    pub fn snapshot(&self, n: usize) -> Option<usize> {
        self.stored.binary_search(&n).ok()
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let n = self.n_x();
        (0..self.players).map(|l| self.x[(node / n.pow(l as u32)) % n]).collect()
    }

    /// Multilinear interpolation of player `k`'s value at snapshot `s`.
    pub fn value_at(&self, s: usize, player: usize, regime: usize, x: &[f64]) -> f64 {
        let n = self.n_x();
        let v = self.slice(s, player, regime);
        let (lo, dx) = (self.x[0], self.dx());
        let mut idx = Vec::with_capacity(self.players);
        let mut w = Vec::with_capacity(self.players);
        for &xl in x.iter().take(self.players) {
            let r = ((xl - lo) / dx).clamp(0.0, (n - 1) as f64);
            let j = (r.floor() as usize).min(n - 2);
            idx.push(j);
            w.push(r - j as f64);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.players) {
            let mut weight = 1.0;
            let mut node = 0;
            for l in 0..self.players {
                let up = (corner >> l) & 1;
                weight *= if up == 1 { w[l] } else { 1.0 - w[l] };
                node += (idx[l] + up) * n.pow(l as u32);
            }
            acc += weight * v[node];
        }
        acc
    }

    /// `max |grad v_k|` over nodes whose coordinates all lie in the inner
    /// half of the domain, at snapshot `s`.
    pub fn max_inner_gradient(&self, s: usize) -> f64 {
        let n = self.n_x();
        let dx = self.dx();
        let (lo, hi) = (self.x[0], self.x[n - 1]);
        let (c, half) = (0.5 * (lo + hi), 0.25 * (hi - lo));
        let mut worst: f64 = 0.0;
        for k in 0..self.players {
            for i in 0..self.regimes {
                let v = self.slice(s, k, i);
                for node in 0..self.nodes() {
                    let xs = self.coords(node);
                    if xs.iter().any(|x| (x - c).abs() > half) {
                        continue;
                    }
                    let mut g2 = 0.0;
                    for l in 0..self.players {
                        let stride = n.pow(l as u32);
                        let g = (v[node + stride] - v[node - stride]) / (2.0 * dx);
                        g2 += g * g;
                    }
                    worst = worst.max(g2.sqrt());
                }
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `t,x_0[,x_1],regime,player,value` for every stored snapshot.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for l in 0..self.players {
            s.push_str(&format!(",x_{l}"));
        }
        s.push_str(",regime,player,value\n");
        for (si, &n) in self.stored.iter().enumerate() {
            for i in 0..self.regimes {
                for k in 0..self.players {
                    let v = self.slice(si, k, i);
                    for (node, val) in v.iter().enumerate() {
                        s.push_str(&fmt_f64(self.t[n]));
                        for x in self.coords(node) {
                            s.push(',');
                            s.push_str(&fmt_f64(x));
                        }
                        s.push_str(&format!(",{i},{k},{}\n", fmt_f64(*val)));
                    }
                }
            }
        }
        s
    }

    /// A grid filled from `value(t, x, player, regime)` at every time node,
    /// e.g. to inject a known solution.
    pub fn from_fn(
        players: usize,
        regimes: usize,
        x: Vec<f64>,
        t: Vec<f64>,
        value: impl Fn(f64, &[f64], usize, usize) -> f64,
    ) -> Self {
        let mut g = Self {
            players,
            regimes,
            x,
            stored: (0..t.len()).collect(),
            t,
            values: Vec::new(),
            boundary: BOUNDARY_POLICY,
            halvings: 0,
            max_inner_used: 0,
            terminal_bound: 0.0,
            running_bound: 0.0,
        };
        let nodes = g.nodes();
        g.values = g
            .t
            .iter()
            .map(|&t| {
                let mut v = vec![0.0; players * regimes * nodes];
                for k in 0..players {
                    for i in 0..regimes {
                        for node in 0..nodes {
                            v[(k * regimes + i) * nodes + node] = value(t, &g.coords(node), k, i);
                        }
                    }
                }
                v
            })
            .collect();
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGrid {
    /// Times of the snapshots.
    pub t: Vec<f64>,
    pub players: usize,
    pub regimes: usize,
    /// `[snapshot][player][regime][node]`, flattened per snapshot.
    pub alpha: Vec<Vec<f64>>,
    /// `max |d_k v_k|` over all snapshots and nodes.
    pub gradient_bound: f64,
    pub alpha_bound: f64,
    /// `C` with `|alpha_hat| <= C (1 + |p|)`, maximised over the grid.
    pub growth_constant: f64,
}

impl FeedbackGrid {
    pub fn get(&self, s: usize, player: usize, regime: usize, node: usize, nodes: usize) -> f64 {
        self.alpha[s][(player * self.regimes + regime) * nodes + node]
    }
}

/// Domain `x0 +- padding (sigma_max sqrt(T) + T |b(0, x0, delta_x0, 0, i)|)`.
pub fn domain(spec: &GameSpec, padding: f64) -> (f64, f64) {
    let x0 = DVector::from_element(1, spec.initial_state[0]);
    let mu = MeasureArg::dirac(&x0);
    let zero = DVector::zeros(1);
    let mut sigma_max: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for i in 0..spec.regimes() {
        sigma_max = sigma_max.max(spec.coefficients.diffusion(0.0, &x0, &mu, i)[(0, 0)].abs());
        drift = drift.max(spec.drift(0.0, &x0, &mu, &zero, i)[0].abs());
    }
    let half = padding * (sigma_max * spec.horizon.sqrt() + spec.horizon * drift);
    (x0[0] - half, x0[0] + half)
}

fn players_of(spec: &GameSpec) -> Result<usize> {
    let players = match spec.interaction {
        Interaction::General { players } => players,
        _ => 1,
    };
    if !(1..=2).contains(&players) {
        return Err(Error::invalid("players", format!("the grid solver handles N <= 2, got {players}")));
    }
    if spec.dim_state() != 1 || spec.dim_control() != 1 {
        return Err(Error::invalid("spec", "the grid solver needs d = m = 1"));
    }
    Ok(players)
}

/// The others' law as seen by player `k` at grid point `xs`.
fn law_for(xs: &[f64], k: usize) -> MeasureArg {
    let other = if xs.len() == 1 { xs[0] } else { xs[1 - k] };
    MeasureArg::dirac(&DVector::from_element(1, other))
}

/// Derivative of `v` along dimension `l` (stride `stride`) at a node with
/// index `j` on that axis, using the Neumann ghost at the boundary.
fn d1(v: &[f64], node: usize, j: usize, n: usize, stride: usize, dx: f64) -> (f64, f64, f64) {
    let c = v[node];
    let (lo, hi) = if j == 0 {
        let up = v[node + stride];
        (2.0 * c - up, up)
    } else if j == n - 1 {
        let dn = v[node - stride];
        (dn, 2.0 * c - dn)
    } else {
        (v[node - stride], v[node + stride])
    };
    ((hi - lo) / (2.0 * dx), (c - lo) / dx, (hi - c) / dx)
}

/// Thomas algorithm for `-l x_{j-1} + d x_j - u x_{j+1} = r` (in place).
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    scratch[0] = -upper[0] / diag[0];
    rhs[0] /= diag[0];
    for j in 1..n {
        let m = diag[j] + lower[j] * scratch[j - 1];
        scratch[j] = -upper[j] / m;
        rhs[j] = (rhs[j] + lower[j] * rhs[j - 1]) / m;
    }
    for j in (0..n - 1).rev() {
        rhs[j] -= scratch[j] * rhs[j + 1];
    }
}

/// Per-node quantities under the controls implied by the current iterate.
struct Frozen {
    /// `[player][node]`.
    drift: Vec<Vec<f64>>,
    diff: Vec<Vec<f64>>,
    running: Vec<Vec<f64>>,
}

struct Solver<'a> {
    spec: &'a GameSpec,
    minimizer: Minimizer<'a>,
    players: usize,
    regimes: usize,
    x: Vec<f64>,
    dx: f64,
    nodes: usize,
    coords: Vec<Vec<f64>>,
}

impl<'a> Solver<'a> {
    fn slot(&self, k: usize, i: usize) -> usize {
        (k * self.regimes + i) * self.nodes
    }

    fn axis_index(&self, node: usize, l: usize) -> usize {
        let n = self.x.len();
        (node / n.pow(l as u32)) % n
    }

    fn freeze(&self, t: f64, v: &[f64], i: usize) -> Result<Frozen> {
        let n = self.x.len();
        let c = &self.spec.coefficients;
        let mut drift = vec![vec![0.0; self.nodes]; self.players];
        let mut diff = vec![vec![0.0; self.nodes]; self.players];
        let mut running = vec![vec![0.0; self.nodes]; self.players];
        let mut xv = DVector::zeros(1);
        let mut p = DVector::zeros(1);
        let mut a = DVector::zeros(1);
        for l in 0..self.players {
            let own = &v[self.slot(l, i)..self.slot(l, i) + self.nodes];
            let stride = n.pow(l as u32);
            for node in 0..self.nodes {
                let xs = &self.coords[node];
                xv[0] = xs[l];
                let mu = law_for(xs, l);
                p[0] = d1(own, node, self.axis_index(node, l), n, stride, self.dx).0;
                self.minimizer.alpha_into(t, &xv, &mu, &p, i, &mut a)?;
                drift[l][node] = self.spec.drift(t, &xv, &mu, &a, i)[0];
                let s = c.diffusion(t, &xv, &mu, i)[(0, 0)];
                diff[l][node] = 0.5 * s * s;
                running[l][node] = c.running_cost(t, &xv, &mu, &a, i);
            }
        }
        Ok(Frozen { drift, diff, running })
    }

    /// Bound on `|d b / d p|` through the minimizer: `|b2|^2 / (2 lambda)`.
    fn policy_gain(&self, t: f64) -> f64 {
        let c = &self.spec.coefficients;
        let lambda = self.spec.constants.lambda.max(f64::MIN_POSITIVE);
        (0..self.regimes)
            .map(|i| c.drift_control(t, i)[(0, 0)].powi(2) / (2.0 * lambda))
            .fold(0.0, f64::max)
    }

    /// Contraction ratio of one fixed-point sweep:
    /// `dt max_node (sum_l (|b_l| + gain max_k |d_l v_k|) / dx + exit rate)`.
    /// The gain term is the sensitivity of the frozen controls to `v`.
    fn cfl_ratio(&self, t: f64, frozen: &[Frozen], v: &[f64], dt: f64) -> f64 {
        let n = self.x.len();
        let gain = self.policy_gain(t);
        let mut worst: f64 = 0.0;
        for (i, fr) in frozen.iter().enumerate() {
            let rate = self.spec.generator.exit_rate(i);
            for node in 0..self.nodes {
                let mut adv = 0.0;
                for l in 0..self.players {
                    let stride = n.pow(l as u32);
                    let j = self.axis_index(node, l);
                    let grad = (0..self.players)
                        .map(|k| {
                            let o = self.slot(k, i);
                            d1(&v[o..o + self.nodes], node, j, n, stride, self.dx).0.abs()
                        })
                        .fold(0.0, f64::max);
                    adv += fr.drift[l][node].abs() + gain * grad;
                }
                worst = worst.max(dt * (adv / self.dx + rate));
            }
        }
        worst
    }

    /// Per `[player][node]`: central differences while they are monotone
    /// (cell Peclet number at most 2), upwind otherwise.
    fn stencils(&self, fr: &Frozen) -> Vec<Vec<bool>> {
        (0..self.players)
            .map(|l| {
                (0..self.nodes)
                    .map(|node| fr.drift[l][node].abs() * self.dx <= 2.0 * fr.diff[l][node])
                    .collect()
            })
            .collect()
    }

    /// One fixed-point sweep for player `k` in regime `i`. The stencil choice
    /// is held fixed within a time step; switching it between sweeps can
    /// trap the iteration in a two-cycle.
    #[allow(clippy::too_many_arguments)]
    fn sweep_one(
        &self,
        k: usize,
        i: usize,
        fr: &Frozen,
        central_ok: &[Vec<bool>],
        cur: &[f64],
        next: &[f64],
        dt: f64,
    ) -> Vec<f64> {
        let n = self.x.len();
        let o = self.slot(k, i);
        let vk = &cur[o..o + self.nodes];
        let mut rhs = vec![0.0; self.nodes];
        for node in 0..self.nodes {
            let mut adv = 0.0;
            for l in 0..self.players {
                let (central, back, fwd) = d1(vk, node, self.axis_index(node, l), n, n.pow(l as u32), self.dx);
                let b = fr.drift[l][node];
                let grad = if central_ok[l][node] {
                    central
                } else if b > 0.0 {
                    fwd
                } else {
                    back
                };
                adv += b * grad;
            }
            let mut coupling = 0.0;
            for j in 0..self.regimes {
                if j != i {
                    coupling += self.spec.generator.rate(i, j) * (cur[self.slot(k, j) + node] - vk[node]);
                }
            }
            rhs[node] = next[o + node] + dt * (adv + fr.running[k][node] + coupling);
        }
        // Implicit diffusion, own dimension first.
        let order: Vec<usize> = if self.players == 2 && k == 1 { vec![1, 0] } else { (0..self.players).collect() };
        let (mut lo, mut di, mut up, mut line, mut scratch) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let r = dt / (self.dx * self.dx);
        for l in order {
            let stride = n.pow(l as u32);
            for start in 0..self.nodes {
                if self.axis_index(start, l) != 0 {
                    continue;
                }
                for j in 0..n {
                    let node = start + j * stride;
                    let a = fr.diff[l][node];
                    line[j] = rhs[node];
                    // Boundary rows carry no diffusion: the ghost makes v_xx = 0.
                    if j == 0 || j == n - 1 {
                        lo[j] = 0.0;
                        up[j] = 0.0;
                        di[j] = 1.0;
                    } else {
                        lo[j] = r * a;
                        up[j] = r * a;
                        di[j] = 1.0 + 2.0 * r * a;
                    }
                }
                thomas(&lo, &di, &up, &mut line, &mut scratch);
                for j in 0..n {
                    rhs[start + j * stride] = line[j];
                }
            }
        }
        rhs
    }
}

fn build_solver<'a>(spec: &'a GameSpec, grid: &PdeGrid) -> Result<Solver<'a>> {
    let players = players_of(spec)?;
    let (lo, hi) = domain(spec, grid.padding);
    let n = grid.n_x;
    let x: Vec<f64> = (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect();
    let nodes = n.pow(players as u32);
    let coords = (0..nodes)
        .map(|node| (0..players).map(|l| x[(node / n.pow(l as u32)) % n]).collect())
        .collect();
    Ok(Solver {
        spec,
        minimizer: Minimizer::new(spec),
        players,
        regimes: spec.regimes(),
        dx: x[1] - x[0],
        x,
        nodes,
        coords,
    })
}

fn kept_nodes(n_t: usize, players: usize, keep_every: Option<usize>) -> Vec<bool> {
    let every = keep_every.unwrap_or(if players == 1 { 1 } else { (n_t / 8).max(1) });
    let mut keep = vec![false; n_t + 1];
    for n in (0..=n_t).filter(|n| n % every == 0 || *n == n_t) {
        for m in n.saturating_sub(1)..=(n + 1).min(n_t) {
            keep[m] = true;
        }
    }
    keep
}

pub fn solve_nash_system(spec: &GameSpec, grid: &PdeGrid) -> Result<ValueGrid> {
    grid.validate()?;
    let solver = build_solver(spec, grid)?;
    let mut halvings = 0;
    loop {
        let n_t = grid.n_t << halvings;
        match run(&solver, grid, n_t, halvings) {
            Err(Error::CflViolation { ratio, .. }) => {
                if halvings == grid.max_halvings {
                    return Err(Error::CflViolation { ratio, halvings });
                }
                halvings += 1;
            }
            other => return other,
        }
    }
}

fn run(s: &Solver, grid: &PdeGrid, n_t: usize, halvings: usize) -> Result<ValueGrid> {
    let spec = s.spec;
    let c = &spec.coefficients;
    let horizon = spec.horizon;
    let dt = horizon / n_t as f64;
    let t: Vec<f64> = (0..=n_t).map(|n| horizon * n as f64 / n_t as f64).collect();
    let keep = kept_nodes(n_t, s.players, grid.keep_every);
    let size = s.players * s.regimes * s.nodes;

    let mut next = vec![0.0; size];
    for k in 0..s.players {
        for i in 0..s.regimes {
            for node in 0..s.nodes {
                let xs = &s.coords[node];
                next[s.slot(k, i) + node] = c.terminal_cost(&DVector::from_element(1, xs[k]), &law_for(xs, k), i);
            }
        }
    }
    let terminal_bound = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut stored_rev = vec![(n_t, next.clone())];
    let mut running_bound: f64 = 0.0;
    let mut max_inner_used = 0;

    for n in (0..n_t).rev() {
        let mut cur = next.clone();
        let mut converged = false;
        let mut change = f64::INFINITY;
        let mut stencils: Vec<Vec<Vec<bool>>> = Vec::new();
        for it in 0..grid.max_inner {
            let frozen: Vec<Frozen> = (0..s.regimes)
                .into_par_iter()
                .map(|i| s.freeze(t[n], &cur, i))
                .collect::<Result<_>>()?;
            if it == 0 {
                stencils = frozen.iter().map(|fr| s.stencils(fr)).collect();
                let ratio = s.cfl_ratio(t[n], &frozen, &cur, dt);
                if ratio > CFL_BOUND {
                    return Err(Error::CflViolation { ratio, halvings });
                }
            }
            let pairs: Vec<(usize, usize)> = (0..s.players).flat_map(|k| (0..s.regimes).map(move |i| (k, i))).collect();
            let solved: Vec<Vec<f64>> = pairs
                .par_iter()
                .map(|&(k, i)| s.sweep_one(k, i, &frozen[i], &stencils[i], &cur, &next, dt))
                .collect();
            let mut new = vec![0.0; size];
            for (&(k, i), vals) in pairs.iter().zip(&solved) {
                new[s.slot(k, i)..s.slot(k, i) + s.nodes].copy_from_slice(vals);
            }
            change = new.iter().zip(&cur).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            cur = new;
            if !change.is_finite() {
                break;
            }
            if change <= grid.inner_tol {
                max_inner_used = max_inner_used.max(it + 1);
                for fr in &frozen {
                    for row in &fr.running {
                        running_bound = row.iter().fold(running_bound, |m, v| m.max(v.abs()));
                    }
                }
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PolicyNonconvergence { step: n, change });
        }
        if keep[n] {
            stored_rev.push((n, cur.clone()));
        }
        next = cur;
    }
    stored_rev.reverse();
    Ok(ValueGrid {
        players: s.players,
        regimes: s.regimes,
        x: s.x.clone(),
        t,
        stored: stored_rev.iter().map(|(n, _)| *n).collect(),
        values: stored_rev.into_iter().map(|(_, v)| v).collect(),
        boundary: BOUNDARY_POLICY,
        halvings,
        max_inner_used,
        terminal_bound,
        running_bound,
    })
}

/// `alpha_hat^k` at every stored node from central-difference gradients of
/// `v_k` along player `k`'s own coordinate.
pub fn feedback_from_values(values: &ValueGrid, spec: &GameSpec) -> Result<FeedbackGrid> {
    let n = values.n_x();
    let nodes = values.nodes();
    let dx = values.dx();
    let mut alpha = Vec::with_capacity(values.stored.len());
    let mut gradient_bound: f64 = 0.0;
    let mut alpha_bound: f64 = 0.0;
    let mut growth_constant: f64 = 0.0;
    for (si, &tn) in values.stored.iter().enumerate() {
        let t = values.t[tn];
        let mut snap = vec![0.0; values.players * values.regimes * nodes];
        for k in 0..values.players {
            let stride = n.pow(k as u32);
            for i in 0..values.regimes {
                let v = values.slice(si, k, i);
                for node in 0..nodes {
                    let xs = values.coords(node);
                    let j = (node / stride) % n;
                    let p = d1(v, node, j, n, stride, dx).0;
                    let r = hamiltonian::minimize(
                        spec,
                        t,
                        &DVector::from_element(1, xs[k]),
                        &law_for(&xs, k),
                        &DVector::from_element(1, p),
                        i,
                        hamiltonian::DEFAULT_TOL,
                    )?;
                    gradient_bound = gradient_bound.max(p.abs());
                    alpha_bound = alpha_bound.max(r.alpha_hat[0].abs());
                    growth_constant = growth_constant.max(r.growth_constant);
                    snap[(k * values.regimes + i) * nodes + node] = r.alpha_hat[0];
                }
            }
        }
        alpha.push(snap);
    }
    Ok(FeedbackGrid {
        t: values.stored.iter().map(|&n| values.t[n]).collect(),
        players: values.players,
        regimes: values.regimes,
        alpha,
        gradient_bound,
        alpha_bound,
        growth_constant,
    })
}

/// Fourth-order first and second derivatives at an axis index `j` with
/// `2 <= j <= n - 3`.
fn d4(v: &[f64], node: usize, stride: usize, dx: f64) -> (f64, f64) {
    let (m2, m1, c, p1, p2) = (
        v[node - 2 * stride],
        v[node - stride],
        v[node],
        v[node + stride],
        v[node + 2 * stride],
    );
    (
        (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * dx),
        (-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * dx * dx),
    )
}

/// RMS of `d_t v_k + sum_l [b_l d_l v_k + a_l d_ll v_k] + f_k + coupling`
/// over up to `sample_nodes` points per (player, regime), spread evenly over
/// interior time nodes with both neighbours stored and over grid nodes in the
/// inner half of the domain. Space derivatives are fourth order, the time
/// derivative is the central difference.
pub fn pde_residual(values: &ValueGrid, spec: &GameSpec, sample_nodes: usize) -> Result<f64> {
    let n = values.n_x();
    let nodes = values.nodes();
    let dx = values.dx();
    let (lo, hi) = (values.x[0], values.x[n - 1]);
    let (centre, half) = (0.5 * (lo + hi), 0.25 * (hi - lo));
    let c = &spec.coefficients;
    let minimizer = Minimizer::new(spec);

    let times: Vec<usize> = (1..values.stored.len().saturating_sub(1))
        .filter(|&s| {
            let tn = values.stored[s];
            values.stored[s - 1] == tn - 1 && values.stored[s + 1] == tn + 1
        })
        .collect();
    let space: Vec<usize> = (0..nodes)
        .filter(|&node| {
            values.coords(node).iter().all(|x| (x - centre).abs() <= half)
                && (0..values.players).all(|l| {
                    let j = (node / n.pow(l as u32)) % n;
                    (2..n - 2).contains(&j)
                })
        })
        .collect();
    if times.is_empty() || space.is_empty() || sample_nodes == 0 {
        return Err(Error::invalid("values", "no interior nodes with stored time neighbours"));
    }
    let total = times.len() * space.len();
    let count = sample_nodes.min(total);
    let mut acc = 0.0;
    let mut used = 0usize;
    for q in 0..count {
        let flat = (q as f64 * total as f64 / count as f64) as usize;
        let (si, node) = (times[flat / space.len()], space[flat % space.len()]);
        let tn = values.stored[si];
        let t = values.t[tn];
        let dt2 = values.t[tn + 1] - values.t[tn - 1];
        let xs = values.coords(node);
        for i in 0..values.regimes {
            // Controls and coefficients of every player at this node.
            let mut drift = vec![0.0; values.players];
            let mut diff = vec![0.0; values.players];
            let mut running = vec![0.0; values.players];
            for l in 0..values.players {
                let stride = n.pow(l as u32);
                let (g, _) = d4(values.slice(si, l, i), node, stride, dx);
                let xv = DVector::from_element(1, xs[l]);
                let mu = law_for(&xs, l);
                let a = minimizer.alpha(t, &xv, &mu, &DVector::from_element(1, g), i)?;
                drift[l] = spec.drift(t, &xv, &mu, &a, i)[0];
                let s = c.diffusion(t, &xv, &mu, i)[(0, 0)];
                diff[l] = 0.5 * s * s;
                running[l] = c.running_cost(t, &xv, &mu, &a, i);
            }
            for k in 0..values.players {
                let v = values.slice(si, k, i);
                let dt_v = (values.slice(si + 1, k, i)[node] - values.slice(si - 1, k, i)[node]) / dt2;
                let mut r = dt_v + running[k];
                for l in 0..values.players {
                    let (g, h) = d4(v, node, n.pow(l as u32), dx);
                    r += drift[l] * g + diff[l] * h;
                }
                for j in 0..values.regimes {
                    if j != i {
                        r += spec.generator.rate(i, j) * (values.slice(si, k, j)[node] - v[node]);
                    }
                }
                acc += r * r;
                used += 1;
            }
        }
    }
    Ok((acc / used as f64).sqrt())
}
