//! Propagation-of-chaos sweep: `E[W2^2(mu_hat^N_t, L(X_t | regimes))]` against `N`.

use rayon::prelude::*;

use super::metrics::{epsilon_rate, fit_loglog_slope, mean_stderr, w2_squared_quantile, w2_squared_to_gaussian, LogLogFit};
use crate::error::{Error, Result};
use crate::game_model::GameSpec;
use crate::io::fmt_f64;
use crate::nplayer_sim::{simulate_rep, SimConfig, SimulationRun, Strategy};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChaosBudget {
    pub reps: usize,
    /// Euler steps; a multiple of `t_nodes - 1`.
    pub steps: usize,
    /// Nodes of the time grid the sup is taken over.
    pub t_nodes: usize,
    /// Reference block size as a multiple of the largest `N` (non-LQ only).
    pub reference_factor: usize,
}

impl Default for ChaosBudget {
    fn default() -> Self {
        Self {
            reps: 200,
            steps: 64,
            t_nodes: 17,
            reference_factor: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosRow {
    pub players: usize,
    pub reps: usize,
    /// Max over the time grid of the replication mean of `W2^2`.
    pub estimate: f64,
    /// Standard error at the maximizing time.
    pub stderr: f64,
    pub sup_time: f64,
    /// `(t, mean, stderr)` per grid node.
    pub by_time: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosTable {
    pub spec: String,
    pub seed: u64,
    pub budget: ChaosBudget,
    /// Whether the reference is the exact conditional Gaussian (LQ) or a
    /// simulated block.
    pub gaussian_reference: bool,
    pub rows: Vec<ChaosRow>,
    pub fit: LogLogFit,
    /// Exponent of `eps_N^2`.
    pub reference_slope: f64,
}

impl ChaosTable {
    /// Estimates non-increasing in `N`, each step allowed a 95% combined
    /// interval of slack.
    pub fn monotone_within_ci(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let slack = 1.96 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            w[1].estimate <= w[0].estimate + slack
        })
    }

    /// 95% interval of the fitted slope.
    pub fn slope_ci(&self) -> (f64, f64) {
        (self.fit.slope - 1.96 * self.fit.stderr, self.fit.slope + 1.96 * self.fit.stderr)
    }

    pub fn to_csv(&self) -> String {
        let b = &self.budget;
        let mut s = format!(
            "# spec={},seed={},reps={},steps={},t_nodes={},reference={}\n# slope={},slope_stderr={},intercept={},reference_slope={}\nN,reps,estimate,stderr,sup_time\n",
            self.spec,
            self.seed,
            b.reps,
            b.steps,
            b.t_nodes,
            if self.gaussian_reference {
                "gaussian".to_string()
            } else {
                format!("block x{}", b.reference_factor)
            },
            fmt_f64(self.fit.slope),
            fmt_f64(self.fit.stderr),
            fmt_f64(self.fit.intercept),
            fmt_f64(self.reference_slope),
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.players,
                r.reps,
                fmt_f64(r.estimate),
                fmt_f64(r.stderr),
                fmt_f64(r.sup_time)
            ));
        }
        s
    }
}

fn positions(run: &SimulationRun, node: usize) -> Vec<f64> {
    (0..run.players).map(|k| run.x(node, k)[0]).collect()
}

/// Simulates each `N` on shared regime paths and compares the empirical
/// measure with the limit law at `t_nodes` equally spaced times: the exact
/// conditional Gaussian for the Riccati strategy, otherwise an independent
/// block of `reference_factor * max N` particles on the same regime path.
pub fn chaos_sweep(
    spec: &GameSpec,
    strategy: Strategy<'_>,
    n_list: &[usize],
    budget: ChaosBudget,
    seed: u64,
) -> Result<ChaosTable> {
    if spec.dim_state() != 1 {
        return Err(Error::invalid("spec", "the chaos sweep needs d = 1 (exact W2)"));
    }
    if n_list.len() < 3 || n_list.windows(2).any(|w| w[1] <= w[0]) || n_list[0] < 2 {
        return Err(Error::invalid("N_list", "need at least 3 strictly increasing values >= 2"));
    }
    if n_list[n_list.len() - 1] < 8 * n_list[0] {
        return Err(Error::invalid("N_list", "must span at least a factor 8"));
    }
    if budget.t_nodes < 2 || budget.steps % (budget.t_nodes - 1) != 0 || budget.reps < 2 {
        return Err(Error::invalid("budget", "steps must be a multiple of t_nodes - 1 and reps >= 2"));
    }
    let seeds = SeedTree::new(seed, "chaos");
    let gaussian = matches!(strategy, Strategy::Riccati(_));
    let max_n = n_list[n_list.len() - 1];
    let stride = budget.steps / (budget.t_nodes - 1);
    let nodes: Vec<usize> = (0..budget.t_nodes).map(|j| j * stride).collect();

    // w2[rep][n_index][t_index]
    let w2: Vec<Vec<Vec<f64>>> = (0..budget.reps)
        .into_par_iter()
        .map(|r| {
            let reference = if gaussian {
                None
            } else {
                let cfg = SimConfig {
                    stream_offset: max_n,
                    ..SimConfig::new(budget.reference_factor * max_n, 1, budget.steps)
                };
                Some(simulate_rep(spec, strategy, &cfg, &seeds, r)?)
            };
            n_list
                .iter()
                .map(|&n| {
                    let run = simulate_rep(spec, strategy, &SimConfig::new(n, 1, budget.steps), &seeds, r)?;
                    Ok(nodes
                        .iter()
                        .map(|&node| {
                            let sample = positions(&run, node);
                            match &reference {
                                None => w2_squared_to_gaussian(
                                    &sample,
                                    run.limit_mean[node][0],
                                    run.limit_variance[node].max(0.0).sqrt(),
                                ),
                                Some(block) => w2_squared_quantile(&sample, &positions(block, node)),
                            }
                        })
                        .collect())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let dt = spec.horizon / budget.steps as f64;
    let rows: Vec<ChaosRow> = n_list
        .iter()
        .enumerate()
        .map(|(ni, &n)| {
            let by_time: Vec<(f64, f64, f64)> = nodes
                .iter()
                .enumerate()
                .map(|(ti, &node)| {
                    let vals: Vec<f64> = w2.iter().map(|rep| rep[ni][ti]).collect();
                    let (m, se) = mean_stderr(&vals);
                    (node as f64 * dt, m, se)
                })
                .collect();
            let best = by_time
                .iter()
                .copied()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("t_nodes >= 2");
            ChaosRow {
                players: n,
                reps: budget.reps,
                estimate: best.1,
                stderr: best.2,
                sup_time: best.0,
                by_time,
            }
        })
        .collect();
    let fit = fit_loglog_slope(&rows.iter().map(|r| (r.players as f64, r.estimate)).collect::<Vec<_>>())?;
    // eps_N^2 = N^{-2/max(d,4)} for d != 4.
    let reference_slope = (epsilon_rate(4096, 1).powi(2)).ln() / 4096f64.ln();
    Ok(ChaosTable {
        spec: spec.name.clone(),
        seed,
        budget,
        gaussian_reference: gaussian,
        rows,
        fit,
        reference_slope,
    })
}
