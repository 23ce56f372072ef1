//! Finite-state continuous-time Markov chain used as common noise.
//!
//! Paths are simulated exactly (exponential holding times, jump chain) and
//! stored as jump lists, so evaluation at any `t` is a binary search and the
//! compensators of the jump martingales have closed forms.
//!
//! States are indexed from 0.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::rng::SeedTree;

const ROW_SUM_TOL: f64 = 1e-12;

/// A validated conservative generator `Q = (q_ij)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    rates: DMatrix<f64>,
    rate_bound: f64,
}

impl GeneratorMatrix {
    /// Validates a raw rate matrix. `rate_bound` is the declared upper bound
    /// on off-diagonal rates; `None` means unbounded.
    pub fn new(raw: &[Vec<f64>], rate_bound: Option<f64>) -> Result<Self> {
        let n = raw.len();
        if n == 0 || raw.iter().any(|r| r.len() != n) {
            return Err(Error::NotSquare {
                rows: n,
                cols: raw.first().map_or(0, Vec::len),
            });
        }
        let bound = rate_bound.unwrap_or(f64::INFINITY);
        let mut rates = DMatrix::zeros(n, n);
        for (i, row) in raw.iter().enumerate() {
            let mut off = 0.0;
            for (j, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::invalid(format!("generator[{i}][{j}]"), "not finite"));
                }
                if i == j {
                    continue;
                }
                if q < 0.0 {
                    return Err(Error::NegativeOffDiagonal { row: i, col: j, value: q });
                }
                if q > bound {
                    return Err(Error::RateBoundExceeded {
                        row: i,
                        col: j,
                        value: q,
                        bound,
                    });
                }
                rates[(i, j)] = q;
                off += q;
            }
            let sum = off + row[i];
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::RowSumNonzero { row: i, sum });
            }
            rates[(i, i)] = -off;
        }
        Ok(Self {
            rates,
            rate_bound: bound,
        })
    }

    /// Single absorbing state.
    pub fn trivial() -> Self {
        Self {
            rates: DMatrix::zeros(1, 1),
            rate_bound: f64::INFINITY,
        }
    }

    pub fn states(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total exit rate `-q_ii`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[(state, state)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.states())
            .map(|i| self.exit_rate(i))
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.states())
            .map(|i| self.rates.row(i).iter().copied().collect())
            .collect()
    }

    /// Stationary distribution `pi Q = 0`, `sum pi = 1`, by a dense solve.
    /// Only meaningful for irreducible chains.
    pub fn stationary_distribution(&self) -> Option<Vec<f64>> {
        let n = self.states();
        let mut a = self.rates.transpose();
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut rhs = nalgebra::DVector::zeros(n);
        rhs[n - 1] = 1.0;
        a.lu().solve(&rhs).map(|v| v.iter().copied().collect())
    }
}

/// One realized càdlàg trajectory of the chain on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    initial_state: usize,
    jumps: Vec<(f64, usize)>,
    horizon: f64,
}

impl RegimePath {
    /// Builds a path from explicit jumps, checking ordering and that every
    /// jump changes the state.
    pub fn from_jumps(initial_state: usize, jumps: Vec<(f64, usize)>, horizon: f64) -> Result<Self> {
        let mut prev_t = 0.0;
        let mut prev_s = initial_state;
        for &(t, s) in &jumps {
            if !(t > prev_t && t <= horizon) || s == prev_s {
                return Err(Error::invalid(
                    "jumps",
                    format!("jump to {s} at {t} is not strictly after {prev_t} or does not change state"),
                ));
            }
            prev_t = t;
            prev_s = s;
        }
        Ok(Self {
            initial_state,
            jumps,
            horizon,
        })
    }

    pub fn constant(state: usize, horizon: f64) -> Self {
        Self {
            initial_state: state,
            jumps: Vec::new(),
            horizon,
        }
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn jumps(&self) -> &[(f64, usize)] {
        &self.jumps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `I_t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(s, _)| s <= t);
        if k == 0 {
            self.initial_state
        } else {
            self.jumps[k - 1].1
        }
    }

    /// Left limit `I_{t-}`.
    pub fn state_before(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(s, _)| s < t);
        if k == 0 {
            self.initial_state
        } else {
            self.jumps[k - 1].1
        }
    }

    /// Jumps with time in `(a, b]`, each as `(time, from, to)`.
    pub fn jumps_between(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        let start = self.jumps.partition_point(|&(s, _)| s <= a);
        let end = self.jumps.partition_point(|&(s, _)| s <= b);
        (start..end).map(move |k| {
            let from = if k == 0 {
                self.initial_state
            } else {
                self.jumps[k - 1].1
            };
            (self.jumps[k].0, from, self.jumps[k].1)
        })
    }

    /// Time spent in each state during `[a, b]`.
    pub fn occupation_between(&self, a: f64, b: f64, states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; states];
        let mut t = a;
        let mut s = self.state_at(a);
        for (jt, _, to) in self.jumps_between(a, b) {
            occ[s] += jt - t;
            t = jt;
            s = to;
        }
        occ[s] += b - t;
        occ
    }

    /// Piecewise-constant segments `(start, end, state)` covering `[0, horizon]`.
    pub fn segments(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.jumps.len() + 1);
        let mut t = 0.0;
        let mut s = self.initial_state;
        for &(jt, to) in &self.jumps {
            out.push((t, jt, s));
            t = jt;
            s = to;
        }
        out.push((t, self.horizon, s));
        out
    }
}

/// Exact jump-time simulation of the chain on `[0, horizon]`.
pub fn sample_path<R: Rng + ?Sized>(
    generator: &GeneratorMatrix,
    initial_state: usize,
    horizon: f64,
    rng: &mut R,
) -> RegimePath {
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut state = initial_state;
    loop {
        let rate = generator.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold = Exp::new(rate).expect("positive rate").sample(rng);
        t += hold;
        if t > horizon {
            break;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..generator.states() {
            if j == state {
                continue;
            }
            let q = generator.rate(state, j);
            next = j;
            if u < q {
                break;
            }
            u -= q;
        }
        // Guard against rounding selecting a zero-rate tail state.
        if generator.rate(state, next) <= 0.0 {
            next = (0..generator.states())
                .filter(|&j| j != state && generator.rate(state, j) > 0.0)
                .next_back()
                .expect("positive exit rate implies a reachable state");
        }
        jumps.push((t, next));
        state = next;
    }
    RegimePath {
        initial_state,
        jumps,
        horizon,
    }
}

/// `count` independent paths, path `k` drawn from stream `k` of `seeds`.
pub fn sample_paths(
    generator: &GeneratorMatrix,
    initial_state: usize,
    horizon: f64,
    seeds: &SeedTree,
    count: usize,
) -> Vec<RegimePath> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeds.stream(k as u64);
            sample_path(generator, initial_state, horizon, &mut rng)
        })
        .collect()
}

/// Time spent in each state over `[0, T]`; sums to `T`.
pub fn occupation_times(path: &RegimePath, states: usize) -> Vec<f64> {
    path.occupation_between(0.0, path.horizon, states)
}

/// Counting process, compensator and martingale for one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSeries {
    pub bracket: Vec<f64>,
    pub compensator: Vec<f64>,
}

impl PairSeries {
    pub fn martingale(&self) -> Vec<f64> {
        self.bracket
            .iter()
            .zip(&self.compensator)
            .map(|(b, c)| b - c)
            .collect()
    }
}

/// `[M_ij]`, `<M_ij>` and `M_ij` for every ordered pair, on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleLedger {
    grid: Vec<f64>,
    states: usize,
    /// Row-major `states x states`; diagonal entries are identically zero.
    pairs: Vec<PairSeries>,
}

impl MartingaleLedger {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn pair(&self, from: usize, to: usize) -> &PairSeries {
        &self.pairs[from * self.states + to]
    }

    pub fn martingale_at_end(&self, from: usize, to: usize) -> f64 {
        let p = self.pair(from, to);
        p.bracket.last().copied().unwrap_or(0.0) - p.compensator.last().copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,pair,bracket,compensator,martingale\n");
        for i in 0..self.states {
            for j in 0..self.states {
                if i == j {
                    continue;
                }
                let p = self.pair(i, j);
                for (k, t) in self.grid.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{}->{},{},{},{}\n",
                        fmt_f64(*t),
                        i,
                        j,
                        fmt_f64(p.bracket[k]),
                        fmt_f64(p.compensator[k]),
                        fmt_f64(p.bracket[k] - p.compensator[k])
                    ));
                }
            }
        }
        out
    }
}

/// Exact evaluation of the jump martingales on `grid` (sorted, inside `[0, T]`).
pub fn martingale_ledger(
    path: &RegimePath,
    generator: &GeneratorMatrix,
    grid: &[f64],
) -> Result<MartingaleLedger> {
    let horizon = path.horizon;
    let mut prev = 0.0;
    for &t in grid {
        if !(0.0..=horizon).contains(&t) || t < prev {
            return Err(Error::GridOutOfRange { t, horizon });
        }
        prev = t;
    }
    let s = generator.states();
    let mut pairs = vec![
        PairSeries {
            bracket: vec![0.0; grid.len()],
            compensator: vec![0.0; grid.len()],
        };
        s * s
    ];
    // Running totals advanced jump by jump while sweeping the grid.
    let mut counts = vec![0.0; s * s];
    let mut occ = vec![0.0; s];
    let mut t_cur = 0.0;
    let mut state = path.initial_state;
    let mut next_jump = 0;
    for (k, &t) in grid.iter().enumerate() {
        while next_jump < path.jumps.len() && path.jumps[next_jump].0 <= t {
            let (jt, to) = path.jumps[next_jump];
            occ[state] += jt - t_cur;
            counts[state * s + to] += 1.0;
            t_cur = jt;
            state = to;
            next_jump += 1;
        }
        let mut occ_t = occ.clone();
        occ_t[state] += t - t_cur;
        for i in 0..s {
            for j in 0..s {
                if i == j {
                    continue;
                }
                let p = &mut pairs[i * s + j];
                p.bracket[k] = counts[i * s + j];
                p.compensator[k] = generator.rate(i, j) * occ_t[i];
            }
        }
    }
    Ok(MartingaleLedger {
        grid: grid.to_vec(),
        states: s,
        pairs,
    })
}
