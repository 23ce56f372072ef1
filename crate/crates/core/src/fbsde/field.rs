//! Polynomial decoupling field `u(t, x, m, i)` on a time grid.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::fmt_f64;

pub const MAX_DEGREE: usize = 5;
const FORMAT_TAG: &str = "rmfg-field v1";

/// Exponent vectors over `(x_1..x_d, m_1..m_d)` with total degree at most
/// `degree`, degree in `m` at most `mean_degree`, and zero exponent on
/// inactive variables. Graded order, deterministic.
pub fn basis_terms(d: usize, degree: usize, mean_degree: usize, active: &[bool]) -> Vec<u8> {
    let nvar = 2 * d;
    let mut out = Vec::new();
    let mut e = vec![0u8; nvar];
    for total in 0..=degree {
        enumerate(&mut e, 0, total, &mut |e: &[u8]| {
            let m_deg: usize = e[d..].iter().map(|&v| v as usize).sum();
            let ok = m_deg <= mean_degree && e.iter().zip(active).all(|(&p, &a)| a || p == 0);
            if ok {
                out.extend_from_slice(e);
            }
        });
    }
    out
}

fn enumerate(e: &mut [u8], pos: usize, left: usize, f: &mut impl FnMut(&[u8])) {
    if pos == e.len() - 1 {
        e[pos] = left as u8;
        f(e);
        return;
    }
    for v in (0..=left).rev() {
        e[pos] = v as u8;
        enumerate(e, pos + 1, left - v, f);
    }
    e[pos] = 0;
}

/// Least-squares fit for one `(node, regime)`. Variables are normalized as
/// `(v - center) / scale` before the monomials are formed.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// `terms x 2d` exponents.
    pub exponents: Vec<u8>,
    /// `terms x d` coefficients, row-major.
    pub coef: Vec<f64>,
    pub samples: usize,
    pub residual_var: f64,
    /// Copied from a neighbouring node because this regime had no samples.
    pub extrapolated: bool,
    /// Typical conditional mean at this node (average block mean).
    pub mean_ref: Vec<f64>,
}

impl NodeFit {
    pub fn zero(d: usize) -> Self {
        Self {
            center: vec![0.0; 2 * d],
            scale: vec![1.0; 2 * d],
            exponents: Vec::new(),
            coef: Vec::new(),
            samples: 0,
            residual_var: 0.0,
            extrapolated: false,
            mean_ref: vec![0.0; d],
        }
    }

    pub fn terms(&self) -> usize {
        self.exponents.len() / self.center.len()
    }

    fn dim(&self) -> usize {
        self.center.len() / 2
    }

    fn powers(&self, x: &[f64], m: &[f64]) -> [[f64; MAX_DEGREE + 1]; 6] {
        let d = self.dim();
        let mut pw = [[1.0; MAX_DEGREE + 1]; 6];
        for k in 0..2 * d {
            let v = if k < d { x[k] } else { m[k - d] };
            let z = (v - self.center[k]) / self.scale[k];
            for e in 1..=MAX_DEGREE {
                pw[k][e] = pw[k][e - 1] * z;
            }
        }
        pw
    }

    /// Writes the basis row at `(x, m)` into `phi`.
    pub fn features(&self, x: &[f64], m: &[f64], phi: &mut [f64]) {
        let nvar = self.center.len();
        let pw = self.powers(x, m);
        for (t, e) in self.exponents.chunks_exact(nvar).enumerate() {
            phi[t] = e.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product();
        }
    }

    /// Adds `u(x, m)` scaled by `w` into `out`.
    pub fn eval_add(&self, x: &[f64], m: &[f64], w: f64, out: &mut [f64]) {
        let d = self.dim();
        let nvar = 2 * d;
        if self.coef.is_empty() {
            return;
        }
        let pw = self.powers(x, m);
        for (t, e) in self.exponents.chunks_exact(nvar).enumerate() {
            let phi: f64 = e.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product();
            for j in 0..d {
                out[j] += w * self.coef[t * d + j] * phi;
            }
        }
    }

    pub fn eval(&self, x: &[f64], m: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_add(x, m, 1.0, out.as_mut_slice());
        out
    }

    /// `d u_j / d x_k`.
    pub fn jacobian_x(&self, x: &[f64], m: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let nvar = 2 * d;
        let mut jac = DMatrix::zeros(d, d);
        if self.coef.is_empty() {
            return jac;
        }
        let pw = self.powers(x, m);
        for (t, e) in self.exponents.chunks_exact(nvar).enumerate() {
            for k in 0..d {
                let p = e[k] as usize;
                if p == 0 {
                    continue;
                }
                let mut dphi = p as f64 * pw[k][p - 1] / self.scale[k];
                for (v, &q) in e.iter().enumerate() {
                    if v != k {
                        dphi *= pw[v][q as usize];
                    }
                }
                for j in 0..d {
                    jac[(j, k)] += self.coef[t * d + j] * dphi;
                }
            }
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub regimes: usize,
    pub degree: usize,
    pub mean_degree: usize,
    /// `fits[node][regime]`.
    pub fits: Vec<Vec<NodeFit>>,
    /// Largest finite-difference slope in `x` seen on the check grid.
    pub lipschitz: f64,
    /// `max |u| / (1 + |x|)` on the check grid.
    pub growth: f64,
    /// Per-coordinate range covered by the fitting samples.
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

impl DecouplingField {
    pub fn zeros(grid: Vec<f64>, dim: usize, regimes: usize, degree: usize, mean_degree: usize) -> Self {
        let fits = vec![vec![NodeFit::zero(dim); regimes]; grid.len()];
        Self {
            grid,
            dim,
            regimes,
            degree,
            mean_degree,
            fits,
            lipschitz: 0.0,
            growth: 0.0,
            x_min: vec![f64::NEG_INFINITY; dim],
            x_max: vec![f64::INFINITY; dim],
        }
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    /// Node index and interpolation weight toward the next node.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.horizon();
        if !(0.0..=end).contains(&t) {
            return Err(Error::TimeOutOfRange { t, start: 0.0, end });
        }
        let n = self.grid.partition_point(|&g| g <= t).clamp(1, self.grid.len() - 1) - 1;
        let w = (t - self.grid[n]) / (self.grid[n + 1] - self.grid[n]);
        Ok((n, w))
    }

    /// Evaluation at a node, without checks.
    pub fn eval_node(&self, node: usize, regime: usize, x: &[f64], m: &[f64]) -> DVector<f64> {
        self.fits[node][regime].eval(x, m)
    }

    pub fn evaluate(&self, t: f64, x: &DVector<f64>, xbar: &DVector<f64>, regime: usize) -> Result<DVector<f64>> {
        if regime >= self.regimes {
            return Err(Error::RegimeOutOfRange {
                regime,
                states: self.regimes,
            });
        }
        let (n, w) = self.locate(t)?;
        let mut out = DVector::zeros(self.dim);
        self.fits[n][regime].eval_add(x.as_slice(), xbar.as_slice(), 1.0 - w, out.as_mut_slice());
        if w > 0.0 {
            self.fits[n + 1][regime].eval_add(x.as_slice(), xbar.as_slice(), w, out.as_mut_slice());
        }
        Ok(out)
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.x_min.iter().zip(&self.x_max))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn to_text(&self) -> String {
        let d = self.dim;
        let mut s = format!(
            "{FORMAT_TAG} dim={d} regimes={} nodes={} degree={} mean_degree={} lipschitz={} growth={}\n",
            self.regimes,
            self.grid.len(),
            self.degree,
            self.mean_degree,
            fmt_f64(self.lipschitz),
            fmt_f64(self.growth)
        );
        let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "range,{},{}", join(&self.x_min), join(&self.x_max));
        for (n, t) in self.grid.iter().enumerate() {
            let _ = writeln!(s, "grid,{n},{}", fmt_f64(*t));
        }
        for (n, row) in self.fits.iter().enumerate() {
            for (i, f) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "fit,{n},{i},{},{},{},{},{},{},{}",
                    f.samples,
                    f.extrapolated as u8,
                    fmt_f64(f.residual_var),
                    f.terms(),
                    join(&f.center),
                    join(&f.scale),
                    join(&f.mean_ref)
                );
                for (t, e) in f.exponents.chunks_exact(2 * d).enumerate() {
                    let exps = e.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                    let _ = writeln!(s, "term,{n},{i},{exps},{}", join(&f.coef[t * d..(t + 1) * d]));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty field file".into()))?;
        let rest = header
            .strip_prefix(FORMAT_TAG)
            .ok_or_else(|| bad(format!("unknown header `{header}`")))?;
        let mut kv = std::collections::HashMap::new();
        for item in rest.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("bad header item `{item}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> { kv.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`"))) };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let flt = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let d = num("dim")?;
        let regimes = num("regimes")?;
        let nodes = num("nodes")?;
        let mut field = DecouplingField::zeros(vec![0.0; nodes], d, regimes, num("degree")?, num("mean_degree")?);
        field.lipschitz = flt("lipschitz")?;
        field.growth = flt("growth")?;
        let pf = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number `{s}`"))) };
        let pu = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("bad index `{s}`"))) };
        for (ln, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let ctx = |m: &str| bad(format!("line {}: {m}", ln + 2));
            let idx = |k: usize, limit: usize| -> Result<usize> {
                let v = pu(cols.get(k).ok_or_else(|| ctx("missing column"))?)?;
                if v >= limit {
                    return Err(ctx("index out of range"));
                }
                Ok(v)
            };
            match cols[0] {
                "range" if cols.len() == 1 + 2 * d => {
                    for k in 0..d {
                        field.x_min[k] = pf(cols[1 + k])?;
                        field.x_max[k] = pf(cols[1 + d + k])?;
                    }
                }
                "grid" if cols.len() == 3 => {
                    let n = idx(1, nodes)?;
                    field.grid[n] = pf(cols[2])?;
                }
                "fit" if cols.len() == 7 + 5 * d => {
                    let (n, i) = (idx(1, nodes)?, idx(2, regimes)?);
                    let f = &mut field.fits[n][i];
                    f.samples = pu(cols[3])?;
                    f.extrapolated = cols[4] == "1";
                    f.residual_var = pf(cols[5])?;
                    let off = 7;
                    f.center = cols[off..off + 2 * d].iter().map(|c| pf(c)).collect::<Result<_>>()?;
                    f.scale = cols[off + 2 * d..off + 4 * d].iter().map(|c| pf(c)).collect::<Result<_>>()?;
                    f.mean_ref = cols[off + 4 * d..off + 5 * d].iter().map(|c| pf(c)).collect::<Result<_>>()?;
                    f.exponents.clear();
                    f.coef.clear();
                }
                "term" if cols.len() == 3 + 3 * d => {
                    let (n, i) = (idx(1, nodes)?, idx(2, regimes)?);
                    let f = &mut field.fits[n][i];
                    for c in &cols[3..3 + 2 * d] {
                        let e: u8 = c.parse().map_err(|_| ctx("bad exponent"))?;
                        f.exponents.push(e);
                    }
                    for c in &cols[3 + 2 * d..] {
                        f.coef.push(pf(c)?);
                    }
                }
                _ => return Err(ctx("unrecognized record")),
            }
        }
        if field.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(bad("time grid is not increasing".into()));
        }
        Ok(field)
    }
}
