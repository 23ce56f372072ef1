use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // regime chain
    #[error("generator must be a non-empty square matrix (got {rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("negative off-diagonal rate q[{row}][{col}] = {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} of the generator sums to {sum:e}, not zero")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("rate q[{row}][{col}] = {value} exceeds the declared bound {bound}")]
    RateBoundExceeded {
        row: usize,
        col: usize,
        value: f64,
        bound: f64,
    },
    #[error("time grid point {t} lies outside [0, {horizon}] or the grid is unsorted")]
    GridOutOfRange { t: f64, horizon: f64 },

    // game model
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("regime {regime} out of range (chain has {states} states)")]
    RegimeOutOfRange { regime: usize, states: usize },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    // hamiltonian
    #[error("minimizer did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    // ode / riccati
    #[error("Riccati solution blew up at t = {t} (norm {norm:e})")]
    BlowUp { t: f64, norm: f64 },
    #[error("Riccati iterate lost symmetry at t = {t} (asymmetry {asymmetry:e})")]
    AsymmetryDrift { t: f64, asymmetry: f64 },
    #[error("time {t} is outside [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    // fbsde
    #[error("Picard iteration diverged: change norm grew for 3 consecutive iterations ({history:?})")]
    PicardDivergence { history: Vec<f64> },
    #[error("regression is rank deficient at node {node}, regime {regime} even at degree 0")]
    RegressionRankDeficiency { node: usize, regime: usize },

    // pde
    #[error("explicit terms violate the stability bound (contraction ratio {ratio:.3}) after halving dt {halvings} times")]
    CflViolation { ratio: f64, halvings: usize },
    #[error("policy iteration did not converge at time step {step} (last change {change:e})")]
    PolicyNonconvergence { step: usize, change: f64 },

    // metrics
    #[error("samples have unequal sizes ({left} vs {right})")]
    UnequalSizes { left: usize, right: usize },
    #[error("value {value} at N = {n} is not positive")]
    NonPositiveValue { n: f64, value: f64 },

    // runner
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("pipeline stage `{stage}` failed: {source}")]
    Pipeline {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("field file parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Pipeline {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
