//! Particle-regression solver for the conditional McKean-Vlasov FBSDE.
//!
//! Blocks of particles share one regime path, so the block empirical law is
//! the conditional law given the regime filtration. The backward component
//! is represented by a decoupling field `P = u(t, X, m, I)` that is fitted
//! per time node and regime on polynomials in `(x, block mean)`, and Picard
//! iteration alternates forward simulation under the frozen field with a
//! backward regression sweep.

mod field;
mod solver;

pub use field::{basis_terms, DecouplingField, NodeFit, MAX_DEGREE};
pub use solver::{
    bsde_residual, conditional_law_summary, evaluate_field, solve, Block, FbsdeBudget, FbsdeSolution,
    ParticleEnsemble, PicardIteration, PicardReport,
};
