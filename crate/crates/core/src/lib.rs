pub mod analysis;
pub mod cli;
pub mod error;
pub mod fbsde;
pub mod game_model;
pub mod hamiltonian;
pub mod io;
pub mod lq_oracle;
pub mod measure;
pub mod nplayer_sim;
pub mod nash_pde;
pub mod regime_chain;
pub mod rng;

pub use error::{Error, Result};
