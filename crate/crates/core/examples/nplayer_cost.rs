//! Simulates the N-player game with every player using the mean-field
//! feedback and compares a player's cost with the limit value.
//!
//! cargo run --release --example nplayer_cost -- [players] [reps]

use nalgebra::DVector;
use rmfg::analysis::mean_stderr;
use rmfg::game_model::catalog;
use rmfg::lq_oracle::{mean_flow_lq, solve_riccati, uniform_grid};
use rmfg::nplayer_sim::{estimate_cost, simulate, SimConfig, Strategy};
use rmfg::regime_chain::{sample_paths, GeneratorMatrix};
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let players: usize = args.next().map_or(Ok(32), |s| s.parse())?;
    let reps: usize = args.next().map_or(Ok(400), |s| s.parse())?;
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?;
    let x0 = DVector::from_element(1, 1.0);
    let spec = catalog::build("lq-mean-drift", q.clone(), 1.0, x0.clone(), 0)?;
    let sol = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, 400))?;

    let runs = simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(players, reps, 64), &SeedTree::new(5, "sim"))?;
    let cost = estimate_cost(&spec, &runs, 0)?;
    println!("N = {players}: player 0 cost {:.5} +- {:.5} ({} reps, dt {})", cost.mean, cost.stderr, cost.reps, cost.dt);

    let paths = sample_paths(&q, 0, 1.0, &SeedTree::new(6, "paths"), 4000);
    let limit: Vec<f64> = paths
        .iter()
        .map(|p| mean_flow_lq(&sol, p, &x0).map(|f| f.expected_cost))
        .collect::<Result<_, _>>()?;
    let (mean, se) = mean_stderr(&limit);
    println!("limit value (Riccati, averaged over regimes): {mean:.5} +- {se:.5}");
    Ok(())
}
