//! Epsilon-Nash gap of the limiting LQ feedback in the N-player game:
//! `cargo run --release --example nash_gap_sweep -- [reps] [steps]`.

use std::time::Instant;

use nalgebra::DVector;
use rmfg::game_model::catalog;
use rmfg::lq_oracle::{solve_riccati, uniform_grid};
use rmfg::nplayer_sim::{nash_gap, Deviation, GapBudget, Population, Strategy};
use rmfg::regime_chain::GeneratorMatrix;
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().map_or(Ok(400), |s| s.parse())?;
    let steps: usize = args.next().map_or(Ok(64), |s| s.parse())?;
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?;
    let spec = catalog::build("lq-mean-drift", q, 1.0, DVector::from_element(1, 1.0), 0)?;
    let sol = solve_riccati(spec.lq().unwrap(), &spec.generator, &uniform_grid(1.0, 400))?;
    let start = Instant::now();
    let sweep = [
        Population::Limit,
        Population::Players(8),
        Population::Players(16),
        Population::Players(32),
        Population::Players(64),
    ];
    let report = nash_gap(
        &spec,
        Strategy::Riccati(&sol),
        &sweep,
        &Deviation::default_family(&spec),
        GapBudget { reps, steps },
        &SeedTree::new(2024, "nash-gap"),
    )?;
    print!("{}", report.to_csv());
    print!("{}", report.arms_csv());
    println!(
        "non-increasing within CIs: {}, {:.1}s",
        report.non_increasing_within_ci(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
