//! Propagation of chaos on the mean-coupled LQ game:
//! `cargo run --release --example chaos_sweep -- [reps] [regimes]`.

use std::time::Instant;

use nalgebra::DVector;
use rmfg::analysis::{chaos_sweep, ChaosBudget};
use rmfg::game_model::catalog;
use rmfg::lq_oracle::{solve_riccati, uniform_grid};
use rmfg::nplayer_sim::Strategy;
use rmfg::regime_chain::GeneratorMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().map_or(Ok(200), |s| s.parse())?;
    let regimes: usize = args.next().map_or(Ok(2), |s| s.parse())?;
    let q = if regimes == 1 {
        GeneratorMatrix::trivial()
    } else {
        GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?
    };
    let spec = catalog::build("lq-mean-drift", q, 1.0, DVector::from_element(1, 1.0), 0)?;
    let sol = solve_riccati(spec.lq().unwrap(), &spec.generator, &uniform_grid(1.0, 400))?;
    let start = Instant::now();
    let table = chaos_sweep(
        &spec,
        Strategy::Riccati(&sol),
        &[8, 16, 32, 64, 128],
        ChaosBudget { reps, ..ChaosBudget::default() },
        2024,
    )?;
    print!("{}", table.to_csv());
    println!(
        "slope {:.3} (95% CI {:.3}..{:.3}), monotone {}, {:.1}s",
        table.fit.slope,
        table.slope_ci().0,
        table.slope_ci().1,
        table.monotone_within_ci(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
