//! One-player LQ game on a grid, checked against the Riccati value
//! `K(0) x^2 / 2 + const`, plus the residual under grid refinement.
//!
//! cargo run --release --example nash_pde_lq -- [regimes]

use std::time::Instant;

use nalgebra::DVector;
use rmfg::game_model::{catalog, Interaction};
use rmfg::lq_oracle::{mean_flow_lq, solve_riccati, uniform_grid};
use rmfg::nash_pde::{feedback_from_values, pde_residual, solve_nash_system, PdeGrid};
use rmfg::regime_chain::{GeneratorMatrix, RegimePath};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let regimes: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let q = if regimes == 1 {
        GeneratorMatrix::trivial()
    } else {
        GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?
    };
    let spec = catalog::build("lq", q.clone(), 1.0, DVector::zeros(1), 0)?.with_interaction(Interaction::General { players: 1 });

    let started = Instant::now();
    let grid = PdeGrid::default();
    let values = solve_nash_system(&spec, &grid)?;
    println!(
        "n_x {} n_t {}: solved in {:.2}s, max inner iterations {}",
        grid.n_x,
        grid.n_t,
        started.elapsed().as_secs_f64(),
        values.max_inner_used
    );

    let ric = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, 4000))?;
    if regimes == 1 {
        // The constant is the expected cost from x0 = 0.
        let c0 = mean_flow_lq(&ric, &RegimePath::constant(0, 1.0), &DVector::zeros(1))?.expected_cost;
        let k0 = ric.coefficients_at(0.0, 0)?.0[(0, 0)];
        let s0 = values.snapshot(0).unwrap();
        let mut worst: f64 = 0.0;
        for (j, &x) in values.x.iter().enumerate() {
            if x.abs() <= 3.0 {
                worst = worst.max((values.slice(s0, 0, 0)[j] - (0.5 * k0 * x * x + c0)).abs());
            }
        }
        println!("sup |v(0,x) - K(0)x^2/2 - c| on |x| <= 3: {worst:.3e}");
    }
    let fb = feedback_from_values(&values, &spec)?;
    for i in 0..spec.regimes() {
        let k = ric.coefficients_at(0.0, i)?.0[(0, 0)];
        let mut worst: f64 = 0.0;
        for (j, &x) in values.x.iter().enumerate() {
            if x.abs() <= 3.0 {
                worst = worst.max((fb.get(0, 0, i, j, values.nodes()) + k * x).abs());
            }
        }
        println!("regime {i}: sup |alpha(0,x) + K(0)x| on |x| <= 3: {worst:.3e}");
    }

    let coarse = PdeGrid { n_x: 101, n_t: 200, ..grid.clone() };
    let r1 = pde_residual(&solve_nash_system(&spec, &coarse)?, &spec, 2000)?;
    let r2 = pde_residual(&values, &spec, 2000)?;
    println!("residual (101, 200) {r1:.3e}  (201, 400) {r2:.3e}  ratio {:.2}", r1 / r2);
    Ok(())
}
