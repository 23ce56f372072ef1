//! Riccati oracle for the mean-coupled LQ game: gains per regime, and the
//! conditional mean, variance and expected cost along sampled regime paths.
//!
//! cargo run --release --example riccati_mean_flow

use nalgebra::DVector;
use rmfg::analysis::mean_stderr;
use rmfg::game_model::catalog;
use rmfg::lq_oracle::{mean_flow_lq, riccati_residual, solve_riccati, uniform_grid};
use rmfg::regime_chain::{sample_paths, GeneratorMatrix};
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?;
    let x0 = DVector::from_element(1, 1.0);
    let spec = catalog::build("lq-mean-drift", q.clone(), 1.0, x0.clone(), 0)?;
    let sol = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, 400))?;
    println!("residual {:.2e}, {} RK4 steps", riccati_residual(&sol), sol.steps);
    for t in [0.0, 0.5, 1.0] {
        for i in 0..2 {
            let (k, l, a) = sol.coefficients_at(t, i)?;
            println!("t {t:.1} regime {i}: K {:.6} L {:+.6} k {:+.6}", k[(0, 0)], l[(0, 0)], a[0]);
        }
    }

    let paths = sample_paths(&q, 0, 1.0, &SeedTree::new(3, "paths"), 4);
    for (n, path) in paths.iter().enumerate() {
        let flow = mean_flow_lq(&sol, path, &x0)?;
        println!(
            "path {n} (jumps {:?}): m(1) = {:.5}, var(1) = {:.5}, cost {:.5}",
            path.jumps().iter().map(|j| (format!("{:.3}", j.0), j.1)).collect::<Vec<_>>(),
            flow.mean_at(1.0)[0],
            flow.covariance_at(1.0)[(0, 0)],
            flow.expected_cost
        );
    }

    let many = sample_paths(&q, 0, 1.0, &SeedTree::new(4, "paths"), 2000);
    let costs: Vec<f64> = many
        .iter()
        .map(|p| mean_flow_lq(&sol, p, &x0).map(|f| f.expected_cost))
        .collect::<Result<_, _>>()?;
    let (mean, se) = mean_stderr(&costs);
    println!("equilibrium cost averaged over 2000 regime paths: {mean:.5} +- {se:.5}");
    Ok(())
}
