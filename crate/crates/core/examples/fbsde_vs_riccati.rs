//! Solves the LQ catalog game with the particle FBSDE solver and compares the
//! fitted decoupling field with the Riccati solution.
//!
//! cargo run --release --example fbsde_vs_riccati -- [regimes]

use nalgebra::DVector;
use rmfg::fbsde::{self, FbsdeBudget};
use rmfg::game_model::catalog;
use rmfg::lq_oracle::{decoupling_field_lq, solve_riccati, uniform_grid};
use rmfg::regime_chain::GeneratorMatrix;
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let regimes: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2);
    let q = if regimes == 1 {
        GeneratorMatrix::trivial()
    } else {
        GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?
    };
    let spec = catalog::build("lq", q.clone(), 1.0, DVector::zeros(1), 0)?;
    let started = std::time::Instant::now();
    let sol = fbsde::solve(&spec, &FbsdeBudget::default(), &SeedTree::new(7, "fbsde"))?;
    println!("solved in {:.1}s", started.elapsed().as_secs_f64());
    for (k, it) in sol.report.iterations.iter().enumerate() {
        println!("picard {:>2}: change {:.3e}  law drift {:.3e}", k + 1, it.change, it.law_drift);
    }

    let riccati = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, 2000))?;
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.5] {
        for i in 0..spec.regimes() {
            let (n, _) = sol.field.locate(t)?;
            let fit = &sol.field.fits[n][i];
            if fit.extrapolated {
                continue;
            }
            let m = DVector::from_vec(fit.mean_ref.clone());
            for j in 0..=40 {
                let x = DVector::from_element(1, -2.0 + 0.1 * j as f64);
                let u = sol.field.evaluate(t, &x, &m, i)?[0];
                let p = decoupling_field_lq(&riccati, t, &x, &m, i)?[0];
                worst = worst.max((u - p).abs() / (1.0 + x[0].abs()));
            }
        }
    }
    println!("sup |u_fbsde - u_riccati| / (1 + |x|) = {worst:.3e}");
    println!("bsde residual {:.3e}", fbsde::bsde_residual(&sol.ensemble, &spec, &sol.field));
    Ok(())
}
