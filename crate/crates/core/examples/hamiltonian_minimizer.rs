//! Minimizes the Hamiltonian of the quartic-cost game by damped Newton and
//! shows the linear growth of the minimizer in the costate.
//!
//! cargo run --release --example hamiltonian_minimizer

use nalgebra::DVector;
use rmfg::game_model::catalog;
use rmfg::hamiltonian::{minimize, DEFAULT_TOL};
use rmfg::measure::MeasureArg;
use rmfg::regime_chain::GeneratorMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = catalog::build("smooth-nonquadratic-test", GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0)?;
    let x = DVector::zeros(1);
    let mu = MeasureArg::dirac(&x);
    println!("{:>10} {:>14} {:>10} {:>6} {:>12}", "p", "alpha_hat", "|a|/(1+|p|)", "iters", "residual");
    for p in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0] {
        let r = minimize(&spec, 0.0, &x, &mu, &DVector::from_element(1, p), 0, DEFAULT_TOL)?;
        let a = r.alpha_hat[0];
        println!(
            "{p:>10} {a:>14.8} {:>10.4} {:>6} {:>12.2e}",
            a.abs() / (1.0 + p),
            r.iterations,
            r.gradient_norm_at_opt
        );
    }
    // alpha^3 + alpha + 1 = 0 at p = 1.
    let r = minimize(&spec, 0.0, &x, &mu, &DVector::from_element(1, 1.0), 0, DEFAULT_TOL)?;
    let a = r.alpha_hat[0];
    println!("p = 1: alpha_hat = {a:.10}, cubic residual {:.1e}", a * a * a + a + 1.0);
    Ok(())
}
