//! Spot-checks the structural hypotheses of every catalog game and prints
//! each validation report.
//!
//! cargo run --release --example validate_catalog -- [samples]

use nalgebra::DVector;
use rmfg::game_model::{catalog, validate_spec};
use rmfg::regime_chain::GeneratorMatrix;
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?;
    for name in catalog::CATALOG {
        let spec = catalog::build(name, q.clone(), 1.0, DVector::zeros(1), 0)?;
        let mut rng = SeedTree::new(1, "validate").child(name).stream(0);
        let report = validate_spec(&spec, samples, &mut rng);
        println!("== {name}: {}", if report.all_pass() { "all pass" } else { "FAILURES" });
        print!("{}", report.to_csv());
        println!("convexity modulus {:.4}\n", report.convexity_modulus);
    }
    Ok(())
}
