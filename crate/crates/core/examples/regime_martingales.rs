//! Samples the two-state regime chain, prints the jump-martingale ledger of one
//! path and Monte Carlo checks of `E[M_ij(T)] = 0` and the stationary law.
//!
//! cargo run --release --example regime_martingales -- [paths]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmfg::analysis::mean_stderr;
use rmfg::regime_chain::{martingale_ledger, occupation_times, sample_path, sample_paths, GeneratorMatrix};
use rmfg::rng::SeedTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let paths: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let q = GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let path = sample_path(&q, 0, 2.0, &mut rng);
    println!("one path: start 0, jumps {:?}", path.jumps());
    let grid: Vec<f64> = (0..=8).map(|k| 0.25 * k as f64).collect();
    print!("{}", martingale_ledger(&path, &q, &grid)?.to_csv());

    let sample = sample_paths(&q, 0, 2.0, &SeedTree::new(2, "paths"), paths);
    for (i, j) in [(0, 1), (1, 0)] {
        let ends: Vec<f64> = sample
            .iter()
            .map(|p| martingale_ledger(p, &q, &[2.0]).map(|l| l.martingale_at_end(i, j)))
            .collect::<Result<_, _>>()?;
        let (mean, se) = mean_stderr(&ends);
        println!("M_{i}{j}(2): mean {mean:+.4} (stderr {se:.4}, {:.2} se)", mean / se);
    }

    let long = sample_path(&q, 0, 5000.0, &mut rng);
    let occ = occupation_times(&long, 2);
    let pi = q.stationary_distribution().ok_or("no stationary law")?;
    println!("fraction of [0, 5000] in state 0: {:.4} (stationary {:.4})", occ[0] / 5000.0, pi[0]);
    Ok(())
}
