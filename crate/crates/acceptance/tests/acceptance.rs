//! Runs the `full-lq-acceptance` pipeline twice (one and two worker threads)
//! and prints one PASS/FAIL line per criterion. Criteria 1-6 and 8 come from
//! the first run's `acceptance.csv` and stage timings; criterion 7 compares
//! the two runs' outputs.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rmfg::cli::acceptance::{verdicts, Verdict};
use rmfg::cli::{diff_runs, run, ExperimentConfig, Pipeline, RunManifest, RunOptions, MANIFEST_NAME};

const TITLES: [(u8, &str); 8] = [
    (1, "Hamiltonian minimizer suite"),
    (2, "regime-chain suite"),
    (3, "LQ cross-oracle, FBSDE vs Riccati"),
    (4, "Nash-PDE suite"),
    (5, "propagation-of-chaos rate"),
    (6, "epsilon-Nash gap"),
    (7, "determinism across runs and thread counts"),
    (8, "wasserstein2_1d vs brute force"),
];

fn title(id: u8) -> &'static str {
    TITLES.iter().find(|(i, _)| *i == id).map_or("?", |(_, t)| t)
}

fn run_once(config: &ExperimentConfig, out: &Path, threads: usize) -> RunManifest {
    let start = Instant::now();
    let manifest = run(config, Pipeline::FullLqAcceptance, &RunOptions {
        out: out.to_path_buf(),
        threads: Some(threads),
    })
    .unwrap_or_else(|e| panic!("full-lq-acceptance with {threads} thread(s) failed: {e}"));
    eprintln!("  run with {threads} thread(s): {:.1}s", start.elapsed().as_secs_f64());
    manifest
}

/// `check=value relation bound` for each failed row of criterion `id`.
fn failure_details(csv: &str, id: u8) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[0] == id.to_string() && c[6] != "PASS")
        .map(|c| match c[5] {
            "" => format!("{}={} (want {} {})", c[1], c[2], c[3], c[4]),
            upper => format!("{}={} (want in [{}, {}])", c[1], c[2], c[4], upper),
        })
        .collect()
}

fn main() -> ExitCode {
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/full-lq-acceptance.toml");
    let config = ExperimentConfig::load(&config_path).expect("acceptance config");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());

    eprintln!("acceptance: full-lq-acceptance, seed {:?}", config.seed);
    let ma = run_once(&config, a.path(), 1);
    let mb = run_once(&config, b.path(), 2);

    let csv = std::fs::read_to_string(a.path().join("acceptance.csv")).expect("acceptance.csv");
    let mut results: Vec<(Verdict, Vec<String>)> = verdicts(&csv, &ma)
        .expect("parse acceptance.csv")
        .into_iter()
        .map(|v| {
            let details = failure_details(&csv, v.id);
            (v, details)
        })
        .collect();

    let diff = diff_runs(&a.path().join(MANIFEST_NAME), &b.path().join(MANIFEST_NAME)).expect("diff runs");
    let identical = diff.is_empty() && ma.inventory_digest() == mb.inventory_digest() && !ma.files.is_empty();
    results.push((
        Verdict {
            id: 7,
            failed_checks: if identical { vec![] } else { vec!["checksums".into()] },
            seconds: None,
            limit: None,
        },
        if identical {
            vec![]
        } else {
            vec![diff.to_string().replace('\n', "; ")]
        },
    ));
    results.sort_by_key(|(v, _)| v.id);

    let mut failed = 0;
    println!();
    for (v, details) in &results {
        let verdict = if v.passed() { "PASS" } else { "FAIL" };
        let timing = match (v.seconds, v.limit) {
            (Some(s), Some(l)) => format!(" [{s:.1}s, limit {l:.0}s]"),
            _ if v.id == 7 => format!(" [{} files, digest {}]", ma.files.len(), &ma.inventory_digest()[..16]),
            _ => String::new(),
        };
        println!("criterion {}: {verdict} {}{timing}", v.id, title(v.id));
        for d in details {
            println!("    {d}");
        }
        if !v.in_time() {
            println!("    over the time limit");
        }
        if !v.passed() {
            failed += 1;
        }
    }
    let missing: Vec<u8> = (1..=8).filter(|id| !results.iter().any(|(v, _)| v.id == *id)).collect();
    for id in &missing {
        println!("criterion {id}: FAIL {} [no result]", title(*id));
    }
    failed += missing.len();
    println!("\nacceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
