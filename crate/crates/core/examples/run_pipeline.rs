//! Runs a pipeline from a config file through the library runner and lists
//! the written files, like the `rmfg` binary does.
//!
//! cargo run --release --example run_pipeline -- [config] [pipeline] [out]

use std::path::PathBuf;

use rmfg::cli::{run, ExperimentConfig, Pipeline, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config_path = args
        .next()
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/lq.toml"), PathBuf::from);
    let pipeline: Pipeline = args.next().as_deref().unwrap_or("solve-lq").parse()?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("rmfg-example"), PathBuf::from);

    let config = ExperimentConfig::load(&config_path)?;
    let manifest = run(&config, pipeline, &RunOptions { out: out.clone(), threads: None })?;
    println!("{pipeline} (seed {}, {} threads) -> {}", manifest.seed, manifest.threads, out.display());
    for s in &manifest.stages {
        println!("  stage {:<12} {:.3}s", s.stage, s.seconds);
    }
    for f in &manifest.files {
        println!("  {}  {:>8} bytes  {}", &f.sha256[..16], f.bytes, f.path);
    }
    Ok(())
}
