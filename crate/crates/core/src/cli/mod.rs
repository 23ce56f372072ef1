//! Experiment runner: parse a TOML config, execute a named pipeline, and
//! write CSV outputs plus a JSON manifest with checksums.
//!
//! Output CSVs never contain wall-clock data, so two runs with the same
//! config and seed produce byte-identical files at any thread count; the
//! timings live in the manifest only.

pub mod acceptance;
mod config;
mod manifest;
mod run;

pub use config::{
    Budgets, ChaosSection, ExperimentConfig, FbsdeSection, GapSection, LqOverride, PdeSection, Pipeline,
    SimulateSection, SpecConfig, SuiteSection,
};
pub use manifest::{
    csv_max_abs_diff, diff_runs, DiffReport, FileDiff, FileEntry, RunManifest, StageTiming, MANIFEST_NAME,
};
pub use run::{criterion_stage, manifest_path, run, RunOptions};
