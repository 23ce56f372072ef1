use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::acceptance::{self, reports_to_csv, CriterionReport};
use super::config::{pde_interaction, ExperimentConfig, Pipeline};
use super::manifest::{FileEntry, RunManifest, StageTiming, MANIFEST_FORMAT, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::fbsde::{self, FbsdeSolution};
use crate::game_model::{validate_spec, CheckStatus, GameSpec};
use crate::io::{fmt_f64, sha256_hex, write_atomic};
use crate::lq_oracle::{riccati_residual, solve_riccati, uniform_grid, RiccatiSolution};
use crate::nash_pde::{feedback_from_values, pde_residual, solve_nash_system};
use crate::nplayer_sim::{estimate_cost, nash_gap, runs_to_csv, simulate, Deviation, GapBudget, Population, SimConfig, Strategy};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; hardware parallelism when `None`.
    pub threads: Option<usize>,
}

/// Output directory and stage bookkeeping for one run.
struct Recorder {
    out: PathBuf,
    stages: Vec<StageTiming>,
    files: Vec<FileEntry>,
}

impl Recorder {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f().map_err(|e| match e {
            e @ Error::Config { .. } => e,
            e => e.in_stage(name),
        })?;
        self.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(value)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents.as_bytes()).map_err(|e| Error::Io(e).in_stage("write"))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len() as u64,
        });
        Ok(())
    }
}

/// Executes `pipeline`, writes its outputs atomically under `opts.out`, and
/// writes `manifest.json` last.
pub fn run(config: &ExperimentConfig, pipeline: Pipeline, opts: &RunOptions) -> Result<RunManifest> {
    if let Some(p) = config.pipeline {
        if p != pipeline {
            return Err(Error::config(
                "pipeline",
                format!("the config names `{p}` but `{pipeline}` was requested"),
            ));
        }
    }
    config.validate()?;
    let seed = config.seed()?;
    let spec = config.build_spec()?;
    let threads = match opts.threads {
        Some(0) => return Err(Error::config("threads", "must be positive")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()).in_stage("setup"))?;

    let mut rec = Recorder {
        out: opts.out.clone(),
        stages: Vec::new(),
        files: Vec::new(),
    };
    pool.install(|| execute(pipeline, config, &spec, seed, &mut rec))?;

    let mut versions = BTreeMap::new();
    versions.insert("rmfg".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("manifest_format".to_string(), MANIFEST_FORMAT.to_string());
    let mut echo = config.clone();
    echo.seed = Some(seed);
    echo.pipeline = Some(pipeline);
    let manifest = RunManifest {
        pipeline: pipeline.name().to_string(),
        seed,
        threads,
        config: echo,
        versions,
        stages: rec.stages,
        files: rec.files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&opts.out.join(MANIFEST_NAME), json.as_bytes()).map_err(|e| Error::Io(e).in_stage("manifest"))?;
    Ok(manifest)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join(MANIFEST_NAME)
}

fn lq_only(spec: &GameSpec, pipeline: Pipeline) -> Result<()> {
    if spec.lq().is_none() {
        return Err(Error::config(
            "spec.catalog",
            format!("pipeline `{pipeline}` needs an LQ family, got `{}`", spec.name),
        ));
    }
    Ok(())
}

fn riccati(spec: &GameSpec, config: &ExperimentConfig) -> Result<RiccatiSolution> {
    let lq = spec.lq().expect("caller checked LQ");
    solve_riccati(lq, &spec.generator, &uniform_grid(spec.horizon, config.budget.riccati_steps))
}

fn summary_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("quantity,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

/// The limiting strategy: the Riccati feedback for LQ families, otherwise a
/// particle FBSDE solve.
enum Limit {
    Riccati(RiccatiSolution),
    Field(Box<FbsdeSolution>),
}

impl Limit {
    fn strategy(&self) -> Strategy<'_> {
        match self {
            Limit::Riccati(sol) => Strategy::Riccati(sol),
            Limit::Field(sol) => Strategy::Field {
                field: &sol.field,
                ensemble: Some(&sol.ensemble),
            },
        }
    }
}

/// Solves for the limiting strategy and records it next to the run's outputs.
fn limit_strategy(spec: &GameSpec, config: &ExperimentConfig, seeds: &SeedTree, rec: &mut Recorder) -> Result<Limit> {
    if spec.lq().is_some() {
        let sol = rec.stage("riccati", || riccati(spec, config))?;
        rec.write("riccati.csv", &sol.to_csv())?;
        Ok(Limit::Riccati(sol))
    } else {
        let budget = config.budget.fbsde.budget();
        let sol = rec.stage("fbsde", || fbsde::solve(spec, &budget, &seeds.child("fbsde")))?;
        rec.write("field.txt", &sol.field.to_text())?;
        Ok(Limit::Field(Box::new(sol)))
    }
}

fn execute(pipeline: Pipeline, config: &ExperimentConfig, spec: &GameSpec, seed: u64, rec: &mut Recorder) -> Result<()> {
    let seeds = SeedTree::new(seed, "rmfg");
    let b = &config.budget;
    match pipeline {
        Pipeline::Validate => {
            let report = rec.stage("validate", || {
                let mut rng = seeds.child("validate").stream(0);
                Ok(validate_spec(spec, b.validation_samples, &mut rng))
            })?;
            rec.write("validation.csv", &report.to_csv())?;
            let failed: Vec<&str> = report
                .checks
                .iter()
                .filter(|c| c.status == CheckStatus::Fail)
                .map(|c| c.name)
                .collect();
            if !failed.is_empty() {
                return Err(Error::invalid("spec", format!("failed checks: {}", failed.join(", "))).in_stage("validate"));
            }
        }
        Pipeline::SolveLq => {
            lq_only(spec, pipeline)?;
            let sol = rec.stage("riccati", || riccati(spec, config))?;
            rec.write("riccati.csv", &sol.to_csv())?;
            rec.write(
                "riccati_summary.csv",
                &summary_csv(&[
                    ("residual", fmt_f64(riccati_residual(&sol))),
                    ("max_local_error", fmt_f64(sol.max_local_error)),
                    ("rk4_steps", sol.steps.to_string()),
                ]),
            )?;
        }
        Pipeline::SolveFbsde => {
            let budget = b.fbsde.budget();
            let sol = rec.stage("fbsde", || fbsde::solve(spec, &budget, &seeds.child("fbsde")))?;
            rec.write("field.txt", &sol.field.to_text())?;
            rec.write("picard.csv", &sol.report.to_csv())?;
            rec.write(
                "fbsde_summary.csv",
                &summary_csv(&[
                    ("converged", sol.report.converged.to_string()),
                    ("iterations", sol.report.iterations.len().to_string()),
                    ("bsde_residual", fmt_f64(fbsde::bsde_residual(&sol.ensemble, spec, &sol.field))),
                    ("lipschitz", fmt_f64(sol.field.lipschitz)),
                ]),
            )?;
        }
        Pipeline::SolvePde => {
            let game = spec.clone().with_interaction(pde_interaction(b.pde.players));
            let grid = b.pde.grid();
            let values = rec.stage("pde", || solve_nash_system(&game, &grid))?;
            let (residual, fb) = rec.stage("pde-diagnostics", || {
                Ok((pde_residual(&values, &game, 2000)?, feedback_from_values(&values, &game)?))
            })?;
            rec.write("values.csv", &values.to_csv())?;
            rec.write(
                "pde_summary.csv",
                &summary_csv(&[
                    ("residual", fmt_f64(residual)),
                    ("halvings", values.halvings.to_string()),
                    ("max_inner_used", values.max_inner_used.to_string()),
                    ("gradient_bound", fmt_f64(fb.gradient_bound)),
                    ("alpha_bound", fmt_f64(fb.alpha_bound)),
                    ("growth_constant", fmt_f64(fb.growth_constant)),
                ]),
            )?;
        }
        Pipeline::Simulate => {
            let limit = limit_strategy(spec, config, &seeds, rec)?;
            let s = &b.simulate;
            let runs = rec.stage("simulate", || {
                simulate(spec, limit.strategy(), &SimConfig::new(s.players, s.reps, s.steps), &seeds.child("simulate"))
            })?;
            let cost = rec.stage("cost", || estimate_cost(spec, &runs, 0))?;
            rec.write("simulation.csv", &runs_to_csv(&runs))?;
            rec.write(
                "cost.csv",
                &format!(
                    "player,mean,stderr,reps,dt\n0,{},{},{},{}\n",
                    fmt_f64(cost.mean),
                    fmt_f64(cost.stderr),
                    cost.reps,
                    fmt_f64(cost.dt)
                ),
            )?;
        }
        Pipeline::Chaos => {
            let limit = limit_strategy(spec, config, &seeds, rec)?;
            let c = &b.chaos;
            let table = rec.stage("chaos", || {
                crate::analysis::chaos_sweep(spec, limit.strategy(), &c.players, c.budget(), seed)
            })?;
            rec.write("chaos.csv", &table.to_csv())?;
        }
        Pipeline::NashGap => {
            let limit = limit_strategy(spec, config, &seeds, rec)?;
            let g = &b.gap;
            let mut sweep = vec![Population::Limit];
            sweep.extend(g.players.iter().map(|&n| Population::Players(n)));
            let report = rec.stage("nash-gap", || {
                nash_gap(
                    spec,
                    limit.strategy(),
                    &sweep,
                    &Deviation::default_family(spec),
                    GapBudget {
                        reps: g.reps,
                        steps: g.steps,
                    },
                    &seeds.child("nash-gap"),
                )
            })?;
            rec.write("nash_gap.csv", &report.to_csv())?;
            rec.write("nash_gap_arms.csv", &report.arms_csv())?;
        }
        Pipeline::FullLqAcceptance => {
            lq_only(spec, pipeline)?;
            if spec.dim_state() != 1 {
                return Err(Error::config("spec.x0", "full-lq-acceptance needs d = 1"));
            }
            let reports = full_acceptance(config, spec, seed, rec)?;
            for r in &reports {
                for (name, contents) in &r.artifacts {
                    rec.write(name, contents)?;
                }
            }
            rec.write("acceptance.csv", &reports_to_csv(&reports))?;
        }
    }
    Ok(())
}

/// Stage name under which criterion `id` is timed.
pub fn criterion_stage(id: u8) -> String {
    format!("criterion-{id}")
}

fn full_acceptance(config: &ExperimentConfig, spec: &GameSpec, seed: u64, rec: &mut Recorder) -> Result<Vec<CriterionReport>> {
    let b = &config.budget;
    let seeds = SeedTree::new(seed, "acceptance");
    let generator = config.spec.generator()?;
    let fbsde_budget = b.fbsde.budget();
    let pde_grid = b.pde.grid();
    let gap_budget = GapBudget {
        reps: b.gap.reps,
        steps: b.gap.steps,
    };
    Ok(vec![
        rec.stage(&criterion_stage(1), || {
            acceptance::hamiltonian_suite(&generator, b.suite.hamiltonian_points, &seeds.child("hamiltonian"))
        })?,
        rec.stage(&criterion_stage(2), || acceptance::regime_chain_suite(b.suite.chain_paths, &seeds.child("regime-chain")))?,
        rec.stage(&criterion_stage(3), || acceptance::lq_cross_oracle(&fbsde_budget, &seeds.child("cross-oracle")))?,
        rec.stage(&criterion_stage(4), || acceptance::nash_pde_suite(&pde_grid))?,
        rec.stage(&criterion_stage(5), || {
            acceptance::chaos_criterion(spec, b.riccati_steps, &b.chaos.players, b.chaos.budget(), seed)
        })?,
        rec.stage(&criterion_stage(6), || {
            acceptance::gap_criterion(spec, b.riccati_steps, &b.gap.players, gap_budget, &seeds.child("nash-gap"))
        })?,
        rec.stage(&criterion_stage(8), || acceptance::metric_oracle(b.suite.w2_instances, &seeds.child("metric")))?,
    ])
}
