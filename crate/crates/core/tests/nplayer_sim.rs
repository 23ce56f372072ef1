use nalgebra::DVector;
use rmfg::analysis::mean_stderr;
use rmfg::fbsde::DecouplingField;
use rmfg::game_model::catalog::{self, FreeMotion};
use rmfg::game_model::GameSpec;
use rmfg::lq_oracle::{mean_flow_lq, solve_riccati, uniform_grid, RiccatiSolution};
use rmfg::nplayer_sim::{
    best_response_lq, estimate_cost, nash_gap, player_cost, simulate, Coupling, Deviation, GapBudget, Population,
    SimConfig, Strategy,
};
use rmfg::regime_chain::{GeneratorMatrix, RegimePath};
use rmfg::rng::SeedTree;

fn two_regimes() -> GeneratorMatrix {
    GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap()
}

fn mean_drift_game() -> (GameSpec, RiccatiSolution) {
    let spec = catalog::build("lq-mean-drift", two_regimes(), 1.0, DVector::from_element(1, 1.0), 0).unwrap();
    let sol = solve_riccati(spec.lq().unwrap(), &spec.generator, &uniform_grid(1.0, 400)).unwrap();
    (spec, sol)
}

fn free(running: f64, terminal_weight: f64, generator: GeneratorMatrix, horizon: f64) -> GameSpec {
    FreeMotion {
        dim: 1,
        sigma: 1.0,
        running,
        control_weight: 1.0,
        terminal: 0.0,
        terminal_weight,
    }
    .spec(generator, horizon, DVector::zeros(1))
    .unwrap()
}

fn zero_field(horizon: f64, regimes: usize) -> DecouplingField {
    DecouplingField::zeros(uniform_grid(horizon, 8), 1, regimes, 1, 0)
}

#[test]
fn best_response_in_the_limit_is_the_equilibrium_feedback() {
    let (_, sol) = mean_drift_game();
    let times = uniform_grid(1.0, 16);
    let br = best_response_lq(&sol, None, &times).unwrap();
    for (n, &t) in times.iter().enumerate() {
        for i in 0..2 {
            let (k, l, kk) = sol.coefficients_at(t, i).unwrap();
            let v = &br.value[n][i];
            // z = (x, m, 1): the x-row of the value matrix is (K, L, k).
            assert!((v[(0, 0)] - k[(0, 0)]).abs() < 1e-6, "K at t {t}");
            assert!((v[(0, 1)] - l[(0, 0)]).abs() < 1e-6, "L at t {t}");
            assert!((v[(0, 2)] - kk[0]).abs() < 1e-6, "k at t {t}");
        }
    }
}

#[test]
fn best_response_tends_to_the_limit_as_n_grows() {
    let (_, sol) = mean_drift_game();
    let times = uniform_grid(1.0, 4);
    let lim = best_response_lq(&sol, None, &times).unwrap();
    let big = best_response_lq(&sol, Some(1_000_000), &times).unwrap();
    let small = best_response_lq(&sol, Some(4), &times).unwrap();
    for i in 0..2 {
        // Own-state gain and mean gain; with z = (x, y, m, 1) the mean enters
        // through y and m together.
        let (gl, gb, gs) = (&lim.gain[0][i], &big.gain[0][i], &small.gain[0][i]);
        assert!((gl[(0, 0)] - gb[(0, 0)]).abs() < 1e-4);
        assert!((gl[(0, 1)] - gb[(0, 1)] - gb[(0, 2)]).abs() < 1e-4);
        assert!((gl[(0, 0)] - gs[(0, 0)]).abs() > 1e-3);
    }
}

#[test]
fn zero_costs_give_zero_estimates() {
    let spec = free(0.0, 0.0, two_regimes(), 1.0);
    let field = zero_field(1.0, 2);
    let strategy = Strategy::Field { field: &field, ensemble: None };
    let runs = simulate(&spec, strategy, &SimConfig::new(4, 30, 16), &SeedTree::new(1, "sim")).unwrap();
    let est = estimate_cost(&spec, &runs, 2).unwrap();
    assert_eq!(est.mean, 0.0);
    assert_eq!(est.stderr, 0.0);
}

#[test]
fn constant_running_cost_integrates_exactly() {
    let spec = free(1.0, 0.0, GeneratorMatrix::trivial(), 2.0);
    let field = zero_field(2.0, 1);
    let runs = simulate(
        &spec,
        Strategy::Field { field: &field, ensemble: None },
        &SimConfig::new(3, 30, 64),
        &SeedTree::new(2, "sim"),
    )
    .unwrap();
    let est = estimate_cost(&spec, &runs, 0).unwrap();
    assert_eq!(est.mean, 2.0);
}

#[test]
fn terminal_square_matches_brownian_second_moment() {
    // g = |x|^2 (weight 2 in |x|^2/2), no control: E|W_1|^2 = 1.
    let spec = free(0.0, 2.0, GeneratorMatrix::trivial(), 1.0);
    let field = zero_field(1.0, 1);
    let runs = simulate(
        &spec,
        Strategy::Field { field: &field, ensemble: None },
        &SimConfig::new(2, 4000, 8),
        &SeedTree::new(3, "sim"),
    )
    .unwrap();
    let est = estimate_cost(&spec, &runs, 1).unwrap();
    assert!((est.mean - 1.0).abs() <= 3.0 * est.stderr, "{} +- {}", est.mean, est.stderr);
}

#[test]
fn limit_mode_cost_matches_the_oracle_value() {
    let (spec, sol) = mean_drift_game();
    let cfg = SimConfig {
        coupling: Coupling::Limit,
        ..SimConfig::new(1, 2000, 128)
    };
    let runs = simulate(&spec, Strategy::Riccati(&sol), &cfg, &SeedTree::new(4, "sim")).unwrap();
    // Per-replication oracle cost along the same regime path.
    let diffs: Vec<f64> = runs
        .iter()
        .map(|r| player_cost(&spec, r, 0) - mean_flow_lq(&sol, &r.path, &spec.initial_state).unwrap().expected_cost)
        .collect();
    let (m, se) = mean_stderr(&diffs);
    // O(dt) Euler bias allowance on top of 3 stderr.
    assert!(m.abs() <= 3.0 * se + 2.0 / 128.0, "{m} +- {se}");
}

#[test]
fn empirical_mean_tracks_the_oracle_mean_flow() {
    let (spec, sol) = mean_drift_game();
    let runs = simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(64, 300, 256), &SeedTree::new(5, "sim")).unwrap();
    for node in [64, 128, 256] {
        let diffs: Vec<f64> = runs.iter().map(|r| r.law_mean[node][0] - r.limit_mean[node][0]).collect();
        let (m, se) = mean_stderr(&diffs);
        assert!(m.abs() <= 3.0 * se, "node {node}: {m} +- {se}");
    }
}

#[test]
fn empirical_measure_has_n_atoms() {
    let (spec, sol) = mean_drift_game();
    let runs = simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(5, 2, 8), &SeedTree::new(6, "sim")).unwrap();
    for r in &runs {
        for n in 0..=8 {
            let mu = r.empirical(n);
            assert_eq!(mu.atoms(), Some(5));
            assert!((mu.mean()[0] - r.law_mean[n][0]).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_streams_permutes_trajectories_exactly() {
    let (spec, sol) = mean_drift_game();
    let seeds = SeedTree::new(7, "sim");
    let order = vec![2, 0, 3, 1];
    let plain = simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(4, 3, 32), &seeds).unwrap();
    let permuted = simulate(
        &spec,
        Strategy::Riccati(&sol),
        &SimConfig {
            stream_order: Some(order.clone()),
            ..SimConfig::new(4, 3, 32)
        },
        &seeds,
    )
    .unwrap();
    for (a, b) in plain.iter().zip(&permuted) {
        assert_eq!(a.path, b.path);
        for n in 0..=32 {
            for (k, &src) in order.iter().enumerate() {
                assert_eq!(b.x(n, k), a.x(n, src));
            }
        }
    }
}

#[test]
fn exchangeable_players_have_matching_marginals() {
    let (spec, sol) = mean_drift_game();
    let runs = simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(2, 2000, 32), &SeedTree::new(8, "sim")).unwrap();
    let mut a: Vec<f64> = runs.iter().map(|r| r.x(32, 0)[0]).collect();
    let mut b: Vec<f64> = runs.iter().map(|r| r.x(32, 1)[0]).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // Two-sample Kolmogorov-Smirnov statistic against its 1% critical value.
    let mut ks: f64 = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        ks = ks.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    let crit = 1.63 * (2.0 / a.len() as f64).sqrt();
    assert!(ks < crit, "KS {ks} vs {crit}");
}

#[test]
fn identity_deviation_has_exactly_zero_gap() {
    let (spec, sol) = mean_drift_game();
    let report = nash_gap(
        &spec,
        Strategy::Riccati(&sol),
        &[Population::Players(4), Population::Limit],
        &[Deviation::Identity],
        GapBudget { reps: 30, steps: 16 },
        &SeedTree::new(9, "gap"),
    )
    .unwrap();
    for row in &report.rows {
        assert_eq!(row.gap, 0.0);
        assert_eq!(row.gap_stderr, 0.0);
    }
}

#[test]
fn limit_mode_gap_is_within_noise_for_every_arm() {
    let (spec, sol) = mean_drift_game();
    let report = nash_gap(
        &spec,
        Strategy::Riccati(&sol),
        &[Population::Limit],
        &Deviation::default_family(&spec),
        GapBudget { reps: 400, steps: 64 },
        &SeedTree::new(10, "gap"),
    )
    .unwrap();
    for arm in &report.rows[0].arms {
        assert!(arm.difference <= 2.0 * arm.stderr, "{}: {} vs {}", arm.arm, arm.difference, arm.stderr);
    }
}

#[test]
fn second_moments_and_control_energy_stay_bounded_over_n() {
    let (spec, sol) = mean_drift_game();
    let report = nash_gap(
        &spec,
        Strategy::Riccati(&sol),
        &[Population::Players(8), Population::Players(16), Population::Players(32)],
        &[Deviation::Identity],
        GapBudget { reps: 100, steps: 32 },
        &SeedTree::new(11, "gap"),
    )
    .unwrap();
    let base = &report.rows[0];
    for row in &report.rows {
        assert!(row.second_moment_sup <= 10.0 * base.second_moment_sup);
        assert!(row.control_energy.is_finite());
        assert!((row.control_energy - base.control_energy).abs() <= 0.5 * base.control_energy);
    }
}

#[test]
fn empty_family_and_small_n_are_rejected() {
    let (spec, sol) = mean_drift_game();
    let seeds = SeedTree::new(12, "gap");
    let budget = GapBudget { reps: 30, steps: 8 };
    assert!(nash_gap(&spec, Strategy::Riccati(&sol), &[Population::Players(8)], &[], budget, &seeds).is_err());
    assert!(nash_gap(&spec, Strategy::Riccati(&sol), &[Population::Players(1)], &[Deviation::Identity], budget, &seeds).is_err());
    assert!(simulate(&spec, Strategy::Riccati(&sol), &SimConfig::new(1, 3, 8), &seeds).is_err());
}

#[test]
fn field_strategy_reproduces_riccati_controls() {
    // A single-regime field that is exactly K x with K = 1.
    let spec = catalog::build("lq", GeneratorMatrix::trivial(), 1.0, DVector::from_element(1, 0.5), 0).unwrap();
    let sol = solve_riccati(spec.lq().unwrap(), &spec.generator, &uniform_grid(1.0, 200)).unwrap();
    let mut field = DecouplingField::zeros(uniform_grid(1.0, 4), 1, 1, 1, 0);
    for fits in &mut field.fits {
        fits[0].exponents = vec![1, 0];
        fits[0].coef = vec![1.0];
    }
    field.x_min = vec![-1.0];
    field.x_max = vec![1.0];
    let seeds = SeedTree::new(13, "sim");
    let cfg = SimConfig::new(8, 5, 16);
    let a = simulate(&spec, Strategy::Riccati(&sol), &cfg, &seeds).unwrap();
    let b = simulate(&spec, Strategy::Field { field: &field, ensemble: None }, &cfg, &seeds).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (xa, xb) in ra.x.iter().zip(&rb.x) {
            assert!((xa - xb).abs() < 1e-9);
        }
    }
    // Linear extrapolation outside [-1, 1] keeps the field exact.
    assert!(b.iter().map(|r| r.domain_exits).sum::<usize>() > 0);
    let _ = RegimePath::constant(0, 1.0);
}
