use nalgebra::DVector;
use rmfg::game_model::catalog::FreeMotion;
use rmfg::game_model::{build_lq_spec, catalog, GameSpec, Interaction, LqParams, LqRegime};
use rmfg::lq_oracle::{mean_flow_lq, solve_riccati, uniform_grid};
use rmfg::nash_pde::{feedback_from_values, pde_residual, solve_nash_system, PdeGrid, ValueGrid};
use rmfg::regime_chain::{GeneratorMatrix, RegimePath};
use rmfg::Error;

fn one_player(spec: GameSpec) -> GameSpec {
    spec.with_interaction(Interaction::General { players: 1 })
}

fn two_players(spec: GameSpec) -> GameSpec {
    spec.with_interaction(Interaction::General { players: 2 })
}

fn two_regimes() -> GeneratorMatrix {
    GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap()
}

/// Single regime with a time-varying Riccati gain.
fn moving_lq() -> GameSpec {
    let p = LqParams::new(vec![LqRegime::scalar(2.0, 1.0, 0.5, -0.3, 1.0, 0.8)], false).unwrap();
    one_player(build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap())
}

fn free(running: f64, terminal: f64, terminal_weight: f64) -> GameSpec {
    let spec = FreeMotion {
        dim: 1,
        sigma: 1.0,
        running,
        control_weight: 1.0,
        terminal,
        terminal_weight,
    }
    .spec(GeneratorMatrix::trivial(), 1.0, DVector::zeros(1))
    .unwrap();
    one_player(spec)
}

fn small() -> PdeGrid {
    PdeGrid {
        n_x: 81,
        n_t: 80,
        ..PdeGrid::default()
    }
}

fn inner(values: &ValueGrid) -> impl Iterator<Item = (usize, f64)> + '_ {
    let (lo, hi) = (values.x[0], values.x[values.n_x() - 1]);
    let half = 0.25 * (hi - lo);
    let c = 0.5 * (lo + hi);
    values.x.iter().copied().enumerate().filter(move |(_, x)| (x - c).abs() <= half)
}

#[test]
fn one_player_value_matches_riccati() {
    let spec = moving_lq();
    let values = solve_nash_system(&spec, &PdeGrid::default()).unwrap();
    let ric = solve_riccati(spec.lq().unwrap(), &spec.generator, &uniform_grid(1.0, 4000)).unwrap();
    let k0 = ric.coefficients_at(0.0, 0).unwrap().0[(0, 0)];
    let c0 = mean_flow_lq(&ric, &RegimePath::constant(0, 1.0), &DVector::zeros(1)).unwrap().expected_cost;
    let s0 = values.snapshot(0).unwrap();
    for (j, x) in inner(&values) {
        let v = values.slice(s0, 0, 0)[j];
        assert!((v - 0.5 * k0 * x * x - c0).abs() <= 1e-2, "x {x}: {v}");
    }
    let fb = feedback_from_values(&values, &spec).unwrap();
    for (j, x) in inner(&values) {
        assert!((fb.get(0, 0, 0, j, values.nodes()) + k0 * x).abs() <= 2e-2, "x {x}");
    }
}

#[test]
fn terminal_condition_is_exact() {
    let spec = moving_lq();
    let values = solve_nash_system(&spec, &small()).unwrap();
    let last = values.snapshot(values.t.len() - 1).unwrap();
    for (j, &x) in values.x.iter().enumerate() {
        assert_eq!(values.slice(last, 0, 0)[j], 0.5 * (0.5 * x * x));
    }
    assert!(values.all_finite());
}

#[test]
fn no_driver_keeps_the_constant() {
    let spec = free(0.0, 1.25, 0.0);
    let values = solve_nash_system(&spec, &small()).unwrap();
    for s in 0..values.stored.len() {
        assert!(values.slice(s, 0, 0).iter().all(|&v| (v - 1.25).abs() <= 1e-12));
    }
    let fb = feedback_from_values(&values, &spec).unwrap();
    assert_eq!(fb.alpha_bound, 0.0);
}

#[test]
fn shifting_g_shifts_v() {
    let a = solve_nash_system(&free(0.2, 0.0, 1.0), &small()).unwrap();
    let b = solve_nash_system(&free(0.2, 0.7, 1.0), &small()).unwrap();
    for s in 0..a.stored.len() {
        for (x, y) in a.slice(s, 0, 0).iter().zip(b.slice(s, 0, 0)) {
            assert!((y - x - 0.7).abs() <= 1e-9);
        }
    }
}

#[test]
fn identical_regimes_give_identical_values() {
    let p = LqParams::new(vec![LqRegime::scalar(2.0, 1.0, 0.5, -0.3, 1.0, 0.8); 2], false).unwrap();
    let spec = one_player(build_lq_spec(p, two_regimes(), 1.0, DVector::zeros(1), 0).unwrap());
    let values = solve_nash_system(&spec, &small()).unwrap();
    for s in 0..values.stored.len() {
        for (x, y) in values.slice(s, 0, 0).iter().zip(values.slice(s, 0, 1)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn players_are_exchangeable() {
    let spec = two_players(catalog::build("lq-mean-drift", GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap());
    let grid = PdeGrid {
        n_x: 41,
        n_t: 40,
        ..PdeGrid::default()
    };
    let values = solve_nash_system(&spec, &grid).unwrap();
    let fb = feedback_from_values(&values, &spec).unwrap();
    let n = values.n_x();
    let nodes = values.nodes();
    for s in 0..values.stored.len() {
        for a in 0..n {
            for b in 0..n {
                let (ab, ba) = (a + n * b, b + n * a);
                assert!((values.slice(s, 0, 0)[ab] - values.slice(s, 1, 0)[ba]).abs() <= 1e-10);
                assert!((fb.get(s, 0, 0, ab, nodes) - fb.get(s, 1, 0, ba, nodes)).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn injected_stationary_solution_has_no_residual() {
    // K = 1: v = x^2/2 + (1 - t)/2 solves the one-player equation exactly.
    let p = LqParams::new(vec![LqRegime::scalar(1.0, 1.0, 1.0, 0.0, 1.0, 1.0)], false).unwrap();
    let spec = one_player(build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap());
    let x: Vec<f64> = (0..201).map(|j| -6.0 + 0.06 * j as f64).collect();
    let t: Vec<f64> = (0..=400).map(|n| n as f64 / 400.0).collect();
    let values = ValueGrid::from_fn(1, 1, x, t, |t, x, _, _| 0.5 * x[0] * x[0] + 0.5 * (1.0 - t));
    assert!(pde_residual(&values, &spec, 5000).unwrap() <= 1e-6);
}

#[test]
fn zero_costs_have_zero_residual() {
    let spec = free(0.0, 0.0, 0.0);
    let values = solve_nash_system(&spec, &small()).unwrap();
    assert_eq!(pde_residual(&values, &spec, 500).unwrap(), 0.0);
}

#[test]
fn residual_falls_under_refinement() {
    let spec = one_player(catalog::build("lq", two_regimes(), 1.0, DVector::zeros(1), 0).unwrap());
    let coarse = PdeGrid {
        n_x: 101,
        n_t: 200,
        ..PdeGrid::default()
    };
    let r1 = pde_residual(&solve_nash_system(&spec, &coarse).unwrap(), &spec, 2000).unwrap();
    let r2 = pde_residual(&solve_nash_system(&spec, &PdeGrid::default()).unwrap(), &spec, 2000).unwrap();
    assert!(r1 / r2 >= 1.7, "{r1} / {r2}");
}

#[test]
fn gradients_and_values_stay_bounded() {
    let spec = one_player(catalog::build("lq", two_regimes(), 1.0, DVector::zeros(1), 0).unwrap());
    let coarse = solve_nash_system(&spec, &PdeGrid { n_x: 101, n_t: 200, ..PdeGrid::default() }).unwrap();
    let fine = solve_nash_system(&spec, &PdeGrid::default()).unwrap();
    let (g1, g2) = (coarse.max_inner_gradient(0), fine.max_inner_gradient(0));
    assert!((g1 - g2).abs() <= 0.1 * g2, "{g1} vs {g2}");

    let max_v = fine.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_v <= fine.terminal_bound + spec.horizon * fine.running_bound);

    let fb = feedback_from_values(&fine, &spec).unwrap();
    assert!(fb.alpha_bound <= fb.growth_constant * (1.0 + fb.gradient_bound));
}

#[test]
fn steep_drift_halves_the_step() {
    let p = LqParams::new(vec![LqRegime::scalar(1.0, 1.0, 1.0, 20.0, 1.0, 1.0)], false).unwrap();
    let spec = one_player(build_lq_spec(p, GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap());
    let grid = PdeGrid {
        n_x: 61,
        n_t: 20,
        ..PdeGrid::default()
    };
    let values = solve_nash_system(&spec, &grid).unwrap();
    assert!(values.halvings > 0);
    assert_eq!(values.t.len(), (20 << values.halvings) + 1);
    let strict = PdeGrid {
        max_halvings: 0,
        ..grid
    };
    assert!(matches!(solve_nash_system(&spec, &strict), Err(Error::CflViolation { .. })));
}

#[test]
fn rejects_three_players() {
    let spec = catalog::build("lq", GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0)
        .unwrap()
        .with_interaction(Interaction::General { players: 3 });
    assert!(solve_nash_system(&spec, &small()).is_err());
}

#[test]
fn csv_layout() {
    let spec = two_players(catalog::build("lq", GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0).unwrap());
    let grid = PdeGrid {
        n_x: 5,
        n_t: 4,
        keep_every: Some(4),
        ..PdeGrid::default()
    };
    let values = solve_nash_system(&spec, &grid).unwrap();
    let csv = values.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x_0,x_1,regime,player,value"));
    assert_eq!(lines.count(), values.stored.len() * 2 * 25);
}
