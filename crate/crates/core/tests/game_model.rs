use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rmfg::game_model::catalog::{self, CATALOG};
use rmfg::game_model::{build_lq_spec, validate_spec, CheckStatus, GameSpec, LqParams, LqRegime};
use rmfg::measure::MeasureArg;
use rmfg::regime_chain::GeneratorMatrix;
use rmfg::rng::SeedTree;
use rmfg::Error;

fn two_state() -> GeneratorMatrix {
    GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap()
}

/// `d = m = 2`, mean coupling in cost and drift, terminal coupling on.
fn planar_mean_field() -> GameSpec {
    let regime = |k: f64| LqRegime {
        state_cost: DMatrix::from_row_slice(2, 2, &[1.0 + k, 0.2, 0.2, 1.5]),
        control_cost: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        mean_coupling: 0.4,
        terminal_cost: DMatrix::from_row_slice(2, 2, &[1.0, -0.1, -0.1, 0.7]),
        drift_state: DMatrix::from_row_slice(2, 2, &[-0.2, 0.1, 0.0, -0.3]),
        drift_control: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]),
        mean_drift: DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]),
        drift_const: DVector::from_vec(vec![0.1, -0.05]),
        diffusion: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.8 - 0.1 * k]),
    };
    let params = LqParams::new(vec![regime(0.0), regime(1.0)], true).unwrap();
    build_lq_spec(params, two_state(), 1.0, DVector::zeros(2), 0).unwrap()
}

fn specs() -> Vec<GameSpec> {
    let mut v: Vec<GameSpec> = CATALOG
        .iter()
        .map(|n| catalog::build(n, two_state(), 1.0, DVector::zeros(1), 0).unwrap())
        .collect();
    v.push(planar_mean_field());
    v
}

fn unit_lq(control_cost: f64, mean_coupling: f64) -> GameSpec {
    let r = LqRegime::scalar(1.0, control_cost, 1.0, 0.0, 1.0, 1.0).with_mean_coupling(mean_coupling);
    build_lq_spec(LqParams::new(vec![r], false).unwrap(), GeneratorMatrix::trivial(), 1.0, DVector::zeros(1), 0)
        .unwrap()
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[test]
fn evaluation_examples() {
    let unit = unit_lq(1.0, 0.0);
    let b = unit.eval_coefficients(0.0, &v1(0.0), &MeasureArg::dirac(&v1(0.0)), &v1(0.0), 0).unwrap();
    assert_eq!((b.drift[0], b.running_cost), (0.0, 0.0));

    let a = unit.eval_coefficients(0.0, &v1(0.0), &MeasureArg::dirac(&v1(0.0)), &v1(1.0), 0).unwrap();
    assert_eq!(a.running_cost, 0.5);

    let coupled = unit_lq(1.0, 1.0);
    let c = coupled.eval_coefficients(0.0, &v1(1.0), &MeasureArg::dirac(&v1(1.0)), &v1(0.0), 0).unwrap();
    assert_eq!(c.running_cost, 0.0);
}

#[test]
fn evaluation_rejects_bad_regime_and_time() {
    let unit = unit_lq(1.0, 0.0);
    let mu = MeasureArg::dirac(&v1(0.0));
    assert!(matches!(
        unit.eval_coefficients(0.0, &v1(0.0), &mu, &v1(0.0), 1),
        Err(Error::RegimeOutOfRange { regime: 1, states: 1 })
    ));
    assert!(matches!(
        unit.eval_coefficients(1.5, &v1(0.0), &mu, &v1(0.0), 0),
        Err(Error::TimeOutOfRange { .. })
    ));
}

#[test]
fn identical_regimes_evaluate_identically() {
    let r = LqRegime::scalar(1.3, 0.7, 2.0, -0.4, 1.2, 0.9);
    let spec =
        build_lq_spec(LqParams::new(vec![r.clone(), r], false).unwrap(), two_state(), 1.0, DVector::zeros(1), 0)
            .unwrap();
    let mu = MeasureArg::dirac(&v1(0.4));
    for k in 0..20 {
        let x = v1(k as f64 * 0.3 - 3.0);
        let a = v1(1.0 - k as f64 * 0.1);
        assert_eq!(
            spec.eval_coefficients(0.5, &x, &mu, &a, 0).unwrap(),
            spec.eval_coefficients(0.5, &x, &mu, &a, 1).unwrap()
        );
    }
}

#[test]
fn catalog_entries_pass_validation() {
    let mut all = specs();
    all.push(unit_lq(1.0, 0.0));
    for spec in &all {
        let mut rng = SeedTree::new(8, "validate").child(&spec.name).stream(0);
        let report = validate_spec(spec, 2000, &mut rng);
        for c in &report.checks {
            assert_ne!(c.status, CheckStatus::Fail, "{}: {c:?}", spec.name);
        }
    }
    let mut rng = SeedTree::new(8, "unit").stream(0);
    let unit = validate_spec(&unit_lq(1.0, 0.0), 10_000, &mut rng);
    assert!(unit.convexity_modulus >= 0.99, "{}", unit.convexity_modulus);
}

#[test]
fn unknown_catalog_names_are_config_errors() {
    let err = catalog::build("lq-typo", two_state(), 1.0, DVector::zeros(1), 0).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}

fn point(d: usize, xs: &[f64]) -> DVector<f64> {
    DVector::from_iterator(d, xs.iter().copied().cycle().take(d))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn analytic_gradients_match_central_differences(
        which in 0usize..4,
        t in 0.0..1.0f64,
        xs in proptest::collection::vec(-3.0..3.0f64, 2),
        alphas in proptest::collection::vec(-3.0..3.0f64, 2),
        mean in -3.0..3.0f64,
        regime in 0usize..2,
    ) {
        let spec = &specs()[which];
        let (d, m) = (spec.dim_state(), spec.dim_control());
        let x = point(d, &xs);
        let a = point(m, &alphas);
        let mu = MeasureArg::Moments { mean: DVector::from_element(d, mean), second_moment: d as f64 * (mean * mean + 1.0) };
        let c = &spec.coefficients;
        let h = 1e-5;
        let gx = c.running_cost_grad_x(t, &x, &mu, &a, regime);
        let ga = c.running_cost_grad_alpha(t, &x, &mu, &a, regime);
        let gg = c.terminal_cost_grad_x(&x, &mu, regime);
        for k in 0..d {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (c.running_cost(t, &up, &mu, &a, regime) - c.running_cost(t, &dn, &mu, &a, regime)) / (2.0 * h);
            prop_assert!(rel_err(gx[k], fd) <= 1e-6, "{} grad_x f[{k}]: {} vs {fd}", spec.name, gx[k]);
            let fd = (c.terminal_cost(&up, &mu, regime) - c.terminal_cost(&dn, &mu, regime)) / (2.0 * h);
            prop_assert!(rel_err(gg[k], fd) <= 1e-6, "{} grad_x g[{k}]: {} vs {fd}", spec.name, gg[k]);
        }
        for k in 0..m {
            let (mut up, mut dn) = (a.clone(), a.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (c.running_cost(t, &x, &mu, &up, regime) - c.running_cost(t, &x, &mu, &dn, regime)) / (2.0 * h);
            prop_assert!(rel_err(ga[k], fd) <= 1e-6, "{} grad_a f[{k}]: {} vs {fd}", spec.name, ga[k]);
        }
    }

    #[test]
    fn drift_is_affine_in_the_control(
        which in 0usize..4,
        xs in proptest::collection::vec(-3.0..3.0f64, 2),
        a1 in proptest::collection::vec(-3.0..3.0f64, 2),
        a2 in proptest::collection::vec(-3.0..3.0f64, 2),
        regime in 0usize..2,
    ) {
        let spec = &specs()[which];
        let (d, m) = (spec.dim_state(), spec.dim_control());
        let x = point(d, &xs);
        let (p, q) = (point(m, &a1), point(m, &a2));
        let mid = (&p + &q) * 0.5;
        let mu = MeasureArg::dirac(&point(d, &[0.3]));
        let second = spec.drift(0.2, &x, &mu, &p, regime) + spec.drift(0.2, &x, &mu, &q, regime)
            - spec.drift(0.2, &x, &mu, &mid, regime) * 2.0;
        prop_assert!(second.amax() <= 1e-14);
    }

    #[test]
    fn lq_control_cost_gap_is_exactly_quadratic(
        which in prop::sample::select(vec![0usize, 1, 3]),
        xs in proptest::collection::vec(-3.0..3.0f64, 2),
        a in proptest::collection::vec(-3.0..3.0f64, 2),
        b in proptest::collection::vec(-3.0..3.0f64, 2),
        regime in 0usize..2,
    ) {
        let spec = &specs()[which];
        let lq = spec.lq().unwrap();
        let (d, m) = (spec.dim_state(), spec.dim_control());
        let x = point(d, &xs);
        let (a, b) = (point(m, &a), point(m, &b));
        let mu = MeasureArg::dirac(&point(d, &[0.7]));
        let c = &spec.coefficients;
        let gap = c.running_cost(0.1, &x, &mu, &b, regime) - c.running_cost(0.1, &x, &mu, &a, regime)
            - (&b - &a).dot(&c.running_cost_grad_alpha(0.1, &x, &mu, &a, regime));
        let r = &lq.regimes[regime].control_cost;
        let delta = &b - &a;
        // The gap is the quadratic form 1/2 D'RD, hence at least 1/2 lambda_min(R) |D|^2.
        let form = 0.5 * delta.dot(&(r * &delta));
        prop_assert!((gap - form).abs() <= 1e-12 * (1.0 + form));
        let lambda = 0.5 * r.symmetric_eigenvalues().min();
        prop_assert!(gap >= lambda * delta.norm_squared() - 1e-12 * (1.0 + form));
    }
}
