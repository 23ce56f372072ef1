use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rmfg::game_model::catalog;
use rmfg::game_model::{LqParams, LqRegime};
use rmfg::hamiltonian::{minimize, DEFAULT_TOL};
use rmfg::lq_oracle::{decoupling_field_lq, mean_flow_lq, riccati_residual, solve_riccati, uniform_grid};
use rmfg::measure::MeasureArg;
use rmfg::regime_chain::{GeneratorMatrix, RegimePath};

fn generator(states: usize) -> GeneratorMatrix {
    match states {
        1 => GeneratorMatrix::trivial(),
        2 => GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap(),
        _ => GeneratorMatrix::new(
            &[vec![-3.0, 1.0, 2.0], vec![1.0, -2.0, 1.0], vec![0.5, 0.5, -1.0]],
            None,
        )
        .unwrap(),
    }
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// For the `lq` family (`b1 = 0`, `b2 = R = G = 1`, no mean terms) the value
/// `1/2 K_i x^2 + c_i` turns the HJB system into
/// `K_i' = K_i^2 - Qx_i - sum_j q_ij K_j`, `K_i(T) = 1`.
/// Integrated backwards with classical RK4 at a fine fixed step.
fn coupled_scalar_riccati(qx: &[f64], q: &GeneratorMatrix, horizon: f64, steps: usize) -> Vec<f64> {
    let s = qx.len();
    let rhs = |k: &[f64]| -> Vec<f64> {
        (0..s)
            .map(|i| k[i] * k[i] - qx[i] - (0..s).map(|j| q.matrix()[(i, j)] * k[j]).sum::<f64>())
            .collect()
    };
    let h = -horizon / steps as f64;
    let mut k = vec![1.0; s];
    for _ in 0..steps {
        let axpy = |a: &[f64], b: &[f64], c: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + c * y).collect() };
        let k1 = rhs(&k);
        let k2 = rhs(&axpy(&k, &k1, h / 2.0));
        let k3 = rhs(&axpy(&k, &k2, h / 2.0));
        let k4 = rhs(&axpy(&k, &k3, h));
        for i in 0..s {
            k[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    k
}

#[test]
fn regime_coupled_gain_matches_independent_integration() {
    for states in 1..=3 {
        let q = generator(states);
        let params = catalog::lq_params("lq", states).unwrap();
        let sol = solve_riccati(&params, &q, &uniform_grid(1.0, 400)).unwrap();
        let qx: Vec<f64> = params.regimes.iter().map(|r| r.state_cost[(0, 0)]).collect();
        let oracle = coupled_scalar_riccati(&qx, &q, 1.0, 20_000);
        for i in 0..states {
            let k0 = sol.quadratic[0][i][(0, 0)];
            assert!((k0 - oracle[i]).abs() < 1e-9, "{states} states, regime {i}: {k0} vs {}", oracle[i]);
            // No mean terms and no constant drift.
            assert_eq!(sol.mean_coef[0][i][(0, 0)], 0.0);
            assert_eq!(sol.affine[0][i][0], 0.0);
        }
    }
}

#[test]
fn residual_is_small_on_every_lq_family() {
    let planar = LqRegime {
        state_cost: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]),
        control_cost: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        mean_coupling: 0.4,
        terminal_cost: DMatrix::identity(2, 2),
        drift_state: DMatrix::from_row_slice(2, 2, &[-0.2, 0.1, 0.0, -0.3]),
        drift_control: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]),
        mean_drift: DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]),
        drift_const: DVector::from_vec(vec![0.1, -0.05]),
        diffusion: DMatrix::identity(2, 2),
    };
    let mut cases = vec![(LqParams::new(vec![planar.clone(), planar], true).unwrap(), generator(2))];
    for name in ["lq", "lq-mean-drift"] {
        for states in 1..=3 {
            cases.push((catalog::lq_params(name, states).unwrap(), generator(states)));
        }
    }
    for (params, q) in cases {
        let sol = solve_riccati(&params, &q, &uniform_grid(1.0, 200)).unwrap();
        let res = riccati_residual(&sol);
        assert!(res <= 1e-6, "residual {res}");
        // Refining the output grid does not move the solution.
        let fine = solve_riccati(&params, &q, &uniform_grid(1.0, 1600)).unwrap();
        for i in 0..q.states() {
            let (k, l, a) = sol.coefficients_at(0.0, i).unwrap();
            let (kf, lf, af) = fine.coefficients_at(0.0, i).unwrap();
            assert!((k - kf).amax() < 1e-8 && (l - lf).amax() < 1e-8 && (a - af).amax() < 1e-8);
        }
    }
}

#[test]
fn feedback_is_the_hamiltonian_minimizer_at_the_field() {
    let q = generator(2);
    let spec = catalog::build("lq-mean-drift", q.clone(), 1.0, v1(1.0), 0).unwrap();
    let sol = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, 200)).unwrap();
    for k in 0..=10 {
        let t = 0.1 * k as f64;
        for i in 0..2 {
            let (x, xbar) = (v1(1.5 - 0.3 * k as f64), v1(0.4));
            let p = decoupling_field_lq(&sol, t, &x, &xbar, i).unwrap();
            let mu = MeasureArg::Moments {
                mean: xbar.clone(),
                second_moment: 1.0,
            };
            let a = minimize(&spec, t, &x, &mu, &p, i, DEFAULT_TOL).unwrap().alpha_hat;
            assert_eq!(sol.feedback(t, &x, &xbar, i).unwrap(), a);
        }
    }
}

#[test]
fn zero_start_without_drift_keeps_zero_mean() {
    let q = generator(2);
    let sol = solve_riccati(&catalog::lq_params("lq", 2).unwrap(), &q, &uniform_grid(1.0, 200)).unwrap();
    let path = RegimePath::from_jumps(0, vec![(0.4, 1), (0.9, 0)], 1.0).unwrap();
    let flow = mean_flow_lq(&sol, &path, &v1(0.0)).unwrap();
    assert!(flow.mean.iter().all(|m| m[0] == 0.0));
}

/// Interacting particles along one fixed regime path, Euler-Maruyama with the
/// oracle's feedback and the empirical mean in place of the limit mean.
#[test]
fn mean_flow_matches_particle_simulation() {
    let q = generator(2);
    let spec = catalog::build("lq-mean-drift", q.clone(), 1.0, v1(1.0), 0).unwrap();
    let steps = 1024;
    let sol = solve_riccati(spec.lq().unwrap(), &q, &uniform_grid(1.0, steps)).unwrap();
    let path = RegimePath::from_jumps(0, vec![(0.3125, 1), (0.6875, 0)], 1.0).unwrap();
    let flow = mean_flow_lq(&sol, &path, &v1(1.0)).unwrap();

    let particles = 100_000;
    let dt = 1.0 / steps as f64;
    let mut x = vec![1.0; particles];
    let mut cost = vec![0.0; particles];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let checkpoints = [256, 512, 768, 1024];
    let mut checked = 0;
    for n in 0..steps {
        let t = n as f64 * dt;
        let i = path.state_at(t);
        let r = &spec.lq().unwrap().regimes[i];
        let (b1, b2, c, sig) = (r.drift_state[(0, 0)], r.drift_control[(0, 0)], r.mean_drift[(0, 0)], r.diffusion[(0, 0)]);
        let (qx, rr, s) = (r.state_cost[(0, 0)], r.control_cost[(0, 0)], r.mean_coupling);
        let (k, l, a) = sol.coefficients_at(t, i).unwrap();
        let (k, l, a) = (k[(0, 0)], l[(0, 0)], a[0]);
        let m = x.iter().sum::<f64>() / particles as f64;
        for (xi, ci) in x.iter_mut().zip(cost.iter_mut()) {
            let alpha = -b2 / rr * (k * *xi + l * m + a);
            *ci += 0.5 * (qx * (*xi - s * m).powi(2) + rr * alpha * alpha) * dt;
            let z: f64 = StandardNormal.sample(&mut rng);
            *xi += (b1 * *xi + c * m + b2 * alpha) * dt + sig * dt.sqrt() * z;
        }
        if checkpoints.contains(&(n + 1)) {
            let t = (n + 1) as f64 * dt;
            let mean = x.iter().sum::<f64>() / particles as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (particles - 1) as f64;
            let se = (var / particles as f64).sqrt();
            let expect = flow.mean_at(t)[0];
            assert!((mean - expect).abs() <= 3.0 * se, "t {t}: mean {mean} vs {expect} (se {se})");
            let expect_var = flow.covariance_at(t)[(0, 0)];
            let var_se = var * (2.0 / (particles - 1) as f64).sqrt();
            assert!((var - expect_var).abs() <= 3.0 * var_se, "t {t}: var {var} vs {expect_var}");
            checked += 1;
        }
    }
    assert_eq!(checked, checkpoints.len());

    // Terminal cost with the terminal mean coupling pinned on for this family.
    let i = path.state_at(1.0);
    let r = &spec.lq().unwrap().regimes[i];
    let m = x.iter().sum::<f64>() / particles as f64;
    let sg = spec.lq().unwrap().terminal_coupling(i);
    for (xi, ci) in x.iter().zip(cost.iter_mut()) {
        *ci += 0.5 * r.terminal_cost[(0, 0)] * (xi - sg * m).powi(2);
    }
    let mean_cost = cost.iter().sum::<f64>() / particles as f64;
    let var = cost.iter().map(|c| (c - mean_cost).powi(2)).sum::<f64>() / (particles - 1) as f64;
    let se = (var / particles as f64).sqrt();
    assert!(
        (mean_cost - flow.expected_cost).abs() <= 3.0 * se,
        "cost {mean_cost} vs {} (se {se})",
        flow.expected_cost
    );
}
