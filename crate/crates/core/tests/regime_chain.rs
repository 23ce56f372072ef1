use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmfg::regime_chain::{martingale_ledger, occupation_times, sample_path, sample_paths, GeneratorMatrix, RegimePath};
use rmfg::rng::SeedTree;

fn two_state() -> GeneratorMatrix {
    GeneratorMatrix::new(&[vec![-1.0, 1.0], vec![2.0, -2.0]], None).unwrap()
}

fn three_state() -> GeneratorMatrix {
    GeneratorMatrix::new(
        &[vec![-3.0, 1.0, 2.0], vec![1.0, -2.0, 1.0], vec![0.5, 0.5, -1.0]],
        None,
    )
    .unwrap()
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn first_holding_time_is_exponential_with_the_exit_rate() {
    let paths = sample_paths(&two_state(), 0, 50.0, &SeedTree::new(3, "hold"), 100_000);
    let holds: Vec<f64> = paths.iter().map(|p| p.jumps().first().map_or(50.0, |j| j.0)).collect();
    let (mean, _) = mean_and_stderr(&holds);
    assert!((mean - 1.0).abs() <= 0.01, "mean first holding time {mean}");
}

#[test]
fn long_run_occupation_matches_stationary_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let path = sample_path(&two_state(), 0, 5000.0, &mut rng);
    let occ = occupation_times(&path, 2);
    assert!((occ[0] / 5000.0 - 2.0 / 3.0).abs() <= 0.02, "fraction {}", occ[0] / 5000.0);
    let pi = two_state().stationary_distribution().unwrap();
    assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12 && (pi[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn small_step_transitions_match_first_order_expansion() {
    let q = three_state();
    let dt = 0.01;
    let n = 100_000;
    for i in 0..3 {
        let paths = sample_paths(&q, i, dt, &SeedTree::new(5, "small-dt").child_indexed("from", i as u64), n);
        let mut counts = [0.0; 3];
        for p in &paths {
            counts[p.state_at(dt)] += 1.0;
        }
        for j in 0..3 {
            let freq = counts[j] / n as f64;
            let first_order = if i == j { 1.0 } else { 0.0 } + q.rate(i, j) * dt;
            let ci = 4.0 * (first_order * (1.0 - first_order) / n as f64).sqrt();
            // Second-order term of exp(Q dt), bounded by (max exit rate * dt)^2.
            let tol = (q.max_exit_rate() * dt).powi(2) + ci;
            assert!((freq - first_order).abs() <= tol, "{i}->{j}: {freq} vs {first_order} (tol {tol})");
        }
    }
}

#[test]
fn jump_martingales_have_zero_mean() {
    for (name, q) in [("two", two_state()), ("three", three_state())] {
        let s = q.states();
        let paths = sample_paths(&q, 0, 2.0, &SeedTree::new(9, name), 10_000);
        let grid = [0.0, 1.0, 2.0];
        let ledgers: Vec<_> = paths.iter().map(|p| martingale_ledger(p, &q, &grid).unwrap()).collect();
        for i in 0..s {
            for j in 0..s {
                if i == j {
                    continue;
                }
                let ends: Vec<f64> = ledgers.iter().map(|l| l.martingale_at_end(i, j)).collect();
                let (mean, se) = mean_and_stderr(&ends);
                assert!(mean.abs() <= 3.0 * se, "{name} M_{i}{j}: mean {mean}, stderr {se}");
            }
        }
    }
}

#[test]
fn sampling_does_not_depend_on_thread_count() {
    let seeds = SeedTree::new(21, "threads");
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = one.install(|| sample_paths(&three_state(), 1, 3.0, &seeds, 500));
    let b = three.install(|| sample_paths(&three_state(), 1, 3.0, &seeds, 500));
    assert_eq!(a, b);
}

fn arb_generator() -> impl Strategy<Value = GeneratorMatrix> {
    (2usize..=4)
        .prop_flat_map(|s| proptest::collection::vec(0.0..3.0f64, s * s).prop_map(move |r| (s, r)))
        .prop_map(|(s, r)| {
            let mut rows = vec![vec![0.0; s]; s];
            for i in 0..s {
                for j in 0..s {
                    if i != j {
                        rows[i][j] = r[i * s + j];
                    }
                }
                rows[i][i] = -rows[i].iter().sum::<f64>();
            }
            GeneratorMatrix::new(&rows, None).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupation_partitions_the_horizon(q in arb_generator(), seed in any::<u64>(), horizon in 0.1..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = sample_path(&q, 0, horizon, &mut rng);
        let occ = occupation_times(&path, q.states());
        prop_assert!((occ.iter().sum::<f64>() - horizon).abs() <= 1e-12 * (1.0 + horizon));
        prop_assert!(occ.iter().all(|&o| o >= 0.0));
    }

    #[test]
    fn sampled_paths_only_take_allowed_jumps(q in arb_generator(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = sample_path(&q, 1, 5.0, &mut rng);
        let mut state = path.initial_state();
        let mut t = 0.0;
        for &(jt, to) in path.jumps() {
            prop_assert!(jt > t && jt <= 5.0);
            prop_assert!(to != state && q.rate(state, to) > 0.0);
            prop_assert_eq!(path.state_before(jt), state);
            prop_assert_eq!(path.state_at(jt), to);
            t = jt;
            state = to;
        }
        let rebuilt = RegimePath::from_jumps(path.initial_state(), path.jumps().to_vec(), 5.0).unwrap();
        prop_assert_eq!(rebuilt, path);
    }

    #[test]
    fn ledger_matches_counts_and_occupation(q in arb_generator(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = sample_path(&q, 0, 4.0, &mut rng);
        let grid: Vec<f64> = (0..=8).map(|k| 0.5 * k as f64).collect();
        let ledger = martingale_ledger(&path, &q, &grid).unwrap();
        let s = q.states();
        for (k, &t) in grid.iter().enumerate() {
            let occ = path.occupation_between(0.0, t, s);
            let mut counts = vec![0.0; s * s];
            for (_, from, to) in path.jumps_between(0.0, t) {
                counts[from * s + to] += 1.0;
            }
            for i in 0..s {
                prop_assert_eq!(ledger.pair(i, i).martingale()[k], 0.0);
                for j in (0..s).filter(|&j| j != i) {
                    let p = ledger.pair(i, j);
                    prop_assert_eq!(p.bracket[k], counts[i * s + j]);
                    prop_assert!((p.compensator[k] - q.rate(i, j) * occ[i]).abs() <= 1e-12 * (1.0 + t));
                }
            }
        }
    }
}
