use ffe_autodiff::{finite_diff_check, Tape, Tensor};
use ffe_flow::transport::{
    fixed_point_residual, match_frames, similarity_matrix, sinkhorn, solve_transport,
    top_l_support, OTConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Unbalanced Sinkhorn in scaling form with no acceleration, run to
/// convergence: `a = (m / K b)^phi`, `b = (m / K^T a)^phi`, `T = a K b`.
fn reference_plan(cost: &Tensor, eps: f64, lambda: f64, iters: usize) -> Vec<f64> {
    let (n1, n2) = (cost.shape()[0], cost.shape()[1]);
    let m = 1.0 / n1 as f64;
    let phi = lambda / (lambda + eps);
    let k: Vec<f64> = cost.data().iter().map(|c| (-c / eps).exp()).collect();
    let mut a = vec![1.0; n1];
    let mut b = vec![1.0; n2];
    for _ in 0..iters {
        for j in 0..n2 {
            let s: f64 = (0..n1).map(|i| k[i * n2 + j] * a[i]).sum();
            b[j] = (m / s).powf(phi);
        }
        for i in 0..n1 {
            let s: f64 = (0..n2).map(|j| k[i * n2 + j] * b[j]).sum();
            a[i] = (m / s).powf(phi);
        }
    }
    (0..n1 * n2)
        .map(|ij| a[ij / n2] * k[ij] * b[ij % n2])
        .collect()
}

/// Largest violation of the primal stationarity condition
/// `C + eps log T + lambda log(r_i / m) + lambda log(c_j / m) = 0`.
fn kkt_violation(cost: &Tensor, plan: &[f64], eps: f64, lambda: f64) -> f64 {
    let (n1, n2) = (cost.shape()[0], cost.shape()[1]);
    let m = 1.0 / n1 as f64;
    let rows: Vec<f64> = (0..n1)
        .map(|i| plan[i * n2..(i + 1) * n2].iter().sum())
        .collect();
    let cols: Vec<f64> = (0..n2)
        .map(|j| (0..n1).map(|i| plan[i * n2 + j]).sum())
        .collect();
    (0..n1 * n2)
        .map(|ij| {
            let (i, j) = (ij / n2, ij % n2);
            (cost.data()[ij]
                + eps * plan[ij].ln()
                + lambda * (rows[i] / m).ln()
                + lambda * (cols[j] / m).ln())
            .abs()
        })
        .fold(0.0, f64::max)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs())
        .fold(0.0, f64::max)
}

#[test]
fn two_by_two_matches_reference() {
    let cost = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let cfg = OTConfig::inference();
    let sol = solve_transport(&cost, &cfg).unwrap();
    let reference = reference_plan(&cost, cfg.epsilon, cfg.lambda, 20_000);
    assert!(max_rel(sol.plan.data(), &reference) < 1e-6);
    assert!(kkt_violation(&cost, &reference, cfg.epsilon, cfg.lambda) < 1e-9);
    let p = sol.plan.data();
    assert!(p[0] > 1e6 * p[1] && p[3] > 1e6 * p[2]);
}

#[test]
fn eight_by_eight_matches_reference() {
    let cfg = OTConfig::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let cost = random_matrix(&mut rng, 8, 8, 0.0, 2.0);
        let sol = solve_transport(&cost, &cfg).unwrap();
        let reference = reference_plan(&cost, cfg.epsilon, cfg.lambda, 50_000);
        assert!(kkt_violation(&cost, &reference, cfg.epsilon, cfg.lambda) < 1e-8);
        let err = max_rel(sol.plan.data(), &reference);
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn rectangular_plan_satisfies_stationarity() {
    let cfg = OTConfig::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cost = random_matrix(&mut rng, 6, 9, 0.0, 2.0);
    let sol = solve_transport(&cost, &cfg).unwrap();
    let reference = reference_plan(&cost, cfg.epsilon, cfg.lambda, 50_000);
    assert!(max_rel(sol.plan.data(), &reference) < 1e-6);
}

#[test]
fn residual_below_tolerance_on_random_costs() {
    let cfg = OTConfig::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let cost = random_matrix(&mut rng, 32, 32, 0.0, 2.0);
        let sol = solve_transport(&cost, &cfg).unwrap();
        assert_eq!(sol.residuals.len(), 100);
        assert!(fixed_point_residual(&cost, &sol.u, &sol.v, &cfg).unwrap() < 1e-6);
        assert!(sol.plan.data().iter().all(|t| *t > 0.0 && t.is_finite()));
    }
}

#[test]
fn residual_decreases_after_burn_in() {
    let cfg = OTConfig::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let cost = random_matrix(&mut rng, 32, 32, 0.0, 2.0);
        let r = solve_transport(&cost, &cfg).unwrap().residuals;
        for w in r[5..].windows(2) {
            assert!(w[1] <= w[0] || w[1] < 1e-12, "{:?}", &r[..30]);
        }
    }
}

#[test]
fn sweeps_match_the_unrolled_tape_solver() {
    let cfg = OTConfig {
        newton_after: None,
        sinkhorn_iters: 40,
        ..OTConfig::inference()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cost = random_matrix(&mut rng, 7, 10, 0.0, 2.0);
    let sol = solve_transport(&cost, &cfg).unwrap();
    let mut tape = Tape::new();
    let c = tape.constant(cost.clone());
    let sk = sinkhorn(&mut tape, c, &cfg).unwrap();
    for (a, b) in sol.log_plan.data().iter().zip(tape.data(sk.log_plan)) {
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
    }
}

#[test]
fn constant_cost_gives_uniform_plan() {
    for iters in [1, 7, 100] {
        let cfg = OTConfig {
            sinkhorn_iters: iters,
            ..OTConfig::inference()
        };
        let sol = solve_transport(&Tensor::new(vec![5, 5], vec![0.4; 25]).unwrap(), &cfg).unwrap();
        let first = sol.plan.data()[0];
        assert!(sol
            .plan
            .data()
            .iter()
            .all(|t| (t - first).abs() <= 1e-15 * first));
    }
}

#[test]
fn large_epsilon_pattern_is_near_uniform() {
    let cfg = OTConfig {
        epsilon: 100.0,
        ..OTConfig::inference()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cost = random_matrix(&mut rng, 8, 8, 0.0, 2.0);
    let sol = solve_transport(&cost, &cfg).unwrap();
    let total: f64 = sol.plan.data().iter().sum();
    let dev = sol
        .plan
        .data()
        .iter()
        .map(|t| (t / total - 1.0 / 64.0).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-3, "deviation {dev}");
}

#[test]
fn unrolled_gradient_wrt_cost() {
    let cfg = OTConfig {
        sinkhorn_iters: 10,
        ..OTConfig::inference()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cost = random_matrix(&mut rng, 8, 8, 0.0, 2.0);
    let probe = random_matrix(&mut rng, 8, 8, -1.0, 1.0);
    let err = finite_diff_check(
        |tape: &mut Tape, c| {
            let sk = sinkhorn(tape, c, &cfg)?;
            let w = tape.constant(probe.clone());
            let lp = tape
                .mul(sk.log_plan, w)
                .map_err(ffe_flow::FlowError::from)?;
            let sum = tape.sum(lp);
            let plan = tape.sum(sk.plan);
            let out = tape.add(sum, plan).map_err(ffe_flow::FlowError::from)?;
            Ok::<_, ffe_flow::FlowError>(out)
        },
        &cost,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn non_finite_cost_is_rejected() {
    let cost = Tensor::new(vec![2, 2], vec![0.0, f64::NAN, 1.0, 0.0]).unwrap();
    assert!(matches!(
        solve_transport(&cost, &OTConfig::inference()),
        Err(ffe_flow::FlowError::NonFinite { .. })
    ));
}

#[test]
fn similarity_matches_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, 4, 8, -1.0, 1.0);
    let b = random_matrix(&mut rng, 5, 8, -1.0, 1.0);
    let s = similarity_matrix(&a, &b).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let (ra, rb) = (&a.data()[i * 8..(i + 1) * 8], &b.data()[j * 8..(j + 1) * 8]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((s.data()[i * 5 + j] - dot / (na * nb + 1e-12)).abs() < 1e-14);
        }
    }
    let eye = Tensor::new(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let s = similarity_matrix(&eye, &eye).unwrap();
    for (k, v) in s.data().iter().enumerate() {
        let want = if k % 4 == 0 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-11);
    }
    let neg = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 0.0]).unwrap();
    assert!((similarity_matrix(&eye, &neg).unwrap().data()[0] + 1.0).abs() < 1e-11);
    assert!(similarity_matrix(&a, &eye).is_err());
}

fn positions(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    random_matrix(rng, n, 3, 0.0, 1.0)
}

#[test]
fn identical_frames_give_zero_flow_with_top_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = random_matrix(&mut rng, 16, 8, -1.0, 1.0);
    let x = positions(&mut rng, 16);
    let cfg = OTConfig {
        top_l: 1,
        ..OTConfig::inference()
    };
    let tp = match_frames(&f, &f, &x, &x, &cfg).unwrap();
    assert!(tp.weights.iter().all(|w| *w == 1.0));
    let worst = tp.flow.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_are_row_stochastic_and_targets_in_hull(seed in 0u64..1000, n1 in 2usize..12, n2 in 2usize..12, top_l in 1usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = random_matrix(&mut rng, n1, 6, -1.0, 1.0);
        let fy = random_matrix(&mut rng, n2, 6, -1.0, 1.0);
        let x = positions(&mut rng, n1);
        let y = positions(&mut rng, n2);
        let cfg = OTConfig { top_l, ..OTConfig::inference() };
        let tp = match_frames(&fx, &fy, &x, &y, &cfg).unwrap();
        let l = tp.support_size;
        prop_assert_eq!(l, top_l.min(n2));
        let support = top_l_support(tp.plan.data(), n1, n2, top_l);
        prop_assert_eq!(&support, &tp.support);
        for i in 0..n1 {
            let w = &tp.weights[i * l..(i + 1) * l];
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            for a in 0..3 {
                let vals = tp.support[i * l..(i + 1) * l].iter().map(|&j| y.data()[3 * j + a]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                prop_assert!(tp.targets[i][a] >= lo - 1e-12 && tp.targets[i][a] <= hi + 1e-12);
                prop_assert_eq!(tp.flow[i][a], tp.targets[i][a] - x.data()[3 * i + a]);
            }
            prop_assert!(tp.confidence[i] >= 0.0 && tp.confidence[i] <= 1.0 + 1e-12);
        }
        let dense = tp.dense_weights();
        for i in 0..n1 {
            prop_assert!((dense.data()[i * n2..(i + 1) * n2].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
