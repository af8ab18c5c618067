use ffe_core::Vec3;
use ffe_flow::metrics::evaluate;
use ffe_flow::synth::{
    beltrami_divergence, beltrami_velocity, generate_dataset, generate_pair, median_displacement,
    median_spacing, BeltramiParams, CaseKind, FlowCase,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
    (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
}

#[test]
fn beltrami_reference_values() {
    let bp = BeltramiParams::default();
    let q = -std::f64::consts::FRAC_PI_4;
    assert!(close(beltrami_velocity([0.0; 3], 0.0, &bp), [q; 3], 1e-15));
    let want = [
        -2.134_521_966_990_531,
        -1.142_436_939_077_282,
        -0.240_943_299_324_712_1,
    ];
    assert!(close(
        beltrami_velocity([0.3, -0.2, 0.7], 0.5, &bp),
        want,
        1e-14
    ));
}

#[test]
fn beltrami_is_divergence_free() {
    let bp = BeltramiParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..100 {
        let p: Vec3 = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let t = rng.gen_range(0.0..1.0);
        assert!(beltrami_divergence(p, t, &bp).abs() < 1e-12);
        let mut div = 0.0;
        for a in 0..3 {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            div +=
                (beltrami_velocity(hi, t, &bp)[a] - beltrami_velocity(lo, t, &bp)[a]) / (2.0 * h);
        }
        assert!(
            div.abs() < 1e-6,
            "finite-difference divergence {div} at {p:?}"
        );
    }
}

#[test]
fn analytic_partials_match_finite_differences() {
    let bp = BeltramiParams {
        a: 1.3,
        d: 0.7,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p: Vec3 = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let h = 1e-5;
        let mut div = 0.0;
        for a in 0..3 {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            div += (beltrami_velocity(hi, 0.2, &bp)[a] - beltrami_velocity(lo, 0.2, &bp)[a])
                / (2.0 * h);
        }
        assert!((div - beltrami_divergence(p, 0.2, &bp)).abs() < 1e-6);
    }
}

#[test]
fn halving_the_integration_step_is_negligible() {
    for seed in 0..3 {
        let case = FlowCase::new(CaseKind::Beltrami, 256, seed);
        let pair = generate_pair(&case).unwrap();
        for (p, f) in pair.source.positions().iter().zip(pair.flow.vectors()) {
            let fine = case.displacement(*p, pair.dt, 2 * case.rk4_substeps);
            assert!(close(*f, fine, 1e-9), "{f:?} vs {fine:?}");
        }
    }
}

#[test]
fn rotation_preserves_distance_to_axis() {
    let case = FlowCase::new(CaseKind::RigidRotation, 200, 4);
    let pair = generate_pair(&case).unwrap();
    let moved = pair.source.advect(&pair.flow).unwrap();
    let radial = |p: &Vec3| {
        let r = [
            p[0] - case.center[0],
            p[1] - case.center[1],
            p[2] - case.center[2],
        ];
        let along = r[0] * case.axis[0] + r[1] * case.axis[1] + r[2] * case.axis[2];
        (
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) - along * along,
            along,
        )
    };
    for (a, b) in pair.source.positions().iter().zip(moved.positions()) {
        let (ra, la) = radial(a);
        let (rb, lb) = radial(b);
        assert!((ra - rb).abs() < 1e-12 && (la - lb).abs() < 1e-12);
    }
}

#[test]
fn generation_is_deterministic() {
    for kind in CaseKind::ALL {
        let a = generate_dataset(kind, 3, 128, 40).unwrap();
        let b = generate_dataset(kind, 3, 128, 40).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }
}

#[test]
fn ground_truth_scores_perfectly() {
    let pair = generate_pair(&FlowCase::new(CaseKind::Beltrami, 300, 5)).unwrap();
    let r = evaluate(&pair.flow, &pair.flow).unwrap();
    assert_eq!(
        (r.epe, r.nepe, r.acc_strict, r.outliers),
        (0.0, 0.0, 1.0, 0.0)
    );
}

#[test]
fn displacement_scale_is_tied_to_spacing() {
    let mut case = FlowCase::new(CaseKind::Uniform, 400, 6);
    case.dt_factor = 0.5;
    let pair = generate_pair(&case).unwrap();
    let ratio = median_displacement(&pair.flow) / median_spacing(&pair.source);
    assert!((ratio - 0.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_case_is_finite_and_consistent(seed in 0u64..100_000, n in 2usize..200, k in 0usize..3) {
        let pair = generate_pair(&FlowCase::new(CaseKind::ALL[k], n, seed)).unwrap();
        prop_assert_eq!(pair.source.len(), n);
        prop_assert_eq!(pair.target.len(), n);
        prop_assert!(pair.flow.vectors().iter().flatten().all(|v| v.is_finite()));
        prop_assert!(pair.dt > 0.0);
    }
}
