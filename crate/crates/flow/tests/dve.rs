use std::time::Instant;

use ffe_autodiff::{finite_diff_check_with, GradCheckOptions, Tape, Tensor};
use ffe_core::{FlowField, ParticleFrame};
use ffe_flow::dve::{dve_objective, refine, DveConfig};
use ffe_flow::losses::TargetSet;
use ffe_flow::metrics::evaluate;
use ffe_flow::synth::{generate_dataset, CaseKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> ParticleFrame {
    ParticleFrame::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
}

fn noise(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> FlowField {
    let d = Normal::new(0.0, sigma).unwrap();
    FlowField::new(
        (0..n)
            .map(|_| [d.sample(rng), d.sample(rng), d.sample(rng)])
            .collect(),
    )
    .unwrap()
}

#[test]
fn identity_frames_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let x = cloud(&mut rng, 512);
        let f = noise(&mut rng, 512, 0.01);
        let t = refine(&x, &f, &vec![1.0; 512], &x, &DveConfig::default()).unwrap();
        let epe = evaluate(&t.flow, &FlowField::zeros(512)).unwrap().epe;
        assert!(epe < 1e-3, "EPE {epe}");
        assert_eq!(t.objective.len(), 151);
    }
}

#[test]
fn never_worse_than_the_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = generate_dataset(CaseKind::Beltrami, 50, 128, 900).unwrap();
    for pair in &data {
        let init = pair.flow.add(&noise(&mut rng, 128, 0.05)).unwrap();
        let p: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
        let t = refine(
            &pair.source,
            &init,
            &p,
            &pair.target,
            &DveConfig {
                steps: 40,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(t.final_objective() <= t.initial_objective());
        assert_eq!(t.flow, init.add(&t.residual).unwrap());
    }
}

#[test]
fn objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(8..64);
        let x = cloud(&mut rng, n);
        let y = cloud(&mut rng, n + 2);
        let base = Tensor::new(
            vec![n, 3],
            x.positions().iter().flatten().copied().collect(),
        )
        .unwrap();
        let targets = TargetSet::new(&y);
        let p = Tensor::vector((0..n).map(|_| rng.gen()).collect());
        let r = Tensor::new(
            vec![n, 3],
            (0..3 * n).map(|_| rng.gen_range(-0.02..0.02)).collect(),
        )
        .unwrap();
        let report = finite_diff_check_with(
            |tape: &mut Tape, rv| {
                let pv = tape.constant(p.clone());
                dve_objective(tape, &base, rv, pv, &targets)
            },
            &r,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

#[test]
fn refinement_of_2048_particles_is_quick() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = cloud(&mut rng, 2048);
    let f = noise(&mut rng, 2048, 0.01);
    let start = Instant::now();
    refine(&x, &f, &vec![1.0; 2048], &x, &DveConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("refinement of 2048 particles took {secs:.2}s");
    assert!(secs < 5.0);
}

#[test]
fn input_flow_is_left_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = cloud(&mut rng, 64);
    let f = noise(&mut rng, 64, 0.02);
    let copy = f.clone();
    refine(
        &x,
        &f,
        &[0.5; 64],
        &x,
        &DveConfig {
            steps: 10,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(f, copy);
}
