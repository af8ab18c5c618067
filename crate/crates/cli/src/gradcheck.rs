//! Finite-difference checks of every differentiable objective.

use ffe_autodiff::{finite_diff_check_with, GradCheckOptions, GradCheckReport, Tape, Tensor};
use ffe_core::ParticleFrame;
use ffe_flow::dve::dve_objective;
use ffe_flow::features::{FeatureConfig, ModelParams};
use ffe_flow::losses::{
    reconstruction_term, smooth_term, train_objective, DivergenceOperator, LossContext,
    LossWeights, SmoothGraph, TargetSet,
};
use ffe_flow::pipeline::{forward, PreparedPair};
use ffe_flow::transport::OTConfig;
use ffe_flow::FlowError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteConfig {
    pub instances: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub grid_g: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Parameter entries probed per instance in the end-to-end check.
    pub param_entries: usize,
    pub features: FeatureConfig,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            n_min: 8,
            n_max: 64,
            grid_g: 5,
            seed: 0,
            tolerance: 1e-4,
            param_entries: 16,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteRow {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub excluded: usize,
    pub max_error: f64,
    pub passed: bool,
}

impl GradSuiteRow {
    pub fn line(&self) -> String {
        format!(
            "{:<24} instances={:<3} checked={:<6} excluded={:<4} max_rel_err={:.3e} {}",
            self.name,
            self.instances,
            self.checked,
            self.excluded,
            self.max_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Result<ParticleFrame> {
    Ok(
        ParticleFrame::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
            .map_err(FlowError::from)?,
    )
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape matches data")
}

fn positions(x: &ParticleFrame) -> Tensor {
    Tensor::new(
        vec![x.len(), 3],
        x.positions().iter().flatten().copied().collect(),
    )
    .expect("n x 3")
}

struct Accumulator {
    name: &'static str,
    instances: usize,
    checked: usize,
    excluded: usize,
    max_error: f64,
}

impl Accumulator {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            checked: 0,
            excluded: 0,
            max_error: 0.0,
        }
    }

    fn add(&mut self, r: GradCheckReport) {
        self.instances += 1;
        self.checked += r.checked;
        self.excluded += r.excluded;
        self.max_error = self.max_error.max(r.max_relative_error);
    }

    fn finish(self, tol: f64) -> GradSuiteRow {
        GradSuiteRow {
            name: self.name,
            instances: self.instances,
            checked: self.checked,
            excluded: self.excluded,
            max_error: self.max_error,
            passed: self.checked > 0 && self.max_error < tol,
        }
    }
}

pub fn run_grad_suite(cfg: &GradSuiteConfig) -> Result<Vec<GradSuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = LossWeights {
        grid_g: cfg.grid_g,
        smooth_k: 8,
        ..LossWeights::default()
    };
    let opts = GradCheckOptions::default();
    let names = [
        "reconstruction",
        "smoothness",
        "divergence",
        "training objective",
        "refinement objective",
        "end-to-end parameters",
    ];
    let mut acc: Vec<Accumulator> = names.iter().map(|n| Accumulator::new(n)).collect();
    for _ in 0..cfg.instances {
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        let x = cloud(&mut rng, n)?;
        let y = cloud(&mut rng, n)?;
        let xt = positions(&x);
        let flow = uniform(&mut rng, vec![n, 3], -0.05, 0.05);
        let conf = uniform(&mut rng, vec![n], 0.0, 1.0);
        let targets = TargetSet::new(&y);

        acc[0].add(finite_diff_check_with(
            |tape: &mut Tape, fv| {
                let xv = tape.constant(xt.clone());
                let yp = tape.add(xv, fv).map_err(FlowError::from)?;
                let pv = tape.constant(conf.clone());
                reconstruction_term(tape, yp, &targets, pv, weights.lambda_conf)
            },
            &flow,
            &opts,
        )?);

        let graph = SmoothGraph::build(&x, weights.smooth_k);
        acc[1].add(finite_diff_check_with(
            |tape: &mut Tape, fv| smooth_term(tape, fv, &graph).map(|(v, _)| v),
            &flow,
            &opts,
        )?);

        let op = DivergenceOperator::new(&x, &weights)?;
        acc[2].add(finite_diff_check_with(
            |tape: &mut Tape, fv| op.term(tape, fv),
            &flow,
            &opts,
        )?);

        let ctx = LossContext::new(&x, &y, &weights)?;
        acc[3].add(finite_diff_check_with(
            |tape: &mut Tape, fv| {
                let pv = tape.constant(conf.clone());
                train_objective(tape, &ctx, fv, pv, &weights).map(|l| l.total)
            },
            &flow,
            &opts,
        )?);

        let residual = uniform(&mut rng, vec![n, 3], -0.02, 0.02);
        acc[4].add(finite_diff_check_with(
            |tape: &mut Tape, rv| {
                let pv = tape.constant(conf.clone());
                dve_objective(tape, &xt, rv, pv, &targets)
            },
            &residual,
            &opts,
        )?);

        let shift = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        let moved = x.translated(shift);
        let pair = PreparedPair::new(&x, &moved, &cfg.features, &weights)?;
        let params = ModelParams::init(cfg.features.clone(), rng.gen())?;
        let ot = OTConfig {
            top_l: 8,
            ..OTConfig::training()
        };
        let entries: Vec<usize> = (0..cfg.param_entries)
            .map(|_| rng.gen_range(0..params.num_scalars()))
            .collect();
        let popts = GradCheckOptions {
            step: 1e-6,
            abs_floor: 1e-4,
            entries: Some(entries),
            ..GradCheckOptions::default()
        };
        acc[5].add(finite_diff_check_with(
            |tape: &mut Tape, fv| {
                let vars = params.vars_from_flat(tape, fv)?;
                forward(tape, &pair, &vars, &cfg.features, &ot, &weights, None)
                    .map(|f| f.loss.total)
            },
            &Tensor::vector(params.flat()),
            &popts,
        )?);
    }
    Ok(acc.into_iter().map(|a| a.finish(cfg.tolerance)).collect())
}
