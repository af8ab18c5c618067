//! Test-time residual refinement of an initial flow.

use ffe_autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use ffe_core::{FlowField, ParticleFrame};

use crate::losses::{reconstruction_term, TargetSet};
use crate::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DveConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for DveConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl DveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.learning_rate > 0.0) {
            return Err(FlowError::Config(format!(
                "refinement needs steps >= 1 and a positive rate, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    /// Objective before each step; `steps + 1` entries.
    pub objective: Vec<f64>,
    /// Residual of the best recorded iterate.
    pub residual: FlowField,
    /// `F_init + residual`.
    pub flow: FlowField,
    pub best_step: usize,
}

impl RefinementTrace {
    pub fn initial_objective(&self) -> f64 {
        self.objective[0]
    }

    pub fn final_objective(&self) -> f64 {
        self.objective[self.best_step]
    }
}

/// Confidence-weighted nearest-target objective
/// `(1/n) sum p_i min_j |x_i + F_i + R_i - y_j|²` on the tape.
pub fn dve_objective(
    tape: &mut Tape,
    base: &Tensor,
    residual: Var,
    p: Var,
    targets: &TargetSet,
) -> Result<Var> {
    let b = tape.constant(base.clone());
    let yprime = tape.add(b, residual)?;
    reconstruction_term(tape, yprime, targets, p, 0.0)
}

/// Refines `f_init` with Adam on the residual, recomputing nearest targets
/// each step, and returns the best iterate seen.
pub fn refine(
    x: &ParticleFrame,
    f_init: &FlowField,
    p: &[f64],
    y: &ParticleFrame,
    cfg: &DveConfig,
) -> Result<RefinementTrace> {
    cfg.validate()?;
    let n = x.len();
    if f_init.len() != n || p.len() != n {
        return Err(FlowError::Dimension(format!(
            "{n} particles, {} flow vectors, {} confidences",
            f_init.len(),
            p.len()
        )));
    }
    let targets = TargetSet::new(y);
    let base = Tensor::new(
        vec![n, 3],
        x.positions()
            .iter()
            .zip(f_init.vectors())
            .flat_map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
            .collect(),
    )?;
    let conf = Tensor::vector(p.to_vec());
    let mut r = vec![0.0; 3 * n];
    let mut opt = Adam::new(
        3 * n,
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
    );
    let mut objective = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, 0usize, r.clone());
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let rv = tape.param(Tensor::new(vec![n, 3], r.clone())?);
        let pv = tape.constant(conf.clone());
        let obj = dve_objective(&mut tape, &base, rv, pv, &targets)?;
        let value = tape.item(obj);
        if !value.is_finite() {
            return Err(FlowError::NonFinite {
                stage: "refinement objective",
                iteration: step,
            });
        }
        objective.push(value);
        if value < best.0 {
            best = (value, step, r.clone());
        }
        if step == cfg.steps {
            break;
        }
        tape.backward(obj)?;
        opt.step(&mut r, &tape.grad(rv));
    }
    let residual = FlowField::from_flat(&best.2)?;
    let flow = f_init.add(&residual)?;
    Ok(RefinementTrace {
        objective,
        residual,
        flow,
        best_step: best.1,
    })
}
