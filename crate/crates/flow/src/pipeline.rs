//! The full estimation graph: features of both frames, similarity, transport,
//! initial flow and (for training) the self-supervised objective.

use ffe_autodiff::{Tape, Tensor, Var};
use ffe_core::{FlowField, ParticleFrame};
use rand::RngCore;

use crate::dve::{refine, DveConfig, RefinementTrace};
use crate::features::{extract_features, FeatureConfig, FrameGraph, ModelParams};
use crate::losses::{train_objective, LossContext, LossVars, LossWeights};
use crate::transport::{initial_flow, match_frames, similarity, sinkhorn, FlowVars, OTConfig};
use crate::Result;

/// Per-pair constants reused across epochs.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub source: FrameGraph,
    pub target: FrameGraph,
    pub losses: LossContext,
}

impl PreparedPair {
    pub fn new(
        x: &ParticleFrame,
        y: &ParticleFrame,
        features: &FeatureConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        Ok(Self {
            source: FrameGraph::build(x, features.k),
            target: FrameGraph::build(y, features.k),
            losses: LossContext::new(x, y, weights)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub flow: FlowVars,
    pub loss: LossVars,
}

/// Records the training objective of one pair on `tape`.
pub fn forward(
    tape: &mut Tape,
    pair: &PreparedPair,
    vars: &[Var],
    features: &FeatureConfig,
    ot: &OTConfig,
    weights: &LossWeights,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ForwardVars> {
    let fx = extract_features(
        tape,
        &pair.source,
        vars,
        features,
        rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
    )?;
    let fy = extract_features(tape, &pair.target, vars, features, rng)?;
    let s = similarity(tape, fx, fy)?;
    let neg = tape.neg(s);
    let cost = tape.add_const(neg, 1.0);
    let sk = sinkhorn(tape, cost, ot)?;
    let x = tape.constant(pair.source.positions.clone());
    let y = tape.constant(pair.target.positions.clone());
    let flow = initial_flow(tape, &sk, s, x, y, ot)?;
    let loss = train_objective(tape, &pair.losses, flow.flow, flow.confidence, weights)?;
    Ok(ForwardVars { flow, loss })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateConfig {
    pub ot: OTConfig,
    /// `None` skips test-time refinement.
    pub dve: Option<DveConfig>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            ot: OTConfig::inference(),
            dve: Some(DveConfig::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub initial: FlowField,
    pub confidence: Vec<f64>,
    pub flow: FlowField,
    pub trace: Option<RefinementTrace>,
    pub sinkhorn_residuals: Vec<f64>,
}

fn positions(frame: &ParticleFrame) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![frame.len(), 3],
        frame.positions().iter().flatten().copied().collect(),
    )?)
}

/// Initial flow from the network and transport, then optional refinement.
pub fn estimate(
    params: &ModelParams,
    x: &ParticleFrame,
    y: &ParticleFrame,
    cfg: &EstimateConfig,
) -> Result<Estimate> {
    let fx = params.features(x)?;
    let fy = params.features(y)?;
    let tp = match_frames(&fx, &fy, &positions(x)?, &positions(y)?, &cfg.ot)?;
    let initial = FlowField::new(tp.flow)?;
    let confidence = tp.confidence;
    let (flow, trace) = match &cfg.dve {
        Some(dve) => {
            let t = refine(x, &initial, &confidence, y, dve)?;
            (t.flow.clone(), Some(t))
        }
        None => (initial.clone(), None),
    };
    Ok(Estimate {
        initial,
        confidence,
        flow,
        trace,
        sinkhorn_residuals: tp.residuals,
    })
}
