//! Label-free training over frame pairs.

use ffe_autodiff::{Adam, AdamConfig, Tape};
use ffe_core::ParticleFrame;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::features::{FeatureConfig, ModelParams};
use crate::losses::{LossBreakdown, LossWeights};
use crate::pipeline::{forward, PreparedPair};
use crate::transport::OTConfig;
use crate::{FlowError, Result};

/// Loss above which training is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// A training example: two frames and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub source: ParticleFrame,
    pub target: ParticleFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub data_fraction: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub ot: OTConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 100,
            learning_rate: 1e-3,
            data_fraction: 1.0,
            seed: 0,
            loss: LossWeights::default(),
            ot: OTConfig::training(),
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(FlowError::Config(
                "batch size and epochs must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FlowError::Config("learning rate must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(FlowError::Config("data fraction must lie in (0, 1]".into()));
        }
        self.loss.validate()?;
        self.ot.validate()?;
        self.features.validate()
    }
}

/// `floor(fraction · N)` items drawn without replacement, kept in their
/// original order. `fraction = 1` returns the input unchanged.
pub fn sample_subset<T: Clone>(data: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FlowError::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = (fraction * data.len() as f64).floor() as usize;
    if count == 0 {
        return Err(FlowError::EmptySubset {
            fraction,
            total: data.len(),
        });
    }
    if count == data.len() {
        return Ok(data.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, data.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| data[i].clone()).collect())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub recon: f64,
    pub smooth: f64,
    pub div: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Loss and parameter gradient of one prepared pair.
pub fn sample_gradient(
    params: &ModelParams,
    pair: &PreparedPair,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let fwd = forward(
        &mut tape,
        pair,
        &vars,
        &params.config,
        &cfg.ot,
        &cfg.loss,
        Some(&mut rng),
    )?;
    let l = fwd.loss;
    let breakdown = LossBreakdown {
        total: tape.item(l.total),
        recon: tape.item(l.recon),
        smooth: tape.item(l.smooth),
        div: tape.item(l.div),
    };
    tape.backward(l.total)?;
    Ok((breakdown, ModelParams::flat_grad(&tape, &vars)))
}

pub fn train(data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, None, |_| {})
}

/// Trains from `init` (or a seeded initialisation) and reports each epoch.
pub fn train_with(
    data: &[TrainSample],
    cfg: &TrainConfig,
    init: Option<ModelParams>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let subset = sample_subset(data, cfg.data_fraction, cfg.seed)?;
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(cfg.features.clone(), cfg.seed)?,
    };
    let prepared = subset
        .par_iter()
        .map(|s| PreparedPair::new(&s.source, &s.target, &params.config, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let mut flat = params.flat();
    let mut opt = Adam::new(
        flat.len(),
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = LossBreakdown {
            total: 0.0,
            recon: 0.0,
            smooth: 0.0,
            div: 0.0,
        };
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let seed = cfg
                        .seed
                        .wrapping_mul(0x2545_f491_4f6c_dd1d)
                        .wrapping_add((epoch * prepared.len() + i) as u64);
                    sample_gradient(&params, &prepared[i], cfg, seed)
                })
                .collect::<Vec<_>>();
            let mut grad = vec![0.0; flat.len()];
            for r in results {
                let (b, g) = r?;
                if !b.total.is_finite() || b.total > DIVERGENCE_LIMIT {
                    return Err(FlowError::Diverged {
                        epoch,
                        step,
                        loss: b.total,
                    });
                }
                sums.total += b.total;
                sums.recon += b.recon;
                sums.smooth += b.smooth;
                sums.div += b.div;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut flat, &grad);
            params.set_flat(&flat)?;
            if !params.is_finite() {
                return Err(FlowError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        let m = prepared.len() as f64;
        let rec = EpochRecord {
            epoch,
            mean_loss: sums.total / m,
            recon: sums.recon / m,
            smooth: sums.smooth / m,
            div: sums.div / m,
        };
        log::info!("{}", rec.to_json());
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_counts_and_identity() {
        let data: Vec<usize> = (0..13021).collect();
        assert_eq!(sample_subset(&data, 0.01, 4).unwrap().len(), 130);
        assert_eq!(
            sample_subset(&data[..50], 1.0, 9).unwrap(),
            data[..50].to_vec()
        );
        assert!(matches!(
            sample_subset(&data[..50], 0.01, 1),
            Err(FlowError::EmptySubset { .. })
        ));
        assert!(sample_subset(&data, 0.0, 1).is_err());
    }

    #[test]
    fn subset_is_seeded() {
        let data: Vec<usize> = (0..1000).collect();
        let a = sample_subset(&data, 0.1, 7).unwrap();
        assert_eq!(a, sample_subset(&data, 0.1, 7).unwrap());
        assert_ne!(a, sample_subset(&data, 0.1, 8).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(FlowError::Config(_))));
    }
}
