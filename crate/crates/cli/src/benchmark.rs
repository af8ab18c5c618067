//! Synthesise, train, estimate and score over a set of flow cases.

use ffe_flow::features::ModelParams;
use ffe_flow::metrics::{evaluate, nds, MetricsReport, DEFAULT_NDS_K};
use ffe_flow::pipeline::{estimate, EstimateConfig};
use ffe_flow::synth::{median_displacement, CaseKind};
use ffe_flow::trainer::{train_with, EpochRecord, TrainConfig, TrainSample};

use crate::config::{BenchmarkSettings, RunConfig, SynthSettings};
use crate::synth::pairs;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub cases: Vec<CaseKind>,
    pub seed: u64,
    pub n: usize,
    pub settings: BenchmarkSettings,
    pub synth: SynthSettings,
    pub train: TrainConfig,
    pub estimate: EstimateConfig,
}

impl BenchmarkConfig {
    pub fn from_run(run: &RunConfig, seed: u64) -> Self {
        Self {
            cases: CaseKind::ALL.to_vec(),
            seed,
            n: run.synth.n,
            settings: run.benchmark.clone(),
            synth: run.synth.clone(),
            train: run.train.clone(),
            estimate: run.estimate,
        }
    }

    /// Seeds of the first training pair and the first held-out pair.
    pub fn seeds(&self, case_index: usize) -> (u64, u64) {
        let base = self
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(100_000 * case_index as u64);
        (base, base + 50_000)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub initial: MetricsReport,
    pub refined: MetricsReport,
    pub mnds_initial: f64,
    pub mnds_refined: f64,
    pub median_displacement: f64,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub kind: CaseKind,
    pub model: ModelParams,
    pub log: Vec<EpochRecord>,
    pub pairs: Vec<PairResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

impl CaseResult {
    pub fn mean_epe(&self, refined: bool) -> f64 {
        mean(self.pairs.iter().map(|p| {
            if refined {
                p.refined.epe
            } else {
                p.initial.epe
            }
        }))
    }

    pub fn mean_median_displacement(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.median_displacement))
    }

    /// Fraction of held-out pairs where refinement lowered the EPE.
    pub fn refinement_win_rate(&self) -> f64 {
        mean(
            self.pairs
                .iter()
                .map(|p| (p.refined.epe < p.initial.epe) as u8 as f64),
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub cases: Vec<CaseResult>,
}

impl BenchmarkResult {
    /// Tab-separated means per case and stage.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "case\tstage\tepe\tnepe\tacc_strict\tacc_relax\toutliers\tmnds\tmedian_gt_displacement\tpairs\n",
        );
        for c in &self.cases {
            for (stage, refined) in [("initial", false), ("refined", true)] {
                let pick = |p: &PairResult| if refined { p.refined } else { p.initial };
                let m = |f: fn(&MetricsReport) -> f64| mean(c.pairs.iter().map(|p| f(&pick(p))));
                let mnds = mean(c.pairs.iter().map(|p| {
                    if refined {
                        p.mnds_refined
                    } else {
                        p.mnds_initial
                    }
                }));
                out.push_str(&format!(
                    "{}\t{stage}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}\n",
                    c.kind.name(),
                    m(|r| r.epe),
                    m(|r| r.nepe),
                    m(|r| r.acc_strict),
                    m(|r| r.acc_relax),
                    m(|r| r.outliers),
                    mnds,
                    c.mean_median_displacement(),
                    c.pairs.len()
                ));
            }
        }
        out
    }
}

/// Trains one model per case on label-free pairs and scores it on held-out
/// pairs before and after refinement.
pub fn run_benchmark(
    cfg: &BenchmarkConfig,
    mut progress: impl FnMut(&str),
) -> Result<BenchmarkResult> {
    let mut cases = Vec::with_capacity(cfg.cases.len());
    let estimate_cfg = EstimateConfig {
        dve: Some(cfg.estimate.dve.unwrap_or_default()),
        ..cfg.estimate
    };
    for (ci, &kind) in cfg.cases.iter().enumerate() {
        let (train_seed, test_seed) = cfg.seeds(ci);
        let train_set: Vec<TrainSample> = pairs(
            kind,
            cfg.settings.train_pairs,
            cfg.n,
            train_seed,
            &cfg.synth,
        )?
        .into_iter()
        .map(|p| TrainSample {
            source: p.source,
            target: p.target,
        })
        .collect();
        let train_cfg = TrainConfig {
            epochs: cfg.settings.epochs,
            seed: cfg.train.seed.wrapping_add(cfg.seed),
            ..cfg.train.clone()
        };
        let outcome = train_with(&train_set, &train_cfg, None, |r| {
            progress(&format!(
                "{} epoch {} loss {:.6}",
                kind.name(),
                r.epoch,
                r.mean_loss
            ))
        })?;
        let mut results = Vec::with_capacity(cfg.settings.test_pairs);
        for pair in pairs(kind, cfg.settings.test_pairs, cfg.n, test_seed, &cfg.synth)? {
            let e = estimate(&outcome.params, &pair.source, &pair.target, &estimate_cfg)?;
            results.push(PairResult {
                initial: evaluate(&e.initial, &pair.flow)?,
                refined: evaluate(&e.flow, &pair.flow)?,
                mnds_initial: nds(&pair.source, &e.initial, DEFAULT_NDS_K)?.mean,
                mnds_refined: nds(&pair.source, &e.flow, DEFAULT_NDS_K)?.mean,
                median_displacement: median_displacement(&pair.flow),
            });
        }
        progress(&format!(
            "{} evaluated {} pairs",
            kind.name(),
            results.len()
        ));
        cases.push(CaseResult {
            kind,
            model: outcome.params,
            log: outcome.log,
            pairs: results,
        });
    }
    Ok(BenchmarkResult { cases })
}
