//! `key = value` configuration files with `[section]` headers.
//!
//! Sections: `train`, `features`, `loss`, `ot`, `dve`, `synth`, `benchmark`.
//! Keys in `ot` apply to both the training and the estimation solver except
//! `train_iters`, which sets the unrolled iteration count used in training.

use std::path::Path;

use ffe_core::GridPlacement;
use ffe_flow::dve::DveConfig;
use ffe_flow::features::Backbone;
use ffe_flow::losses::SplatMode;
use ffe_flow::pipeline::EstimateConfig;
use ffe_flow::trainer::TrainConfig;
use ffe_flow::transport::{OTConfig, WeightMode};

use crate::error::{CliError, FormatError, Location, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub n: usize,
    pub dt_factor: f64,
    pub rk4_substeps: usize,
    pub nu: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n: 512,
            dt_factor: 2.0,
            rk4_substeps: 16,
            nu: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSettings {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub epochs: usize,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            train_pairs: 20,
            test_pairs: 10,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub estimate: EstimateConfig,
    pub synth: SynthSettings,
    pub benchmark: BenchmarkSettings,
}

fn value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn set_ot(ot: &mut OTConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "epsilon" => ot.epsilon = value(v)?,
        "lambda" => ot.lambda = value(v)?,
        "top_l" => ot.top_l = value(v)?,
        "relaxation" => ot.relaxation = value(v)?,
        "translation_step" => ot.translation_step = boolean(v)?,
        "weight_mode" => {
            ot.weight_mode = match v {
                "plan_mass" => WeightMode::PlanMass,
                "exp_plan" => WeightMode::ExpPlan,
                _ => return Err(format!("unknown weight mode {v:?}")),
            }
        }
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

impl RunConfig {
    /// Applies one `key = value` of `section`.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match (section, key) {
            ("train", "batch_size") => t.batch_size = value(v)?,
            ("train", "epochs") => t.epochs = value(v)?,
            ("train", "learning_rate") => t.learning_rate = value(v)?,
            ("train", "data_fraction") => t.data_fraction = value(v)?,
            ("train", "seed") => t.seed = value(v)?,

            ("features", "backbone") => {
                t.features.backbone = match v {
                    "graph" => Backbone::Graph,
                    "pointwise" => Backbone::Pointwise,
                    _ => return Err(format!("unknown backbone {v:?}")),
                }
            }
            ("features", "static_widths") => {
                t.features.static_widths = v
                    .split(',')
                    .map(|w| value(w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            ("features", "dynamic_width") => t.features.dynamic_width = value(v)?,
            ("features", "embed_dim") => t.features.embed_dim = value(v)?,
            ("features", "k") => t.features.k = value(v)?,
            ("features", "leaky_slope") => t.features.leaky_slope = value(v)?,
            ("features", "use_descriptor") => t.features.use_descriptor = boolean(v)?,
            ("features", "dropout") => t.features.dropout = value(v)?,

            ("loss", "lambda_conf") => t.loss.lambda_conf = value(v)?,
            ("loss", "lambda_smooth") => t.loss.lambda_smooth = value(v)?,
            ("loss", "lambda_div") => t.loss.lambda_div = value(v)?,
            ("loss", "smooth_k") => t.loss.smooth_k = value(v)?,
            ("loss", "div_k") => t.loss.div_k = value(v)?,
            ("loss", "eps_splat") => t.loss.eps_splat = value(v)?,
            ("loss", "grid_g") => t.loss.grid_g = value(v)?,
            ("loss", "grid_margin") => t.loss.grid_margin = value(v)?,
            ("loss", "splat_mode") => {
                t.loss.splat_mode = match v {
                    "normalized" => SplatMode::Normalized,
                    "as_written" => SplatMode::AsWritten,
                    _ => return Err(format!("unknown splat mode {v:?}")),
                }
            }
            ("loss", "grid_placement") => {
                t.loss.grid_placement = match v {
                    "enclosing" => GridPlacement::Enclosing,
                    "stencil_inset" => GridPlacement::StencilInset,
                    _ => return Err(format!("unknown grid placement {v:?}")),
                }
            }

            ("ot", "sinkhorn_iters") => self.estimate.ot.sinkhorn_iters = value(v)?,
            ("ot", "train_iters") => t.ot.sinkhorn_iters = value(v)?,
            ("ot", "newton_after") => {
                self.estimate.ot.newton_after = match v {
                    "none" => None,
                    _ => Some(value(v)?),
                }
            }
            ("ot", _) => {
                set_ot(&mut t.ot, key, v)?;
                set_ot(&mut self.estimate.ot, key, v)?;
            }

            ("dve", "enabled") => {
                self.estimate.dve = if boolean(v)? {
                    Some(self.estimate.dve.unwrap_or_default())
                } else {
                    None
                }
            }
            ("dve", _) => {
                let d = self.estimate.dve.get_or_insert_with(DveConfig::default);
                match key {
                    "steps" => d.steps = value(v)?,
                    "learning_rate" => d.learning_rate = value(v)?,
                    "beta1" => d.beta1 = value(v)?,
                    "beta2" => d.beta2 = value(v)?,
                    "eps" => d.eps = value(v)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
            }

            ("synth", "n") => self.synth.n = value(v)?,
            ("synth", "dt_factor") => self.synth.dt_factor = value(v)?,
            ("synth", "rk4_substeps") => self.synth.rk4_substeps = value(v)?,
            ("synth", "nu") => self.synth.nu = value(v)?,

            ("benchmark", "train_pairs") => self.benchmark.train_pairs = value(v)?,
            ("benchmark", "test_pairs") => self.benchmark.test_pairs = value(v)?,
            ("benchmark", "epochs") => self.benchmark.epochs = value(v)?,

            ("", _) => return Err(format!("key {key:?} outside a section")),
            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> std::result::Result<Self, FormatError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let at = Location::Line(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Config {
                at,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(&section, k.trim(), v.trim())
                .map_err(|message| FormatError::Config { at, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|source| CliError::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Defaults, or the file's values when a path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
