//! Argument definitions and command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ffe_flow::features::ModelParams;
use ffe_flow::metrics::{evaluate, nds};
use ffe_flow::pipeline::estimate;
use ffe_flow::synth::CaseKind;
use ffe_flow::trainer::train_with;

use crate::benchmark::{run_benchmark, BenchmarkConfig};
use crate::config::RunConfig;
use crate::format::{encode_flow, load_flow, load_pair, save_pair, write_atomic};
use crate::gradcheck::{run_grad_suite, GradSuiteConfig};
use crate::synth::{pairs, record};
use crate::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "ffe",
    version,
    about = "Self-supervised particle flow estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic frame pairs with ground truth.
    Synth(SynthArgs),
    /// Train a model on frame pairs; ground truth in the files is ignored.
    Train(TrainArgs),
    /// Estimate the flow of one frame pair.
    Estimate(EstimateArgs),
    /// Score a flow file against a pair's ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of all gradients.
    GradCheck(GradCheckArgs),
    /// Synthesise, train, estimate and score over all flow cases.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// uniform, rotation, beltrami or all.
    #[arg(long, default_value = "all")]
    pub case: String,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write FFP1 binary files instead of text.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pair files, or directories whose pair files are all used.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-epoch JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    #[arg(long)]
    pub lambda_div: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pair: PathBuf,
    /// Flow file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip test-time refinement.
    #[arg(long)]
    pub no_dve: bool,
    #[arg(long)]
    pub dve_steps: Option<usize>,
    /// Refinement objective per step as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Metrics record, written when the pair has ground truth.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pair: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long, default_value_t = ffe_flow::metrics::DEFAULT_NDS_K)]
    pub nds_k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for the table and the trained models.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of uniform, rotation, beltrami.
    #[arg(long)]
    pub cases: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub train_pairs: Option<usize>,
    #[arg(long)]
    pub test_pairs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

fn parse_cases(s: &str) -> Result<Vec<CaseKind>> {
    if s == "all" {
        return Ok(CaseKind::ALL.to_vec());
    }
    s.split(',')
        .map(|c| {
            CaseKind::parse(c.trim()).ok_or_else(|| CliError::Usage(format!("unknown case {c:?}")))
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.common.config.as_deref())?;
    let cases = parse_cases(&a.case)?;
    let n = a.n.unwrap_or(cfg.synth.n);
    let seed = a.common.seed.unwrap_or(0);
    let ext = if a.binary { "ffb" } else { "ffp" };
    let mut records = Vec::new();
    for kind in cases {
        for (i, pair) in pairs(kind, a.count, n, seed, &cfg.synth)?
            .into_iter()
            .enumerate()
        {
            let s = seed.wrapping_add(i as u64);
            records.push((
                a.out.join(format!("{}_{i:04}.{ext}", kind.name())),
                record(kind, s, pair),
            ));
        }
    }
    create_dir(&a.out)?;
    for (path, rec) in &records {
        save_pair(rec, path)?;
    }
    println!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

/// Pair files named directly, plus the `.ffp`/`.ffb` files of directories
/// in name order.
fn collect_pair_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|source| CliError::Read {
                path: p.clone(),
                source,
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    matches!(
                        f.extension().and_then(|e| e.to_str()),
                        Some("ffp") | Some("ffb")
                    )
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no pair files found".into()));
    }
    Ok(files)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?.train;
    let t = &mut cfg;
    if let Some(s) = a.common.seed {
        t.seed = s;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.data_fraction {
        t.data_fraction = v;
    }
    if let Some(v) = a.lambda_smooth {
        t.loss.lambda_smooth = v;
    }
    if let Some(v) = a.lambda_div {
        t.loss.lambda_div = v;
    }
    cfg.validate()?;
    let samples = collect_pair_files(&a.data)?
        .iter()
        .map(|f| load_pair(f).map(|r| r.training_sample()))
        .collect::<Result<Vec<_>>>()?;
    let init = a.init.as_deref().map(load_model).transpose()?;
    if let Some(p) = &init {
        cfg.features = p.config.clone();
    }
    let mut lines = String::new();
    let outcome = train_with(&samples, &cfg, init, |r| {
        let json = r.to_json();
        eprintln!("{json}");
        lines.push_str(&json);
        lines.push('\n');
    })?;
    let mut buf = Vec::new();
    outcome.params.write_to(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    if let Some(log) = &a.log {
        write_atomic(log, lines.as_bytes())?;
    }
    Ok(())
}

fn estimate_cmd(a: EstimateArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.common.config.as_deref())?.estimate;
    if a.no_dve {
        cfg.dve = None;
    } else if let Some(steps) = a.dve_steps {
        cfg.dve = Some(ffe_flow::dve::DveConfig {
            steps,
            ..cfg.dve.unwrap_or_default()
        });
    }
    let params = load_model(&a.model)?;
    let pair = load_pair(&a.pair)?;
    let e = estimate(&params, &pair.source, &pair.target, &cfg)?;
    let report = pair
        .ground_truth
        .as_ref()
        .map(|gt| evaluate(&e.flow, gt))
        .transpose()?;
    write_atomic(&a.out, encode_flow(&e.flow, &e.confidence).as_bytes())?;
    if let Some(path) = &a.trace {
        let text: String = e
            .trace
            .iter()
            .flat_map(|t| t.objective.iter().enumerate())
            .map(|(step, v)| format!("{}\n", serde_json::json!({ "step": step, "objective": v })))
            .collect();
        write_atomic(path, text.as_bytes())?;
    }
    if let Some(r) = report {
        println!("{}", r.to_kv());
        if let Some(path) = &a.metrics {
            write_atomic(path, format!("{}\n", r.to_kv()).as_bytes())?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let (flow, _) = load_flow(&a.flow)?;
    if flow.len() != pair.len() {
        return Err(CliError::Usage(format!(
            "flow has {} rows but the pair has {} particles",
            flow.len(),
            pair.len()
        )));
    }
    let mnds = nds(&pair.source, &flow, a.nds_k)?.mean;
    match &pair.ground_truth {
        Some(gt) => {
            let r = evaluate(&flow, gt)?;
            if a.json {
                let mut v: serde_json::Value =
                    serde_json::from_str(&r.to_json()).expect("valid JSON");
                v["mnds"] = serde_json::json!(mnds);
                println!("{v}");
            } else {
                println!("{} mnds={mnds:.17e}", r.to_kv());
            }
        }
        None if a.json => println!("{}", serde_json::json!({ "mnds": mnds })),
        None => println!("mnds={mnds:.17e}"),
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let rows = run_grad_suite(&GradSuiteConfig {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradSuiteConfig::default()
    })?;
    for r in &rows {
        println!("{}", r.line());
    }
    if rows.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::Failed("gradient check failed".into()))
    }
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let run = RunConfig::load_or_default(a.common.config.as_deref())?;
    let mut cfg = BenchmarkConfig::from_run(&run, a.common.seed.unwrap_or(0));
    if let Some(c) = &a.cases {
        cfg.cases = parse_cases(c)?;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(v) = a.train_pairs {
        cfg.settings.train_pairs = v;
    }
    if let Some(v) = a.test_pairs {
        cfg.settings.test_pairs = v;
    }
    if let Some(v) = a.epochs {
        cfg.settings.epochs = v;
    }
    cfg.train.validate()?;
    let result = run_benchmark(&cfg, |m| log::info!("{m}"))?;
    let table = result.table();
    create_dir(&a.out)?;
    for c in &result.cases {
        let mut buf = Vec::new();
        c.model.write_to(&mut buf)?;
        write_atomic(&a.out.join(format!("model_{}.ffe", c.kind.name())), &buf)?;
    }
    write_atomic(&a.out.join("benchmark.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
