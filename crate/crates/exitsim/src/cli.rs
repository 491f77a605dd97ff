//! Command-line interface. One subcommand per pipeline stage plus `demo`
//! and `validate`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use exitsim_core::engine::{run_oracle, run_plain, run_with_predictor, Environment};
use exitsim_core::optimizer::{adapt, evaluate_grid};
use exitsim_core::predictor::predict_scores;
use exitsim_core::{Thresholds, TraceSet};
use serde_json::json;

use crate::checkpoint;
use crate::config::{ExperimentConfig, CONFIG_ENV};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pipeline;
use crate::tables::{self, FrontierRow};
use crate::traceio;

#[derive(Debug, Parser)]
#[command(name = "exitsim", version, about = "Trace-driven early-exit inference simulator")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test datasets.
    GenData(GenData),
    /// Train the toy multi-exit network.
    TrainEe(TrainEe),
    /// Record per-exit confidences and predictions as a trace file.
    EmitTraces(EmitTraces),
    /// Train the exit predictor on a trace file.
    TrainEp(TrainEp),
    /// Choose prediction thresholds under the last-exit budget.
    SelectGamma(SelectGamma),
    /// Evaluate exit policies on a trace file.
    Evaluate(Evaluate),
    /// Grid-search thresholds for one bandwidth.
    Optimize(Optimize),
    /// Grid-search thresholds for every sweep bandwidth.
    Sweep(Sweep),
    /// Fit threshold regressors to sweep results.
    FitAdapt(FitAdapt),
    /// Run the whole pipeline and write every artifact.
    Demo(Demo),
    /// Check that files parse and satisfy their invariants.
    Validate(Validate),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainEe {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmitTraces {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Added to the sample index to form trace ids.
    #[arg(long, default_value_t = 0)]
    pub id_offset: u64,
}

#[derive(Debug, Args)]
pub struct TrainEp {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectGamma {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub predictor: PathBuf,
    #[arg(long)]
    pub step: Option<f64>,
    /// Allowed increase of the last-exit share.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Plain,
    Predictor,
    Oracle,
    All,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Link rate in Mbit/s; enables latency columns.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Per-sample decisions CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Optimize {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub predictor: PathBuf,
    /// Mbit/s.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Every evaluated grid point.
    #[arg(long)]
    pub frontier: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub predictor: PathBuf,
    /// Mbit/s.
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitAdapt {
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Print adapted thresholds at these rates, Mbit/s.
    #[arg(long, value_delimiter = ',')]
    pub at: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct Demo {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Validate {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
    .map_err(|e| match e {
        Error::Io { .. } | Error::Parse { .. } => Error::Usage(e.to_string()),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit_out(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fsutil::write_atomic(p, text.as_bytes()),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn mbps(v: f64) -> f64 {
    v * 1e6
}

fn env_at(cfg: &ExperimentConfig, bandwidth_mbps: Option<f64>) -> Result<Environment> {
    let env = cfg.environment()?;
    Ok(match bandwidth_mbps {
        Some(b) => env.with_bandwidth(mbps(b))?,
        None => env,
    })
}

fn scores_for(path: &Path, set: &TraceSet) -> Result<(exitsim_core::ExitPredictor, Vec<Vec<f64>>)> {
    let ep = checkpoint::load_predictor(path)?;
    let scores = predict_scores(&ep, set)?;
    Ok((ep, scores))
}

fn check_classes(cfg: &ExperimentConfig, set: &TraceSet) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.data.num_classes = set.topology().num_classes;
    cfg
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData(a) => {
            if let Some(n) = a.train_samples {
                cfg.data.train_samples = n;
            }
            if let Some(n) = a.test_samples {
                cfg.data.test_samples = n;
            }
            if let Some(p) = a.classes {
                cfg.data.num_classes = p;
            }
            cfg.validate()?;
            let (train, test) = pipeline::generate(&cfg)?;
            checkpoint::save_dataset(&a.train, &train)?;
            checkpoint::save_dataset(&a.test, &test)?;
        }
        Command::TrainEe(a) => {
            if let Some(e) = a.epochs {
                cfg.backbone_training.epochs = e;
                cfg.backbone_training.end_epoch = cfg.backbone_training.end_epoch.min(e);
            }
            let data = checkpoint::load_dataset(&a.data)?;
            cfg.data.num_classes = data.num_classes;
            cfg.data.input_dim = data.input_dim();
            cfg.validate()?;
            let net = pipeline::train_backbone(&cfg, &data)?;
            checkpoint::save_toynet(&a.out, &net)?;
        }
        Command::EmitTraces(a) => {
            let net = checkpoint::load_toynet(&a.net)?;
            let data = checkpoint::load_dataset(&a.data)?;
            cfg.data.num_classes = net.num_classes();
            let set = pipeline::emit(&cfg, &net, &data, a.id_offset)?;
            traceio::save(&a.out, &set)?;
        }
        Command::TrainEp(a) => {
            if let Some(e) = a.epochs {
                cfg.predictor_training.epochs = e;
                cfg.predictor_training.end_epoch = cfg.predictor_training.end_epoch.min(e);
            }
            let set = traceio::load(&a.trace)?;
            let lambda = a.lambda.clone().unwrap_or_else(|| cfg.predictor.lambda.clone());
            let ep = pipeline::fit_predictor(&cfg, &set, &lambda)?;
            checkpoint::save_predictor(&a.out, &ep)?;
        }
        Command::SelectGamma(a) => {
            if let Some(s) = a.step {
                cfg.predictor.gamma_step = s;
            }
            if let Some(b) = a.budget {
                cfg.predictor.last_exit_budget = b;
            }
            let set = traceio::load(&a.trace)?;
            let ep = checkpoint::load_predictor(&a.predictor)?;
            let choice = pipeline::choose_gamma(&cfg, &ep, &set)?;
            let doc = json!({
                "lambda": ep.lambda(),
                "gamma": choice.gamma,
                "mean_on_device_mflops": choice.mean_on_device_mflops,
                "last_exit_share": choice.last_exit_share,
                "baseline_last_exit_share": choice.baseline_last_exit_share,
                "points_evaluated": choice.points_evaluated,
            });
            emit_out(out, a.out.as_deref(), &format!("{doc}\n"))?;
        }
        Command::Evaluate(a) => evaluate(&cfg, a, out)?,
        Command::Optimize(a) => {
            let set = traceio::load(&a.trace)?;
            let (_, scores) = scores_for(&a.predictor, &set)?;
            let env = env_at(&cfg, a.bandwidth)?;
            let early = set.topology().num_early_exits();
            let search = evaluate_grid(&set, &scores, &env, &cfg.lambda_axes(early), &cfg.gamma_axes(early))?;
            if let Some(p) = &a.frontier {
                fsutil::write_atomic(p, tables::policy_points_csv(&search.frontier).as_bytes())?;
            }
            let best = search.into_result()?;
            emit_out(out, a.out.as_deref(), &tables::policy_points_csv(&[best]))?;
        }
        Command::Sweep(a) => {
            let set = traceio::load(&a.trace)?;
            let (_, scores) = scores_for(&a.predictor, &set)?;
            let bandwidths: Vec<f64> = match &a.bandwidths {
                Some(b) => b.iter().map(|&v| mbps(v)).collect(),
                None => cfg.sweep_bandwidths(),
            };
            let points = pipeline::sweep(&cfg, &set, &scores, &bandwidths)?;
            tables::save_policy_points(&a.out, &points)?;
        }
        Command::FitAdapt(a) => {
            if let Some(p) = a.classes {
                cfg.data.num_classes = p;
            }
            let points = tables::load_policy_points(&a.points)?;
            let regs = pipeline::fit_adapt(&cfg, &points)?;
            checkpoint::save_regressors(&a.out, &regs)?;
            for &b in a.at.as_deref().unwrap_or(&[]) {
                let th = adapt(&regs, mbps(b))?;
                let line = json!({ "bandwidth_mbps": b, "lambda": th.lambda, "gamma": th.gamma });
                emit_out(out, None, &format!("{line}\n"))?;
            }
        }
        Command::Demo(a) => {
            let dir = a.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = pipeline::run_demo(&cfg, &dir)?;
            for f in &outcome.files {
                emit_out(out, None, &format!("{}\n", f.display()))?;
            }
        }
        Command::Validate(a) => {
            for f in &a.files {
                let kind = validate_file(f)?;
                emit_out(out, None, &format!("ok {kind} {}\n", f.display()))?;
            }
        }
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, a: &Evaluate, out: &mut dyn Write) -> Result<()> {
    let set = traceio::load(&a.trace)?;
    let cfg = check_classes(cfg, &set);
    let lambda = a.lambda.clone().unwrap_or_else(|| cfg.predictor.lambda.clone());
    let env = match a.bandwidth {
        Some(b) => Some(env_at(&cfg, Some(b))?),
        None => None,
    };
    let method = a.method.unwrap_or(if a.predictor.is_some() { MethodArg::All } else { MethodArg::Plain });
    let wants_predictor = matches!(method, MethodArg::Predictor | MethodArg::All);
    let scores = match (&a.predictor, wants_predictor) {
        (Some(p), true) => Some(scores_for(p, &set)?.1),
        (None, true) => return Err(Error::Usage("--predictor is required for the predictor policy".into())),
        _ => None,
    };
    let thresholds = match &scores {
        Some(_) => {
            let gamma = a
                .gamma
                .clone()
                .ok_or_else(|| Error::Usage("--gamma is required for the predictor policy".into()))?;
            Some(Thresholds::new(lambda.clone(), gamma)?)
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let env = env.as_ref();
    if matches!(method, MethodArg::Plain | MethodArg::All) {
        let e = run_plain(&set, &lambda, env)?;
        rows.push(FrontierRow { lambda: lambda.clone(), gamma: vec![], report: e.report });
        records = e.records;
    }
    if let (Some(th), Some(s)) = (&thresholds, &scores) {
        let e = run_with_predictor(&set, th, s, env)?;
        rows.push(FrontierRow { lambda: lambda.clone(), gamma: th.gamma.clone(), report: e.report });
        if method == MethodArg::Predictor {
            records = e.records;
        }
    }
    if matches!(method, MethodArg::Oracle | MethodArg::All) {
        let e = run_oracle(&set, &lambda, env)?;
        rows.push(FrontierRow { lambda: lambda.clone(), gamma: vec![], report: e.report });
        if method == MethodArg::Oracle {
            records = e.records;
        }
    }
    if let Some(p) = &a.records {
        fsutil::write_atomic(p, tables::records_csv(&records).as_bytes())?;
    }
    emit_out(out, a.out.as_deref(), &tables::frontier_csv(&rows))
}

/// Parses `path` by its format and returns the artifact kind.
pub fn validate_file(path: &Path) -> Result<&'static str> {
    let text = fsutil::read_to_string(path)?;
    if let Some(format) = checkpoint::peek_format(&text) {
        return Ok(match format.as_str() {
            checkpoint::MLP_FORMAT => checkpoint::mlp_from_str(path, &text).map(|_| "mlp")?,
            checkpoint::TOYNET_FORMAT => checkpoint::toynet_from_str(path, &text).map(|_| "toynet")?,
            checkpoint::PREDICTOR_FORMAT => checkpoint::predictor_from_str(path, &text).map(|_| "predictor")?,
            checkpoint::REGRESSORS_FORMAT => checkpoint::regressors_from_str(path, &text).map(|_| "regressors")?,
            checkpoint::DATASET_FORMAT => checkpoint::dataset_from_str(path, &text).map(|_| "dataset")?,
            other => return Err(Error::parse(path, None, format!("unknown format {other:?}"))),
        });
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "jsonl" => traceio::from_str(path, &text).map(|_| "trace"),
        "toml" => ExperimentConfig::from_toml(path, &text).map(|_| "config"),
        "json" => {
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| Error::parse(path, Some(e.line()), e))?;
            Ok("json")
        }
        "csv" => validate_csv(path, &text),
        _ => Err(Error::parse(path, None, "unrecognized file type")),
    }
}

fn validate_csv(path: &Path, text: &str) -> Result<&'static str> {
    let first = text.lines().next().unwrap_or("");
    if first.starts_with("bandwidth,") {
        let points = tables::policy_points_from_str(path, text)?;
        for p in &points {
            let th = Thresholds::new(p.lambda.clone(), p.gamma.clone()).map_err(|e| Error::invalid(path, None, e))?;
            drop(th);
        }
        return Ok("policy-points");
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| Error::parse(path, Some(1), e))?.len();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, Some(i + 2), e))?;
        if row.len() != width {
            return Err(Error::parse(path, Some(i + 2), "row width differs from header"));
        }
    }
    Ok("table")
}

/// Parses `args`, runs the command and returns the process exit status.
/// Failures are reported as one JSON line on `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let mut rec = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Core(exitsim_core::Error::Infeasible { best }) = &e {
                rec["fastest"] = json!({
                    "bandwidth": best.bandwidth,
                    "lambda": best.lambda,
                    "gamma": best.gamma,
                    "accuracy": best.accuracy,
                    "latency_s": best.latency_s,
                });
            }
            let _ = writeln!(err, "{rec}");
            e.exit_code()
        }
    }
}
