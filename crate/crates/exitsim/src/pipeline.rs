//! Pipeline stages shared by the CLI subcommands and `demo`.

use std::path::{Path, PathBuf};

use exitsim_core::engine::{run_oracle, run_plain, run_with_predictor, AggregateReport, Environment};
use exitsim_core::optimizer::{adapt, fit_regressors, sweep_bandwidths, PolicyPoint, ThresholdRegressor};
use exitsim_core::predictor::{predict_scores, select_gamma, train_predictor, GammaChoice, PredictorSpec};
use exitsim_core::zoo::{emit_traces, generate_dataset, train_toy_net, Dataset, EmitConfig, ToyEarlyExitNet};
use exitsim_core::{ExitPredictor, Thresholds, TraceSet};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::fsutil;
use crate::tables::{self, FrontierRow};
use crate::traceio;

/// Train and test splits of the synthetic task.
pub fn generate(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = generate_dataset(&cfg.synth_spec())?;
    Ok(data.split_at(cfg.data.train_samples))
}

pub fn train_backbone(cfg: &ExperimentConfig, train: &Dataset) -> Result<ToyEarlyExitNet> {
    let net = ToyEarlyExitNet::new(&cfg.net_spec(), cfg.network.exit_weights.clone())?;
    Ok(train_toy_net(&net, train, &cfg.backbone_train())?.net)
}

pub fn emit(cfg: &ExperimentConfig, net: &ToyEarlyExitNet, data: &Dataset, id_offset: u64) -> Result<TraceSet> {
    let emit_cfg = EmitConfig {
        id_offset,
        compression_flip: cfg.data.compression_flip,
        include_features: true,
        seed: cfg.seed.wrapping_add(4),
    };
    Ok(emit_traces(net, data, &cfg.topology()?, &emit_cfg)?)
}

/// Traces for fitting the predictor and traces for choosing gamma.
pub fn gamma_split(cfg: &ExperimentConfig, train: &TraceSet, test: &TraceSet) -> Result<(TraceSet, TraceSet)> {
    if cfg.predictor.select_on_test {
        Ok((train.clone(), test.clone()))
    } else {
        Ok(train.split_holdout(cfg.predictor.holdout_fraction)?)
    }
}

pub fn fit_predictor(cfg: &ExperimentConfig, set: &TraceSet, lambda: &[f64]) -> Result<ExitPredictor> {
    let spec = PredictorSpec {
        hidden: cfg.predictor.hidden,
        predictor_flops: set.topology().predictor_flops,
        seed: cfg.seed.wrapping_add(2),
    };
    Ok(train_predictor(set, lambda, &spec, &cfg.predictor_train())?.predictor)
}

pub fn choose_gamma(cfg: &ExperimentConfig, ep: &ExitPredictor, set: &TraceSet) -> Result<GammaChoice> {
    let scores = predict_scores(ep, set)?;
    Ok(select_gamma(
        set,
        &scores,
        ep.lambda(),
        cfg.predictor.gamma_step,
        cfg.predictor.last_exit_budget,
    )?)
}

/// A predictor trained for one threshold setting with its chosen gamma.
#[derive(Debug, Clone)]
pub struct PredictorRun {
    pub predictor: ExitPredictor,
    pub gamma: GammaChoice,
}

pub fn predictor_run(cfg: &ExperimentConfig, train: &TraceSet, test: &TraceSet, lambda: &[f64]) -> Result<PredictorRun> {
    let (fit, select) = gamma_split(cfg, train, test)?;
    let predictor = fit_predictor(cfg, &fit, lambda)?;
    let gamma = choose_gamma(cfg, &predictor, &select)?;
    Ok(PredictorRun { predictor, gamma })
}

/// Plain, predictor-aided and oracle rows at one threshold setting.
pub fn compare(
    set: &TraceSet,
    thresholds: &Thresholds,
    scores: &[Vec<f64>],
    env: Option<&Environment>,
) -> Result<Vec<FrontierRow>> {
    let lambda = thresholds.lambda.clone();
    let plain = run_plain(set, &lambda, env)?.report;
    let ep = run_with_predictor(set, thresholds, scores, env)?.report;
    let oracle = run_oracle(set, &lambda, env)?.report;
    Ok(vec![
        FrontierRow { lambda: lambda.clone(), gamma: vec![], report: plain },
        FrontierRow { lambda: lambda.clone(), gamma: thresholds.gamma.clone(), report: ep },
        FrontierRow { lambda, gamma: vec![], report: oracle },
    ])
}

/// Frontier over the configured threshold settings, one predictor each.
pub fn frontier(cfg: &ExperimentConfig, train: &TraceSet, test: &TraceSet) -> Result<Vec<FrontierRow>> {
    let mut rows = Vec::new();
    for lambda in &cfg.predictor.frontier_lambdas {
        let run = predictor_run(cfg, train, test, lambda)?;
        let scores = predict_scores(&run.predictor, test)?;
        let th = Thresholds::new(lambda.clone(), run.gamma.gamma.clone())?;
        rows.extend(compare(test, &th, &scores, None)?);
    }
    Ok(rows)
}

pub fn sweep(cfg: &ExperimentConfig, set: &TraceSet, scores: &[Vec<f64>], bandwidths: &[f64]) -> Result<Vec<PolicyPoint>> {
    let early = set.topology().num_early_exits();
    Ok(sweep_bandwidths(
        set,
        scores,
        &cfg.environment()?,
        bandwidths,
        &cfg.lambda_axes(early),
        &cfg.gamma_axes(early),
    )?)
}

pub fn fit_adapt(cfg: &ExperimentConfig, points: &[PolicyPoint]) -> Result<Vec<ThresholdRegressor>> {
    Ok(fit_regressors(
        points,
        &cfg.intervals(),
        cfg.data.num_classes,
        &cfg.regressor_config(),
    )?)
}

/// Re-evaluates the adapted thresholds at each bandwidth.
pub fn adapted_points(
    cfg: &ExperimentConfig,
    set: &TraceSet,
    scores: &[Vec<f64>],
    regressors: &[ThresholdRegressor],
    bandwidths: &[f64],
) -> Result<Vec<PolicyPoint>> {
    let template = cfg.environment()?;
    bandwidths
        .iter()
        .map(|&bw| {
            let env = template.with_bandwidth(bw)?;
            let th = adapt(regressors, bw)?;
            let r = run_with_predictor(set, &th, scores, Some(&env))?.report;
            let latency = r.mean_latency_s.unwrap_or(f64::INFINITY);
            Ok(PolicyPoint {
                bandwidth: bw,
                lambda: th.lambda,
                gamma: th.gamma,
                accuracy: r.accuracy,
                latency_s: latency,
                mean_on_device_mflops: r.mean_on_device_mflops,
                feasible: latency <= env.latency_budget,
            })
        })
        .collect()
}

pub fn report_json(r: &AggregateReport) -> Value {
    json!({
        "method": r.method.tag(),
        "samples": r.samples,
        "accuracy": r.accuracy,
        "mean_on_device_mflops": r.mean_on_device_mflops,
        "predictor_mflops": r.predictor_mflops,
        "mean_total_mflops": r.mean_total_mflops,
        "exit_distribution": r.exit_distribution,
        "mean_latency_s": r.mean_latency_s,
        "budget_satisfied": r.budget_satisfied,
    })
}

fn write_text(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fsutil::write_atomic(&path, text.as_bytes())?;
    files.push(path);
    Ok(())
}

/// Artifacts and headline numbers of a demo run.
#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub files: Vec<PathBuf>,
    pub plain: AggregateReport,
    pub predictor: AggregateReport,
    pub oracle: AggregateReport,
    pub sweep: Vec<PolicyPoint>,
    pub adapted: Vec<PolicyPoint>,
}

/// Runs every stage and writes all artifacts under `out_dir`.
pub fn run_demo(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DemoOutcome> {
    cfg.validate()?;
    let mut files = Vec::new();
    write_text(out_dir, "config.toml", &cfg.to_toml(), &mut files)?;

    let (train_data, test_data) = generate(cfg)?;
    write_text(out_dir, "train-data.json", &checkpoint::dataset_to_string(&train_data), &mut files)?;
    write_text(out_dir, "test-data.json", &checkpoint::dataset_to_string(&test_data), &mut files)?;

    let net = train_backbone(cfg, &train_data)?;
    write_text(out_dir, "backbone.json", &checkpoint::toynet_to_string(&net), &mut files)?;

    let train = emit(cfg, &net, &train_data, 0)?;
    let test = emit(cfg, &net, &test_data, train_data.len() as u64)?;
    write_text(out_dir, "train-traces.jsonl", &traceio::to_string(&train), &mut files)?;
    write_text(out_dir, "test-traces.jsonl", &traceio::to_string(&test), &mut files)?;

    let lambda = cfg.predictor.lambda.clone();
    let run = predictor_run(cfg, &train, &test, &lambda)?;
    write_text(out_dir, "predictor.json", &checkpoint::predictor_to_string(&run.predictor), &mut files)?;
    let scores = predict_scores(&run.predictor, &test)?;
    let th = Thresholds::new(lambda.clone(), run.gamma.gamma.clone())?;
    let env = cfg.environment()?;
    let rows = compare(&test, &th, &scores, Some(&env))?;
    let (plain, predictor, oracle) = (rows[0].report.clone(), rows[1].report.clone(), rows[2].report.clone());

    let mut front = frontier(cfg, &train, &test)?;
    front.extend(rows);
    write_text(out_dir, "frontier.csv", &tables::frontier_csv(&front), &mut files)?;

    let bandwidths = cfg.sweep_bandwidths();
    let sweep = sweep(cfg, &test, &scores, &bandwidths)?;
    write_text(out_dir, "sweep.csv", &tables::policy_points_csv(&sweep), &mut files)?;

    let regressors = fit_adapt(cfg, &sweep)?;
    write_text(out_dir, "regressors.json", &checkpoint::regressors_to_string(&regressors), &mut files)?;
    let adapted = adapted_points(cfg, &test, &scores, &regressors, &bandwidths)?;
    write_text(out_dir, "adapted.csv", &tables::policy_points_csv(&adapted), &mut files)?;

    let summary = json!({
        "seed": cfg.seed,
        "lambda": lambda,
        "gamma": run.gamma.gamma,
        "gamma_last_exit_share": run.gamma.last_exit_share,
        "gamma_baseline_last_exit_share": run.gamma.baseline_last_exit_share,
        "bandwidth_bps": env.bandwidth,
        "plain": report_json(&plain),
        "predictor": report_json(&predictor),
        "oracle": report_json(&oracle),
        "regressor_fit_error": regressors.iter().map(|r| r.fit_error).collect::<Vec<_>>(),
        "sweep_feasible": sweep.iter().filter(|p| p.feasible).count(),
        "adapted_feasible": adapted.iter().filter(|p| p.feasible).count(),
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_text(out_dir, "report.json", &text, &mut files)?;

    Ok(DemoOutcome {
        files,
        plain,
        predictor,
        oracle,
        sweep,
        adapted,
    })
}
