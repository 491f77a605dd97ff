//! Exit-policy execution and cost accounting over a [`TraceSet`].
//!
//! Three policies are supported:
//!
//! * **plain**: every reached exit is computed; a sample terminates at the
//!   first exit whose confidence reaches its threshold (`c_n >= lambda_n`).
//! * **predictor**: exit `n` is computed only when the predictor score
//!   reaches its prediction threshold (`s_n >= gamma_n`); termination needs
//!   both conditions. The predictor itself is charged to every sample.
//! * **oracle**: the terminating exit is the plain policy's, but only that
//!   exit's classifier is computed.
//!
//! Costs are in MFLOPs. Server-side FLOPs count toward the total but never
//! toward latency; the server is assumed fast enough to be negligible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::trace::{validate_lambda, ExitTopology, SampleTrace, Thresholds, TraceSet};

/// Device speed, link rate and latency budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Environment {
    /// FLOP/s.
    pub compute_speed: f64,
    /// bit/s.
    pub bandwidth: f64,
    /// Seconds.
    pub latency_budget: f64,
}

impl Environment {
    pub fn new(compute_speed: f64, bandwidth: f64, latency_budget: f64) -> Result<Self> {
        let env = Environment {
            compute_speed,
            bandwidth,
            latency_budget,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("compute_speed", self.compute_speed),
            ("bandwidth", self.bandwidth),
            ("latency_budget", self.latency_budget),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::invariant(name, None, "must be strictly positive"));
            }
        }
        Ok(())
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        Environment::new(self.compute_speed, bandwidth, self.latency_budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Plain,
    Predictor,
    Oracle,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Predictor => "predictor",
            Method::Oracle => "oracle",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "plain" => Some(Method::Plain),
            "predictor" => Some(Method::Predictor),
            "oracle" => Some(Method::Oracle),
            _ => None,
        }
    }
}

/// Outcome of one sample under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub id: u64,
    /// 1-based; `N` means the sample was sent to the server.
    pub exit_taken: usize,
    /// Which early-exit classifiers ran.
    pub exits_computed: Vec<bool>,
    pub on_device_mflops: f64,
    pub total_mflops: f64,
    pub transmitted: bool,
    pub transmitted_bits: u64,
    pub correct: bool,
    /// Present when an [`Environment`] was supplied.
    pub latency_s: Option<f64>,
}

/// Means and shares over a trace set.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub method: Method,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_on_device_mflops: f64,
    pub mean_total_mflops: f64,
    /// Predictor cost included in `mean_on_device_mflops` (zero unless the
    /// predictor policy ran).
    pub predictor_mflops: f64,
    /// Share of samples leaving at each exit, final exit last.
    pub exit_distribution: Vec<f64>,
    pub mean_latency_s: Option<f64>,
    pub budget_satisfied: Option<bool>,
}

impl AggregateReport {
    /// Share of samples reaching the final exit.
    pub fn last_exit_share(&self) -> f64 {
        *self.exit_distribution.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<DecisionRecord>,
    pub report: AggregateReport,
}

/// How early-exit classifiers are gated.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Gate<'a> {
    All,
    Scores { scores: &'a [f64], gamma: &'a [f64] },
    Oracle,
}

/// Where a sample leaves and what it cost on the device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Walk {
    pub exit: usize,
    pub on_device: f64,
}

/// Walks one sample through the on-device network. `mark(n)` is called for
/// every early exit `n` (0-based) whose classifier runs.
#[inline]
pub(crate) fn walk(
    sample: &SampleTrace,
    topology: &ExitTopology,
    lambda: &[f64],
    gate: Gate<'_>,
    mut mark: impl FnMut(usize),
) -> Walk {
    let early = lambda.len();
    if let Gate::Oracle = gate {
        let target = (0..early).find(|&n| sample.confidences[n] >= lambda[n]);
        let mut cost = 0.0;
        let stop = target.unwrap_or(early - 1);
        for n in 0..=stop {
            cost += topology.segment_flops[n];
        }
        if let Some(n) = target {
            cost += topology.exit_flops[n];
            mark(n);
        }
        return Walk {
            exit: target.map_or(early + 1, |n| n + 1),
            on_device: cost,
        };
    }
    let mut cost = 0.0;
    for n in 0..early {
        cost += topology.segment_flops[n];
        let computed = match gate {
            Gate::Scores { scores, gamma } => scores[n] >= gamma[n],
            _ => true,
        };
        if computed {
            cost += topology.exit_flops[n];
            mark(n);
            if sample.confidences[n] >= lambda[n] {
                return Walk {
                    exit: n + 1,
                    on_device: cost,
                };
            }
        }
    }
    Walk {
        exit: early + 1,
        on_device: cost,
    }
}

/// Per-sample latency: on-device compute time plus transmission time.
pub fn latency_of(record: &DecisionRecord, env: &Environment) -> f64 {
    record.on_device_mflops * 1e6 / env.compute_speed + record.transmitted_bits as f64 / env.bandwidth
}

#[inline]
fn latency_parts(on_device: f64, bits: u64, env: &Environment) -> f64 {
    on_device * 1e6 / env.compute_speed + bits as f64 / env.bandwidth
}

fn check_scores(set: &TraceSet, scores: &[Vec<f64>]) -> Result<()> {
    let early = set.topology().num_early_exits();
    for (i, sample) in set.samples().iter().enumerate() {
        match scores.get(i) {
            None => return Err(Error::MissingScores { id: sample.id }),
            Some(row) if row.len() != early => {
                return Err(Error::invariant(
                    "scores",
                    Some(sample.id),
                    alloc::format!("expected {early} scores, found {}", row.len()),
                ))
            }
            Some(row) if !row.iter().all(|s| (0.0..=1.0).contains(s)) => {
                return Err(Error::invariant("scores", Some(sample.id), "scores must lie in [0, 1]"))
            }
            _ => {}
        }
    }
    Ok(())
}

fn run(
    set: &TraceSet,
    method: Method,
    lambda: &[f64],
    gamma: Option<&[f64]>,
    scores: Option<&[Vec<f64>]>,
    env: Option<&Environment>,
) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::config("trace set is empty"));
    }
    if let Some(env) = env {
        env.validate()?;
    }
    let topology = set.topology();
    let n_exits = topology.num_exits;
    let bits = topology.transmitted_bits();
    let predictor = if method == Method::Predictor {
        topology.predictor_flops
    } else {
        0.0
    };
    let mut records = Vec::with_capacity(set.len());
    for (i, sample) in set.samples().iter().enumerate() {
        let gate = match (method, gamma, scores) {
            (Method::Predictor, Some(gamma), Some(scores)) => Gate::Scores {
                scores: &scores[i],
                gamma,
            },
            (Method::Oracle, ..) => Gate::Oracle,
            _ => Gate::All,
        };
        let mut computed = vec![false; n_exits - 1];
        let w = walk(sample, topology, lambda, gate, |n| computed[n] = true);
        let on_device = w.on_device + predictor;
        let transmitted = w.exit == n_exits;
        let sent = if transmitted { bits } else { 0 };
        records.push(DecisionRecord {
            id: sample.id,
            exit_taken: w.exit,
            exits_computed: computed,
            on_device_mflops: on_device,
            total_mflops: if transmitted {
                on_device + topology.server_flops
            } else {
                on_device
            },
            transmitted,
            transmitted_bits: sent,
            correct: sample.correct_at(w.exit),
            latency_s: env.map(|e| latency_parts(on_device, sent, e)),
        });
    }
    let report = aggregate(method, &records, n_exits, predictor, env);
    Ok(Evaluation { records, report })
}

fn aggregate(
    method: Method,
    records: &[DecisionRecord],
    n_exits: usize,
    predictor: f64,
    env: Option<&Environment>,
) -> AggregateReport {
    let n = records.len() as f64;
    let on_device: Vec<f64> = records.iter().map(|r| r.on_device_mflops).collect();
    let total: Vec<f64> = records.iter().map(|r| r.total_mflops).collect();
    let mut counts = vec![0usize; n_exits];
    for r in records {
        counts[r.exit_taken - 1] += 1;
    }
    let correct = records.iter().filter(|r| r.correct).count();
    let mean_latency = env.map(|_| {
        let lat: Vec<f64> = records.iter().map(|r| r.latency_s.unwrap_or(0.0)).collect();
        math::pairwise_mean(&lat)
    });
    AggregateReport {
        method,
        samples: records.len(),
        accuracy: correct as f64 / n,
        mean_on_device_mflops: math::pairwise_mean(&on_device),
        mean_total_mflops: math::pairwise_mean(&total),
        predictor_mflops: predictor,
        exit_distribution: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_latency_s: mean_latency,
        budget_satisfied: env.zip(mean_latency).map(|(e, l)| l <= e.latency_budget),
    }
}

/// Early exiting without a predictor.
pub fn run_plain(set: &TraceSet, lambda: &[f64], env: Option<&Environment>) -> Result<Evaluation> {
    Error::check_len("lambda", set.topology().num_early_exits(), lambda.len())?;
    validate_lambda(lambda)?;
    run(set, Method::Plain, lambda, None, None, env)
}

/// Early exiting gated by predictor scores; `scores[i]` belongs to sample `i`.
pub fn run_with_predictor(
    set: &TraceSet,
    thresholds: &Thresholds,
    scores: &[Vec<f64>],
    env: Option<&Environment>,
) -> Result<Evaluation> {
    thresholds.check_topology(set.topology())?;
    check_scores(set, scores)?;
    run(
        set,
        Method::Predictor,
        &thresholds.lambda,
        Some(&thresholds.gamma),
        Some(scores),
        env,
    )
}

/// Idealized routing that computes only the terminating exit.
pub fn run_oracle(set: &TraceSet, lambda: &[f64], env: Option<&Environment>) -> Result<Evaluation> {
    Error::check_len("lambda", set.topology().num_early_exits(), lambda.len())?;
    validate_lambda(lambda)?;
    run(set, Method::Oracle, lambda, None, None, env)
}

/// Accuracy, mean on-device cost, mean latency and last-exit share of the
/// predictor policy, without materializing per-sample records. Inputs are
/// assumed validated by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Summary {
    pub accuracy: f64,
    pub mean_on_device: f64,
    pub mean_latency: f64,
    pub last_exit_share: f64,
}

pub(crate) fn summarize_predictor(
    set: &TraceSet,
    lambda: &[f64],
    gamma: &[f64],
    scores: &[Vec<f64>],
    env: Option<&Environment>,
    buf: &mut Vec<f64>,
    lat: &mut Vec<f64>,
) -> Summary {
    let topology = set.topology();
    let n_exits = topology.num_exits;
    let bits = topology.transmitted_bits();
    let ep = topology.predictor_flops;
    buf.clear();
    lat.clear();
    let mut correct = 0usize;
    let mut last = 0usize;
    for (sample, row) in set.samples().iter().zip(scores) {
        let w = walk(sample, topology, lambda, Gate::Scores { scores: row, gamma }, |_| {});
        let on_device = w.on_device + ep;
        let transmitted = w.exit == n_exits;
        if transmitted {
            last += 1;
        }
        if sample.correct_at(w.exit) {
            correct += 1;
        }
        buf.push(on_device);
        if let Some(e) = env {
            lat.push(latency_parts(on_device, if transmitted { bits } else { 0 }, e));
        }
    }
    let n = set.len() as f64;
    Summary {
        accuracy: correct as f64 / n,
        mean_on_device: math::pairwise_mean(buf),
        mean_latency: math::pairwise_mean(lat),
        last_exit_share: last as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::tests::vgg10;
    use alloc::vec;

    /// 10,000 samples with exit shares 66.62% / 19.81% / 13.57% under
    /// lambda = (0.9, 0.9).
    fn golden_set() -> TraceSet {
        let mut samples = Vec::new();
        for i in 0..10_000u64 {
            let conf = if i < 6662 {
                vec![0.95, 0.5, 0.6]
            } else if i < 6662 + 1981 {
                vec![0.5, 0.95, 0.6]
            } else {
                vec![0.5, 0.5, 0.6]
            };
            samples.push(SampleTrace {
                id: i,
                label: 0,
                confidences: conf,
                predicted: vec![0, 0, 0],
                features: None,
            });
        }
        TraceSet::new(vgg10(), samples).unwrap()
    }

    #[test]
    fn golden_plain_costs() {
        let r = run_plain(&golden_set(), &[0.9, 0.9], None).unwrap().report;
        assert!((r.mean_on_device_mflops - 42.44).abs() <= 0.02, "{}", r.mean_on_device_mflops);
        assert!((r.mean_total_mflops - 79.64).abs() <= 0.02, "{}", r.mean_total_mflops);
        assert!((r.exit_distribution[2] - 0.1357).abs() < 1e-12);
    }

    #[test]
    fn golden_oracle_costs() {
        let r = run_oracle(&golden_set(), &[0.9, 0.9], None).unwrap().report;
        assert!((r.mean_on_device_mflops - 34.93).abs() <= 0.02, "{}", r.mean_on_device_mflops);
        assert!((r.mean_total_mflops - 72.13).abs() <= 0.02, "{}", r.mean_total_mflops);
    }

    #[test]
    fn floor_threshold_exits_everything_first() {
        let set = golden_set();
        let r = run_plain(&set, &[0.1, 0.1], None).unwrap().report;
        assert_eq!(r.exit_distribution, vec![1.0, 0.0, 0.0]);
        assert!((r.mean_on_device_mflops - (1.97 + 16.70)).abs() < 1e-9);
        let o = run_oracle(&set, &[0.1, 0.1], None).unwrap().report;
        assert_eq!(o.mean_on_device_mflops, r.mean_on_device_mflops);
    }

    #[test]
    fn unreachable_threshold_transmits_everything() {
        let set = golden_set();
        let r = run_plain(&set, &[0.999, 0.999], None).unwrap();
        assert!(r.records.iter().all(|d| d.transmitted && d.exit_taken == 3));
        let full = 1.97 + 16.70 + 56.98 + 14.23;
        assert!((r.report.mean_on_device_mflops - full).abs() < 1e-9);
    }

    #[test]
    fn zero_gamma_adds_exactly_the_predictor() {
        let set = golden_set();
        let scores = vec![vec![0.3, 0.7]; set.len()];
        let th = Thresholds::without_skipping(vec![0.9, 0.9]).unwrap();
        let p = run_with_predictor(&set, &th, &scores, None).unwrap();
        let q = run_plain(&set, &th.lambda, None).unwrap();
        for (a, b) in p.records.iter().zip(&q.records) {
            assert_eq!(a.exit_taken, b.exit_taken);
            assert_eq!(a.on_device_mflops, b.on_device_mflops + 0.40);
        }
    }

    #[test]
    fn all_skip_sends_everything_to_the_server() {
        let set = golden_set();
        let scores = vec![vec![0.99, 0.99]; set.len()];
        let th = Thresholds::new(vec![0.9, 0.9], vec![1.0, 1.0]).unwrap();
        let r = run_with_predictor(&set, &th, &scores, None).unwrap().report;
        assert_eq!(r.exit_distribution, vec![0.0, 0.0, 1.0]);
        assert!((r.mean_on_device_mflops - (0.40 + 1.97 + 56.98)).abs() < 1e-9);
    }

    #[test]
    fn missing_scores_name_the_sample() {
        let set = golden_set();
        let scores = vec![vec![0.5, 0.5]; 10];
        let th = Thresholds::without_skipping(vec![0.9, 0.9]).unwrap();
        assert_eq!(
            run_with_predictor(&set, &th, &scores, None).unwrap_err(),
            Error::MissingScores { id: 10 }
        );
    }

    #[test]
    fn threshold_length_mismatch() {
        assert!(run_plain(&golden_set(), &[0.9], None).is_err());
        assert!(run_oracle(&golden_set(), &[0.9, 0.9, 0.9], None).is_err());
    }

    #[test]
    fn latency_examples() {
        let env = Environment::new(3.62e9, 1e6, 0.03).unwrap();
        let rec = DecisionRecord {
            id: 0,
            exit_taken: 1,
            exits_computed: vec![true, false],
            on_device_mflops: 42.44,
            total_mflops: 42.44,
            transmitted: false,
            transmitted_bits: 0,
            correct: true,
            latency_s: None,
        };
        let l = latency_of(&rec, &env);
        assert!((l - 0.011_72).abs() < 0.000_01, "{l}");
        let fast = Environment::new(3.62e9, 1e12, 0.03).unwrap();
        let sent = DecisionRecord {
            transmitted: true,
            transmitted_bits: 16_384,
            exit_taken: 3,
            ..rec
        };
        assert!((latency_of(&sent, &fast) - l).abs() < 1e-6);
    }

    #[test]
    fn environment_rejects_non_positive_values() {
        assert!(Environment::new(0.0, 1.0, 1.0).is_err());
        assert!(Environment::new(1.0, -1.0, 1.0).is_err());
        assert!(Environment::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn budget_flag_follows_mean_latency() {
        let set = golden_set();
        let env = Environment::new(3.62e9, 1e6, 0.03).unwrap();
        let r = run_plain(&set, &[0.9, 0.9], Some(&env)).unwrap().report;
        let lat = r.mean_latency_s.unwrap();
        assert_eq!(r.budget_satisfied, Some(lat <= 0.03));
        let tight = Environment::new(3.62e9, 1e6, lat * 0.5).unwrap();
        assert_eq!(run_plain(&set, &[0.9, 0.9], Some(&tight)).unwrap().report.budget_satisfied, Some(false));
    }
}
