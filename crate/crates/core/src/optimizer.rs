//! Latency-constrained threshold optimization and bandwidth adaptation.
//!
//! [`grid_search`] maximizes accuracy over a grid of confidence and
//! prediction thresholds subject to a mean-latency budget, with the
//! predictor's scores held fixed. [`sweep_bandwidths`] repeats the search
//! per link rate; [`fit_regressors`] then learns, per bandwidth interval, a
//! mapping from log-bandwidth to the optimal thresholds so that a single
//! trained predictor can serve every link condition through [`adapt`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{self, Environment};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self, Activation, Layer, LossKind, Mlp, TrainConfig};
use crate::trace::{Thresholds, TraceSet};

/// Default latency budget, seconds.
pub const DEFAULT_LATENCY_BUDGET: f64 = 0.030;

/// Default device speed, FLOP/s.
pub const DEFAULT_COMPUTE_SPEED: f64 = 3.62e9;

/// Default regression intervals in bit/s.
pub const DEFAULT_INTERVALS: [(f64, f64); 3] = [(1e5, 1e6), (1e6, 1e7), (1e7, 1e8)];

/// Regressor outputs stay this far inside the open threshold ranges.
pub const CLAMP_MARGIN: f64 = 1e-6;

/// One evaluated threshold combination.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPoint {
    /// bit/s.
    pub bandwidth: f64,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub accuracy: f64,
    /// Mean latency, seconds.
    pub latency_s: f64,
    pub mean_on_device_mflops: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    /// Best feasible point, or `None` when no point meets the budget.
    pub best: Option<PolicyPoint>,
    /// Lowest-latency point (first in grid order among equals).
    pub fastest: PolicyPoint,
    /// Every evaluated point in grid order (lambda major, gamma minor).
    pub frontier: Vec<PolicyPoint>,
}

impl GridSearch {
    pub fn into_result(self) -> Result<PolicyPoint> {
        match self.best {
            Some(p) => Ok(p),
            None => Err(Error::Infeasible {
                best: alloc::boxed::Box::new(self.fastest),
            }),
        }
    }
}

fn validate_axes(axes: &[Vec<f64>], early: usize, name: &'static str, open: bool) -> Result<()> {
    Error::check_len(name, early, axes.len())?;
    for axis in axes {
        if axis.is_empty() {
            return Err(Error::config(alloc::format!("{name} grid axis is empty")));
        }
        let ok = axis.iter().all(|&v| if open { v > 0.0 && v < 1.0 } else { (0.0..=1.0).contains(&v) });
        if !ok {
            return Err(Error::invariant(name, None, "grid value outside the valid threshold range"));
        }
    }
    Ok(())
}

/// Evaluates every `(lambda, gamma)` grid combination and records the
/// frontier. Accuracy ties go to lower latency, then to the
/// lexicographically smaller `(lambda, gamma)`.
pub fn evaluate_grid(
    set: &TraceSet,
    scores: &[Vec<f64>],
    env: &Environment,
    lambda_axes: &[Vec<f64>],
    gamma_axes: &[Vec<f64>],
) -> Result<GridSearch> {
    env.validate()?;
    let early = set.topology().num_early_exits();
    validate_axes(lambda_axes, early, "lambda", true)?;
    validate_axes(gamma_axes, early, "gamma", false)?;
    if set.is_empty() {
        return Err(Error::config("trace set is empty"));
    }
    // full validation of the score table
    engine::run_with_predictor(
        set,
        &Thresholds::without_skipping(lambda_axes.iter().map(|a| a[0]).collect())?,
        scores,
        None,
    )?;

    let mut frontier = Vec::with_capacity(math::grid_size(lambda_axes) * math::grid_size(gamma_axes));
    let mut buf = Vec::with_capacity(set.len());
    let mut lat = Vec::with_capacity(set.len());
    math::for_each_grid_point(lambda_axes, |lambda| {
        math::for_each_grid_point(gamma_axes, |gamma| {
            let s = engine::summarize_predictor(set, lambda, gamma, scores, Some(env), &mut buf, &mut lat);
            frontier.push(PolicyPoint {
                bandwidth: env.bandwidth,
                lambda: lambda.to_vec(),
                gamma: gamma.to_vec(),
                accuracy: s.accuracy,
                latency_s: s.mean_latency,
                mean_on_device_mflops: s.mean_on_device,
                feasible: s.mean_latency <= env.latency_budget,
            });
        });
    });

    let mut best: Option<usize> = None;
    let mut fastest = 0usize;
    for (i, p) in frontier.iter().enumerate() {
        if p.latency_s < frontier[fastest].latency_s {
            fastest = i;
        }
        if !p.feasible {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let q = &frontier[b];
                p.accuracy > q.accuracy || (p.accuracy == q.accuracy && p.latency_s < q.latency_s)
            }
        };
        if better {
            best = Some(i);
        }
    }
    Ok(GridSearch {
        best: best.map(|i| frontier[i].clone()),
        fastest: frontier[fastest].clone(),
        frontier,
    })
}

/// Best feasible point of the grid, or [`Error::Infeasible`] carrying the
/// fastest point.
pub fn grid_search(
    set: &TraceSet,
    scores: &[Vec<f64>],
    env: &Environment,
    lambda_axes: &[Vec<f64>],
    gamma_axes: &[Vec<f64>],
) -> Result<(PolicyPoint, Vec<PolicyPoint>)> {
    let search = evaluate_grid(set, scores, env, lambda_axes, gamma_axes)?;
    let frontier = search.frontier.clone();
    Ok((search.into_result()?, frontier))
}

/// One grid search per bandwidth, in input order. Where nothing meets the
/// budget the fastest point is returned with `feasible = false`.
pub fn sweep_bandwidths(
    set: &TraceSet,
    scores: &[Vec<f64>],
    template: &Environment,
    bandwidths: &[f64],
    lambda_axes: &[Vec<f64>],
    gamma_axes: &[Vec<f64>],
) -> Result<Vec<PolicyPoint>> {
    bandwidths
        .iter()
        .map(|&bw| {
            let env = template.with_bandwidth(bw)?;
            let search = evaluate_grid(set, scores, &env, lambda_axes, gamma_axes)?;
            Ok(search.best.unwrap_or(search.fastest))
        })
        .collect()
}

/// Training settings for the threshold regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden: 16,
            train: TrainConfig {
                lr_initial: 0.05,
                lr_end: 0.001,
                end_epoch: 6000,
                epochs: 6000,
                batch_size: 64,
                weight_decay: 0.0,
                seed: 0,
            },
        }
    }
}

/// Two-layer regressors mapping log-bandwidth to thresholds over one
/// bandwidth interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRegressor {
    /// Interval bounds, bit/s.
    pub lo: f64,
    pub hi: f64,
    pub training_bandwidths: Vec<f64>,
    pub lambda_net: Mlp,
    pub gamma_net: Mlp,
    pub num_classes: usize,
    /// Largest absolute error on the training targets.
    pub fit_error: f64,
}

impl ThresholdRegressor {
    /// Maps `log10(bandwidth)` affinely onto `[-1, 1]` across the interval.
    pub fn encode(&self, bandwidth: f64) -> f64 {
        encode_bandwidth(self.lo, self.hi, bandwidth)
    }

    pub fn covers(&self, bandwidth: f64) -> bool {
        bandwidth >= self.lo && bandwidth <= self.hi
    }

    /// Raw (unclamped) regressor outputs.
    pub fn raw(&self, bandwidth: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = [self.encode(bandwidth)];
        Ok((self.lambda_net.forward(&x)?, self.gamma_net.forward(&x)?))
    }

    /// Regressor outputs clamped to the valid threshold ranges.
    pub fn thresholds(&self, bandwidth: f64) -> Result<Thresholds> {
        let (lambda, gamma) = self.raw(bandwidth)?;
        let lo = 1.0 / self.num_classes as f64 + CLAMP_MARGIN;
        let hi = 1.0 - CLAMP_MARGIN;
        Thresholds::new(
            lambda.into_iter().map(|v| v.clamp(lo, hi)).collect(),
            gamma.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}

fn encode_bandwidth(lo: f64, hi: f64, bandwidth: f64) -> f64 {
    let (a, b) = (math::log10(lo), math::log10(hi));
    2.0 * (math::log10(bandwidth) - a) / (b - a) - 1.0
}

/// Hidden layer Glorot weights with biases spread over `[-1, 1]` so the
/// ReLU kinks cover the input range; output layer starts at zero.
fn regressor_net(hidden: usize, outputs: usize, seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Layer::glorot(1, hidden, Activation::Relu, &mut rng);
    for b in &mut first.bias {
        *b = rng.gen_range(-1.0..1.0);
    }
    let second = Layer::zeros(hidden, outputs, Activation::Identity);
    Mlp::from_layers(vec![first, second], seed)
}

/// Fits one regressor pair per interval from the points whose bandwidth
/// lies in it (endpoints inclusive).
pub fn fit_regressors(
    points: &[PolicyPoint],
    intervals: &[(f64, f64)],
    num_classes: usize,
    cfg: &RegressorConfig,
) -> Result<Vec<ThresholdRegressor>> {
    if num_classes < 2 {
        return Err(Error::config("num_classes must be at least 2"));
    }
    let early = points.first().map(|p| p.lambda.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(intervals.len());
    for (index, &(lo, hi)) in intervals.iter().enumerate() {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::config(alloc::format!("interval {index} is not a positive range")));
        }
        let members: Vec<&PolicyPoint> = points.iter().filter(|p| p.bandwidth >= lo && p.bandwidth <= hi).collect();
        if members.len() < 2 {
            return Err(Error::EmptyInterval {
                index,
                points: members.len(),
            });
        }
        for p in &members {
            Error::check_len("policy point lambda", early, p.lambda.len())?;
            Error::check_len("policy point gamma", early, p.gamma.len())?;
        }
        let inputs: Vec<Vec<f64>> = members.iter().map(|p| vec![encode_bandwidth(lo, hi, p.bandwidth)]).collect();
        let lambda_t: Vec<Vec<f64>> = members.iter().map(|p| p.lambda.clone()).collect();
        let gamma_t: Vec<Vec<f64>> = members.iter().map(|p| p.gamma.clone()).collect();

        let seed = cfg.train.seed.wrapping_add(2 * index as u64);
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let lambda_net = nn::train(&regressor_net(cfg.hidden, early, seed)?, &inputs, &lambda_t, LossKind::Mse, &train_cfg)?.net;
        let gamma_net = nn::train(
            &regressor_net(cfg.hidden, early, seed + 1)?,
            &inputs,
            &gamma_t,
            LossKind::Mse,
            &TrainConfig {
                seed: seed + 1,
                ..train_cfg
            },
        )?
        .net;

        let mut fit_error: f64 = 0.0;
        for (x, (l, g)) in inputs.iter().zip(lambda_t.iter().zip(&gamma_t)) {
            let pl = lambda_net.forward(x)?;
            let pg = gamma_net.forward(x)?;
            for (a, b) in pl.iter().zip(l).chain(pg.iter().zip(g)) {
                fit_error = fit_error.max((a - b).abs());
            }
        }
        out.push(ThresholdRegressor {
            lo,
            hi,
            training_bandwidths: members.iter().map(|p| p.bandwidth).collect(),
            lambda_net,
            gamma_net,
            num_classes,
            fit_error,
        });
    }
    Ok(out)
}

/// Thresholds for `bandwidth` from the first interval covering it, so a
/// shared endpoint belongs to the lower interval.
pub fn adapt(regressors: &[ThresholdRegressor], bandwidth: f64) -> Result<Thresholds> {
    regressors
        .iter()
        .find(|r| r.covers(bandwidth))
        .ok_or(Error::BandwidthOutOfRange { bandwidth })?
        .thresholds(bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_with_predictor;
    use crate::trace::tests::vgg10;
    use crate::trace::SampleTrace;

    fn random_set(n: usize, seed: u64) -> (TraceSet, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n as u64)
            .map(|id| {
                let label = rng.gen_range(0..10);
                SampleTrace {
                    id,
                    label,
                    confidences: (0..3).map(|_| rng.gen_range(0.1..0.999)).collect(),
                    predicted: (0..3).map(|k| if rng.gen_bool(0.4 + 0.2 * k as f64) { label } else { 0 }).collect(),
                    features: None,
                }
            })
            .collect();
        let scores = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
        (TraceSet::new(vgg10(), samples).unwrap(), scores)
    }

    fn env(bw: f64) -> Environment {
        Environment::new(DEFAULT_COMPUTE_SPEED, bw, DEFAULT_LATENCY_BUDGET).unwrap()
    }

    #[test]
    fn tenth_step_lambda_grid_has_64_combinations() {
        let (set, scores) = random_set(50, 1);
        let axis = math::linspace_step(0.2, 0.9, 0.1);
        let lambda_axes = vec![axis.clone(), axis];
        let gamma_axes = vec![vec![0.0, 0.5], vec![0.0]];
        let search = evaluate_grid(&set, &scores, &env(1e9), &lambda_axes, &gamma_axes).unwrap();
        assert_eq!(search.frontier.len(), 64 * 2);
    }

    #[test]
    fn unlimited_budget_matches_brute_force() {
        let (set, scores) = random_set(200, 2);
        let axis = vec![0.2, 0.4, 0.6, 0.8, 0.95];
        let lambda_axes = vec![axis.clone(), axis.clone()];
        let gamma_axes = vec![vec![0.0, 0.5], vec![0.0, 0.7]];
        let e = Environment::new(DEFAULT_COMPUTE_SPEED, 1e6, 1e9).unwrap();
        let (best, _) = grid_search(&set, &scores, &e, &lambda_axes, &gamma_axes).unwrap();
        let mut want: Option<(f64, f64, Vec<f64>)> = None;
        for &a in &axis {
            for &b in &axis {
                for &g1 in &[0.0, 0.5] {
                    for &g2 in &[0.0, 0.7] {
                        let th = Thresholds::new(vec![a, b], vec![g1, g2]).unwrap();
                        let r = run_with_predictor(&set, &th, &scores, Some(&e)).unwrap().report;
                        let lat = r.mean_latency_s.unwrap();
                        let better = match &want {
                            None => true,
                            Some((acc, l, _)) => r.accuracy > *acc || (r.accuracy == *acc && lat < *l),
                        };
                        if better {
                            want = Some((r.accuracy, lat, vec![a, b, g1, g2]));
                        }
                    }
                }
            }
        }
        let (acc, _, key) = want.unwrap();
        assert_eq!(best.accuracy, acc);
        assert_eq!([best.lambda.clone(), best.gamma.clone()].concat(), key);
    }

    #[test]
    fn impossible_budget_is_infeasible() {
        let (set, scores) = random_set(100, 3);
        let e = Environment::new(DEFAULT_COMPUTE_SPEED, 1e6, 1e-4).unwrap();
        let axes = vec![vec![0.5, 0.9], vec![0.5, 0.9]];
        let err = grid_search(&set, &scores, &e, &axes, &[vec![0.0], vec![0.0]]).unwrap_err();
        match err {
            Error::Infeasible { best } => assert!(!best.feasible && best.latency_s > 1e-4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_keeps_input_order_and_monotone_accuracy() {
        let (set, scores) = random_set(300, 4);
        let axis = math::linspace_step(0.2, 0.9, 0.1);
        let lambda_axes = vec![axis.clone(), axis];
        let gamma_axes = vec![vec![0.0, 0.5, 1.0]; 2];
        let bws = [1e6, 1e5, 3e5];
        let pts = sweep_bandwidths(&set, &scores, &env(1.0), &bws, &lambda_axes, &gamma_axes).unwrap();
        assert_eq!(pts.iter().map(|p| p.bandwidth).collect::<Vec<_>>(), bws.to_vec());
        let doubled: Vec<f64> = bws.iter().map(|b| b * 2.0).collect();
        let pts2 = sweep_bandwidths(&set, &scores, &env(1.0), &doubled, &lambda_axes, &gamma_axes).unwrap();
        for (a, b) in pts.iter().zip(&pts2) {
            if a.feasible {
                assert!(b.feasible && b.accuracy >= a.accuracy);
            }
        }
    }

    fn point(bw: f64, lambda: Vec<f64>, gamma: Vec<f64>) -> PolicyPoint {
        PolicyPoint {
            bandwidth: bw,
            lambda,
            gamma,
            accuracy: 0.0,
            latency_s: 0.0,
            mean_on_device_mflops: 0.0,
            feasible: true,
        }
    }

    #[test]
    fn constant_targets_reproduced_across_interval() {
        let pts: Vec<PolicyPoint> = [1e5, 3e5, 5e5, 7e5, 1e6]
            .iter()
            .map(|&b| point(b, vec![0.8, 0.6], vec![0.3, 0.05]))
            .collect();
        let regs = fit_regressors(&pts, &[(1e5, 1e6)], 10, &RegressorConfig::default()).unwrap();
        for i in 0..=50 {
            let bw = math::exp(math::ln(1e5) + i as f64 / 50.0 * math::ln(10.0));
            let th = adapt(&regs, bw.min(1e6)).unwrap();
            assert!((th.lambda[0] - 0.8).abs() < 5e-3 && (th.lambda[1] - 0.6).abs() < 5e-3);
            assert!((th.gamma[0] - 0.3).abs() < 5e-3 && (th.gamma[1] - 0.05).abs() < 5e-3, "{bw} {th:?} {}", regs[0].fit_error);
        }
    }

    #[test]
    fn five_point_schedule_fits_and_interpolates() {
        let bws = [1e5, 3e5, 5e5, 7e5, 1e6];
        let lam = [0.3, 0.5, 0.6, 0.7, 0.9];
        let gam = [0.6, 0.4, 0.35, 0.2, 0.1];
        let pts: Vec<PolicyPoint> = bws
            .iter()
            .zip(lam.iter().zip(&gam))
            .map(|(&b, (&l, &g))| point(b, vec![l, l - 0.1], vec![g, g]))
            .collect();
        let regs = fit_regressors(&pts, &[(1e5, 1e6)], 10, &RegressorConfig::default()).unwrap();
        assert!(regs[0].fit_error <= 0.05, "{}", regs[0].fit_error);
        for k in 0..4 {
            let mid = math::sqrt(bws[k] * bws[k + 1]);
            let th = adapt(&regs, mid).unwrap();
            let (a, b) = (lam[k].min(lam[k + 1]), lam[k].max(lam[k + 1]));
            assert!(th.lambda[0] >= a - 0.05 && th.lambda[0] <= b + 0.05, "{k}: {}", th.lambda[0]);
            let (a, b) = (gam[k].min(gam[k + 1]), gam[k].max(gam[k + 1]));
            assert!(th.gamma[0] >= a - 0.05 && th.gamma[0] <= b + 0.05, "{k}: {}", th.gamma[0]);
        }
    }

    #[test]
    fn adapt_rejects_uncovered_bandwidth_and_clamps() {
        let pts = vec![point(1e5, vec![0.9, 0.9], vec![1.0, 1.0]), point(1e6, vec![0.9, 0.9], vec![1.0, 1.0])];
        let mut regs = fit_regressors(&pts, &[(1e5, 1e6)], 10, &RegressorConfig::default()).unwrap();
        assert!(matches!(adapt(&regs, 5e6), Err(Error::BandwidthOutOfRange { .. })));
        // push the raw output past one
        let out = regs[0].lambda_net.layers_mut().last_mut().unwrap();
        out.bias.iter_mut().for_each(|b| *b += 5.0);
        let th = adapt(&regs, 5e5).unwrap();
        assert!(th.lambda.iter().all(|&l| l == 1.0 - CLAMP_MARGIN));
        assert!(th.gamma.iter().all(|&g| g <= 1.0));
    }

    #[test]
    fn shared_endpoint_goes_to_lower_interval() {
        let low: Vec<PolicyPoint> = [1e5, 1e6].iter().map(|&b| point(b, vec![0.3, 0.3], vec![0.0, 0.0])).collect();
        let high: Vec<PolicyPoint> = [1e6, 1e7].iter().map(|&b| point(b, vec![0.9, 0.9], vec![0.0, 0.0])).collect();
        // 1e6 appears twice with different targets; the lower fit sees only its own
        let mut pts = low.clone();
        pts.push(high[1].clone());
        let regs = fit_regressors(&pts, &[(1e5, 1e6), (1e6, 1e7)], 10, &RegressorConfig::default()).unwrap();
        assert_eq!(regs[0].training_bandwidths, vec![1e5, 1e6]);
        let th = adapt(&regs, 1e6).unwrap();
        assert!((th.lambda[0] - 0.3).abs() < 0.02);
    }

    #[test]
    fn interval_without_points_is_an_error() {
        let pts = vec![point(1e5, vec![0.5, 0.5], vec![0.0, 0.0])];
        assert!(matches!(
            fit_regressors(&pts, &[(1e5, 1e6)], 10, &RegressorConfig::default()),
            Err(Error::EmptyInterval { index: 0, points: 1 })
        ));
    }
}
