//! The exit predictor: a small network that guesses, before inference,
//! which early exits are worth computing for an input.
//!
//! Output `n` is trained to predict whether exit `n` would be confident
//! enough to terminate the sample (`c_n >= lambda_n`). Its FLOP cost is a
//! configured constant, independent of the network used here.

use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{self, Environment};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self, Activation, LossKind, Mlp, TrainConfig};
use crate::trace::{validate_lambda, TraceSet};

/// Default predictor cost in MFLOPs.
pub const DEFAULT_PREDICTOR_MFLOPS: f64 = 0.40;

/// Default prediction-threshold grid step.
pub const DEFAULT_GAMMA_STEP: f64 = 0.05;

/// Default allowance for additional samples reaching the final exit.
pub const DEFAULT_LAST_EXIT_BUDGET: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitPredictor {
    net: Mlp,
    lambda: Vec<f64>,
    predictor_flops: f64,
}

/// Architecture of the fully connected predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSpec {
    pub hidden: usize,
    pub predictor_flops: f64,
    pub seed: u64,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            hidden: 64,
            predictor_flops: DEFAULT_PREDICTOR_MFLOPS,
            seed: 0,
        }
    }
}

impl ExitPredictor {
    pub fn new(net: Mlp, lambda: Vec<f64>, predictor_flops: f64) -> Result<Self> {
        validate_lambda(&lambda)?;
        Error::check_len("predictor outputs", lambda.len(), net.output_dim())?;
        if net.output_activation() != Activation::Sigmoid {
            return Err(Error::invariant("predictor", None, "output head must be sigmoid"));
        }
        if !(predictor_flops >= 0.0 && predictor_flops.is_finite()) {
            return Err(Error::invariant("predictor_flops", None, "must be finite and >= 0"));
        }
        Ok(ExitPredictor {
            net,
            lambda,
            predictor_flops,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Confidence thresholds the predictor was trained against.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn predictor_flops(&self) -> f64 {
        self.predictor_flops
    }

    pub fn score(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(features)
    }
}

/// Binary targets: entry `n` is set iff `c_n >= lambda_n`.
pub fn make_labels(set: &TraceSet, lambda: &[f64]) -> Result<Vec<Vec<bool>>> {
    Error::check_len("lambda", set.topology().num_early_exits(), lambda.len())?;
    Ok(set
        .samples()
        .iter()
        .map(|s| s.confidences.iter().zip(lambda).map(|(&c, &l)| c >= l).collect())
        .collect())
}

fn features_of(set: &TraceSet) -> Result<Vec<Vec<f64>>> {
    set.samples()
        .iter()
        .map(|s| s.features.clone().ok_or(Error::MissingFeatures { id: s.id }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PredictorTraining {
    pub predictor: ExitPredictor,
    pub loss_curve: Vec<f64>,
}

/// Fits a two-layer predictor (ReLU hidden layer, sigmoid head) to the
/// step labels of `set` under `lambda`.
pub fn train_predictor(
    set: &TraceSet,
    lambda: &[f64],
    spec: &PredictorSpec,
    cfg: &TrainConfig,
) -> Result<PredictorTraining> {
    validate_lambda(lambda)?;
    let inputs = features_of(set)?;
    let targets: Vec<Vec<f64>> = make_labels(set, lambda)?
        .into_iter()
        .map(|row| row.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let dim = inputs.first().map(Vec::len).ok_or_else(|| Error::config("trace set is empty"))?;
    let net = Mlp::new(
        &[dim, spec.hidden, lambda.len()],
        &[Activation::Relu, Activation::Sigmoid],
        spec.seed,
    )?;
    let out = nn::train(&net, &inputs, &targets, LossKind::Bce, cfg)?;
    Ok(PredictorTraining {
        predictor: ExitPredictor::new(out.net, lambda.to_vec(), spec.predictor_flops)?,
        loss_curve: out.loss_curve,
    })
}

/// Scores of every sample, aligned with `set.samples()`.
pub fn predict_scores(predictor: &ExitPredictor, set: &TraceSet) -> Result<Vec<Vec<f64>>> {
    Error::check_len("predictor outputs", set.topology().num_early_exits(), predictor.lambda.len())?;
    set.samples()
        .iter()
        .map(|s| {
            let f = s.features.as_ref().ok_or(Error::MissingFeatures { id: s.id })?;
            predictor.score(f)
        })
        .collect()
}

/// Result of the prediction-threshold search.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaChoice {
    pub gamma: Vec<f64>,
    pub mean_on_device_mflops: f64,
    /// Final-exit share under the chosen thresholds.
    pub last_exit_share: f64,
    /// Final-exit share without the predictor.
    pub baseline_last_exit_share: f64,
    pub points_evaluated: usize,
}

/// Chooses prediction thresholds on the grid `{0, step, 2 step, ..., 1}`.
///
/// Among thresholds that add fewer than `budget_fraction` of the samples to
/// the final exit (relative to running without a predictor), returns the one
/// with the lowest mean on-device cost, ties going to the lexicographically
/// smallest vector. Up to three early exits the grid is enumerated
/// exhaustively; beyond that, coordinate descent from `gamma = 0` is used.
pub fn select_gamma(
    set: &TraceSet,
    scores: &[Vec<f64>],
    lambda: &[f64],
    grid_step: f64,
    budget_fraction: f64,
) -> Result<GammaChoice> {
    if !(grid_step > 0.0 && grid_step < 1.0) {
        return Err(Error::config("gamma grid step must lie in (0, 1)"));
    }
    let early = set.topology().num_early_exits();
    Error::check_len("lambda", early, lambda.len())?;
    validate_lambda(lambda)?;
    // validates scores against the set
    let zero = vec![0.0; early];
    let baseline = engine::run_with_predictor(
        set,
        &crate::trace::Thresholds::new(lambda.to_vec(), zero.clone())?,
        scores,
        None,
    )?
    .report;
    let base_share = baseline.last_exit_share();

    let mut buf = Vec::with_capacity(set.len());
    let mut lat = Vec::new();
    let mut eval = |gamma: &[f64]| {
        engine::summarize_predictor(set, lambda, gamma, scores, None::<&Environment>, &mut buf, &mut lat)
    };
    let axis = math::unit_grid(grid_step);
    let mut best_gamma = zero.clone();
    let mut best = eval(&zero);
    let mut evaluated = 1usize;
    let feasible = |share: f64| share - base_share < budget_fraction;

    if early <= 3 {
        let axes = vec![axis; early];
        math::for_each_grid_point(&axes, |g| {
            evaluated += 1;
            let s = eval(g);
            if feasible(s.last_exit_share)
                && (s.mean_on_device < best.mean_on_device
                    || (s.mean_on_device == best.mean_on_device && g < best_gamma.as_slice()))
            {
                best = s;
                best_gamma = g.to_vec();
            }
        });
    } else {
        let mut improved = true;
        while improved {
            improved = false;
            for d in 0..early {
                for &v in &axis {
                    let mut g = best_gamma.clone();
                    g[d] = v;
                    evaluated += 1;
                    let s = eval(&g);
                    if feasible(s.last_exit_share) && s.mean_on_device < best.mean_on_device {
                        best = s;
                        best_gamma = g;
                        improved = true;
                    }
                }
            }
        }
    }
    Ok(GammaChoice {
        gamma: best_gamma,
        mean_on_device_mflops: best.mean_on_device,
        last_exit_share: best.last_exit_share,
        baseline_last_exit_share: base_share,
        points_evaluated: evaluated,
    })
}
