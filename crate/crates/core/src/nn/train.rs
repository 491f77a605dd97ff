use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::loss::LossKind;
use crate::nn::mlp::{Mlp, OutputGrad};

/// SGD hyper-parameters with a cosine-annealed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_end: f64,
    /// Epoch at which the rate reaches `lr_end`; held constant afterwards.
    pub end_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Schedule used for the early-exit backbones: 220 epochs, batch 128,
    /// rate 0.1 annealed to 1e-4 by epoch 200, weight decay 5e-4.
    pub fn backbone() -> Self {
        TrainConfig {
            lr_initial: 0.1,
            lr_end: 0.0001,
            end_epoch: 200,
            epochs: 220,
            batch_size: 128,
            weight_decay: 0.0005,
            seed: 0,
        }
    }

    /// Same schedule with weight decay 2e-4, as used for the exit predictor.
    pub fn predictor() -> Self {
        TrainConfig {
            weight_decay: 0.0002,
            ..TrainConfig::backbone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::config("lr_initial must be positive"));
        }
        if !(self.lr_end > 0.0 && self.lr_end.is_finite()) {
            return Err(Error::config("lr_end must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.end_epoch > self.epochs {
            return Err(Error::config("end_epoch must not exceed epochs"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.end_epoch {
            return self.lr_end;
        }
        let t = epoch as f64 / self.end_epoch as f64;
        self.lr_end + (self.lr_initial - self.lr_end) * 0.5 * (1.0 + math::cos(PI * t))
    }
}

/// Shuffles `0..n` and cuts it into batches of at most `batch_size`.
pub fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    /// Full-dataset mean loss after each epoch, indexed by epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains `net` by minibatch SGD on the mean per-sample loss.
pub fn train(
    net: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    Error::check_len("training targets", inputs.len(), targets.len())?;
    if net.output_activation() != loss.head() {
        return Err(Error::config(alloc::format!(
            "loss {} expects a {} head, network ends in {}",
            loss.tag(),
            loss.head().tag(),
            net.output_activation().tag()
        )));
    }
    for (x, y) in inputs.iter().zip(targets) {
        Error::check_len("training input", net.input_dim(), x.len())?;
        Error::check_len("training target", net.output_dim(), y.len())?;
    }

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = net.zero_gradients();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        for batch in shuffled_batches(&mut rng, inputs.len(), cfg.batch_size) {
            grads.reset();
            for &i in &batch {
                let cache = net.forward_cached(&inputs[i])?;
                let d = loss.logit_grad(cache.output(), &targets[i]);
                net.backward(&cache, OutputGrad::PreActivation(&d), &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            net.apply_gradients(&grads, lr, cfg.weight_decay);
        }
        let epoch_loss = dataset_loss(&net, inputs, targets, loss)?;
        if !epoch_loss.is_finite() || !net.is_finite() {
            return Err(Error::Diverged { epoch, loss: epoch_loss });
        }
        loss_curve.push(epoch_loss);
    }
    Ok(TrainOutcome { net, loss_curve })
}

/// Mean per-sample loss over a dataset.
pub(crate) fn dataset_loss(net: &Mlp, inputs: &[Vec<f64>], targets: &[Vec<f64>], loss: LossKind) -> Result<f64> {
    let mut per_sample = Vec::with_capacity(inputs.len());
    for (x, y) in inputs.iter().zip(targets) {
        let cache = net.forward_cached(x)?;
        per_sample.push(loss.sample_loss(cache.output(), &cache.logits, y));
    }
    Ok(math::pairwise_mean(&per_sample))
}
