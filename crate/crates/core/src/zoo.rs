//! Synthetic multi-exit classifier.
//!
//! Gaussian class blobs stand in for image data and a small dense network
//! with intermediate softmax heads stands in for the convolutional backbones.
//! Training minimizes the exit-weighted cross-entropy; the trained network
//! then emits a [`TraceSet`] whose FLOP costs come from configuration rather
//! than from the toy network's own size.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{shuffled_batches, weighted_ce_loss, Activation, Gradients, Mlp, OutputGrad, TrainConfig};
use crate::trace::{ExitTopology, SampleTrace, TraceSet};

/// Largest `f64` strictly below one; confidences are capped here.
pub const CONFIDENCE_CAP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Default exit loss weights for a three-exit network.
pub const DEFAULT_EXIT_WEIGHTS: [f64; 3] = [0.2, 0.3, 0.5];

/// Generator for labelled Gaussian mixtures, one or more modes per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Mode centers; center `j` belongs to class `j % num_classes`, so the
    /// count is a multiple of the class count.
    pub centers: Vec<Vec<f64>>,
    /// Isotropic standard deviation of each mode.
    pub spreads: Vec<f64>,
    /// Probability that a sample's label is replaced by a different class.
    pub label_noise: f64,
    /// Probability that a final-exit prediction is replaced by a different
    /// class at emit time. Models the accuracy cost of feature compression.
    pub compression_flip: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// One blob per class, centers drawn uniformly from
    /// `[-separation, separation]^dim`, every class sharing the same spread.
    pub fn blobs(
        num_samples: usize,
        num_classes: usize,
        input_dim: usize,
        separation: f64,
        spread: f64,
        seed: u64,
    ) -> Self {
        Self::mixture(num_samples, num_classes, input_dim, 1, separation, spread, seed)
    }

    /// Like [`SynthSpec::blobs`] with `modes` blobs per class.
    pub fn mixture(
        num_samples: usize,
        num_classes: usize,
        input_dim: usize,
        modes: usize,
        separation: f64,
        spread: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - 1);
        let centers = (0..num_classes * modes)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-separation..=separation)).collect())
            .collect();
        SynthSpec {
            num_samples,
            num_classes,
            input_dim,
            centers,
            spreads: vec![spread; num_classes * modes],
            label_noise: 0.0,
            compression_flip: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.centers.is_empty() || !self.centers.len().is_multiple_of(self.num_classes) {
            return Err(Error::config("center count must be a positive multiple of num_classes"));
        }
        Error::check_len("mode spreads", self.centers.len(), self.spreads.len())?;
        for c in &self.centers {
            Error::check_len("center dimension", self.input_dim, c.len())?;
        }
        if !self.spreads.iter().all(|&s| s >= 0.0 && s.is_finite()) {
            return Err(Error::config("spreads must be finite and >= 0"));
        }
        for (name, p) in [("label_noise", self.label_noise), ("compression_flip", self.compression_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(alloc::format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Labelled input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Class whose mode generated each sample (differs from the label only
    /// under label noise).
    pub source_class: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map(Vec::len).unwrap_or(0)
    }

    /// Splits at `index`; both halves keep their order.
    pub fn split_at(&self, index: usize) -> (Dataset, Dataset) {
        let part = |r: core::ops::Range<usize>| Dataset {
            num_classes: self.num_classes,
            inputs: self.inputs[r.clone()].to_vec(),
            labels: self.labels[r.clone()].to_vec(),
            source_class: self.source_class[r].to_vec(),
        };
        (part(0..index), part(index..self.len()))
    }
}

fn other_class(rng: &mut ChaCha8Rng, classes: usize, not: usize) -> usize {
    let k = rng.gen_range(0..classes - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

/// Draws the dataset. Class counts are balanced up to rounding; sample `i`
/// uses its own RNG stream so the result does not depend on evaluation order.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut classes: Vec<usize> = (0..spec.num_samples).map(|i| i % spec.num_classes).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order_rng.set_stream(u64::MAX);
    classes.shuffle(&mut order_rng);

    let mut inputs = Vec::with_capacity(spec.num_samples);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for (i, &class) in classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let modes = spec.centers.len() / spec.num_classes;
        let mode = if modes > 1 { rng.gen_range(0..modes) } else { 0 };
        let center = mode * spec.num_classes + class;
        let spread = spec.spreads[center];
        let x: Vec<f64> = spec.centers[center]
            .iter()
            .map(|&c| {
                let z: f64 = rng.sample(StandardNormal);
                c + spread * z
            })
            .collect();
        let label = if spec.label_noise > 0.0 && rng.gen_bool(spec.label_noise) {
            other_class(&mut rng, spec.num_classes, class)
        } else {
            class
        };
        inputs.push(x);
        labels.push(label);
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        inputs,
        labels,
        source_class: classes,
    })
}

/// Shape of the toy backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Total exits including the final one.
    pub num_exits: usize,
    pub trunk_width: usize,
    /// Hidden width of the server-side part in front of the final classifier.
    pub final_hidden: usize,
    pub seed: u64,
}

impl ToyNetSpec {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        ToyNetSpec {
            input_dim,
            num_classes,
            num_exits: 3,
            trunk_width: 32,
            final_hidden: 32,
            seed,
        }
    }
}

/// Multi-exit classifier: a trunk of dense segments, one softmax head after
/// each segment, and a deeper final head after the last segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEarlyExitNet {
    segments: Vec<Mlp>,
    exit_heads: Vec<Mlp>,
    final_head: Mlp,
    exit_weights: Vec<f64>,
}

/// Gradients for every part of a [`ToyEarlyExitNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradients {
    pub segments: Vec<Gradients>,
    pub exit_heads: Vec<Gradients>,
    pub final_head: Gradients,
}

impl ToyGradients {
    fn scale(&mut self, f: f64) {
        for g in self.segments.iter_mut().chain(self.exit_heads.iter_mut()) {
            g.scale(f);
        }
        self.final_head.scale(f);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.segments.iter().chain(&self.exit_heads) {
            out.extend(g.flat());
        }
        out.extend(self.final_head.flat());
        out
    }
}

/// Per-exit outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs {
    /// Pre-softmax scores of every exit, final exit last.
    pub logits: Vec<Vec<f64>>,
}

impl ToyEarlyExitNet {
    pub fn new(spec: &ToyNetSpec, exit_weights: Vec<f64>) -> Result<Self> {
        if spec.num_exits < 2 {
            return Err(Error::config("toy network needs at least 2 exits"));
        }
        let seed = spec.seed;
        let w = spec.trunk_width;
        let mut segments = Vec::new();
        let mut exit_heads = Vec::new();
        for n in 0..spec.num_exits - 1 {
            let in_dim = if n == 0 { spec.input_dim } else { w };
            let sub = seed.wrapping_mul(1000).wrapping_add(2 * n as u64);
            segments.push(Mlp::new(&[in_dim, w], &[Activation::Relu], sub)?);
            exit_heads.push(Mlp::new(&[w, spec.num_classes], &[Activation::Softmax], sub + 1)?);
        }
        let final_head = Mlp::new(
            &[w, spec.final_hidden, spec.num_classes],
            &[Activation::Relu, Activation::Softmax],
            seed.wrapping_mul(1000).wrapping_add(999),
        )?;
        ToyEarlyExitNet::from_parts(segments, exit_heads, final_head, exit_weights)
    }

    pub fn from_parts(segments: Vec<Mlp>, exit_heads: Vec<Mlp>, final_head: Mlp, exit_weights: Vec<f64>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::config("toy network needs at least one trunk segment"));
        }
        Error::check_len("exit heads", segments.len(), exit_heads.len())?;
        Error::check_len("exit weights", segments.len() + 1, exit_weights.len())?;
        if !exit_weights.iter().all(|&w| w >= 0.0 && w.is_finite()) {
            return Err(Error::invariant("exit_weights", None, "weights must be finite and >= 0"));
        }
        for pair in segments.windows(2) {
            Error::check_len("trunk chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        let classes = final_head.output_dim();
        for (seg, head) in segments.iter().zip(&exit_heads) {
            Error::check_len("exit head input", seg.output_dim(), head.input_dim())?;
            Error::check_len("exit head classes", classes, head.output_dim())?;
            if head.output_activation() != Activation::Softmax {
                return Err(Error::invariant("exit_heads", None, "heads must end in softmax"));
            }
        }
        Error::check_len("final head input", segments.last().unwrap().output_dim(), final_head.input_dim())?;
        if final_head.output_activation() != Activation::Softmax {
            return Err(Error::invariant("final_head", None, "final head must end in softmax"));
        }
        Ok(ToyEarlyExitNet {
            segments,
            exit_heads,
            final_head,
            exit_weights,
        })
    }

    pub fn segments(&self) -> &[Mlp] {
        &self.segments
    }

    pub fn exit_heads(&self) -> &[Mlp] {
        &self.exit_heads
    }

    pub fn final_head(&self) -> &Mlp {
        &self.final_head
    }

    pub fn exit_weights(&self) -> &[f64] {
        &self.exit_weights
    }

    pub fn num_exits(&self) -> usize {
        self.segments.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.final_head.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.segments[0].input_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ExitOutputs> {
        let mut logits = Vec::with_capacity(self.num_exits());
        let mut h = x.to_vec();
        for (seg, head) in self.segments.iter().zip(&self.exit_heads) {
            h = seg.forward(&h)?;
            logits.push(head.forward_cached(&h)?.logits);
        }
        logits.push(self.final_head.forward_cached(&h)?.logits);
        Ok(ExitOutputs { logits })
    }

    /// Exit-weighted cross-entropy of one sample.
    pub fn sample_loss(&self, x: &[f64], label: usize) -> Result<f64> {
        let out = self.forward(x)?;
        weighted_ce_loss(&out.logits, label, &self.exit_weights)
    }

    /// Mean exit-weighted cross-entropy over a dataset.
    pub fn joint_loss(&self, data: &Dataset) -> Result<f64> {
        let mut losses = Vec::with_capacity(data.len());
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            losses.push(self.sample_loss(x, y)?);
        }
        Ok(math::pairwise_mean(&losses))
    }

    pub fn zero_gradients(&self) -> ToyGradients {
        ToyGradients {
            segments: self.segments.iter().map(Mlp::zero_gradients).collect(),
            exit_heads: self.exit_heads.iter().map(Mlp::zero_gradients).collect(),
            final_head: self.final_head.zero_gradients(),
        }
    }

    /// Accumulates the joint-loss gradient of one sample into `grads`.
    pub fn accumulate_gradients(&self, x: &[f64], label: usize, grads: &mut ToyGradients) -> Result<()> {
        let classes = self.num_classes();
        if label >= classes {
            return Err(Error::DimensionMismatch {
                what: "label index",
                expected: classes,
                found: label,
            });
        }
        let mut seg_caches = Vec::with_capacity(self.segments.len());
        let mut head_caches = Vec::with_capacity(self.segments.len());
        let mut h = x.to_vec();
        for (seg, head) in self.segments.iter().zip(&self.exit_heads) {
            let c = seg.forward_cached(&h)?;
            h = c.output().to_vec();
            seg_caches.push(c);
            head_caches.push(head.forward_cached(&h)?);
        }
        let final_cache = self.final_head.forward_cached(&h)?;

        let head_grad = |probs: &[f64], weight: f64| -> Vec<f64> {
            probs
                .iter()
                .enumerate()
                .map(|(k, &p)| weight * (p - if k == label { 1.0 } else { 0.0 }))
                .collect()
        };
        let last_w = self.exit_weights[self.segments.len()];
        let d = head_grad(final_cache.output(), last_w);
        let mut d_h = self
            .final_head
            .backward(&final_cache, OutputGrad::PreActivation(&d), &mut grads.final_head);
        for n in (0..self.segments.len()).rev() {
            let d = head_grad(head_caches[n].output(), self.exit_weights[n]);
            let d_head = self.exit_heads[n].backward(&head_caches[n], OutputGrad::PreActivation(&d), &mut grads.exit_heads[n]);
            for (a, b) in d_h.iter_mut().zip(&d_head) {
                *a += b;
            }
            d_h = self.segments[n].backward(&seg_caches[n], OutputGrad::Output(&d_h), &mut grads.segments[n]);
        }
        Ok(())
    }

    fn apply(&mut self, grads: &ToyGradients, lr: f64, decay: f64) {
        for (m, g) in self.segments.iter_mut().zip(&grads.segments) {
            m.apply_gradients(g, lr, decay);
        }
        for (m, g) in self.exit_heads.iter_mut().zip(&grads.exit_heads) {
            m.apply_gradients(g, lr, decay);
        }
        self.final_head.apply_gradients(&grads.final_head, lr, decay);
    }

    fn is_finite(&self) -> bool {
        self.segments.iter().chain(&self.exit_heads).all(Mlp::is_finite) && self.final_head.is_finite()
    }

    pub(crate) fn param_count(&self) -> usize {
        self.segments.iter().chain(&self.exit_heads).map(Mlp::num_params).sum::<usize>() + self.final_head.num_params()
    }

    pub(crate) fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for m in self.segments.iter_mut().chain(self.exit_heads.iter_mut()) {
            if index < m.num_params() {
                return m.param_mut(index);
            }
            index -= m.num_params();
        }
        self.final_head.param_mut(index)
    }

    /// Fraction of samples the final exit classifies correctly.
    pub fn final_accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let out = self.forward(x)?;
            if math::top1(out.logits.last().unwrap()).1 == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }
}

/// Largest relative disagreement between the joint-loss gradient and central
/// finite differences, over every parameter of the network, for one sample.
pub fn joint_gradient_check(net: &ToyEarlyExitNet, x: &[f64], label: usize) -> Result<f64> {
    use crate::nn::GRADCHECK_STEP as H;
    let mut grads = net.zero_gradients();
    net.accumulate_gradients(x, label, &mut grads)?;
    let analytic = grads.flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate().take(net.param_count()) {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + H;
        let up = probe.sample_loss(x, label)?;
        *probe.param_mut(i) = orig - H;
        let down = probe.sample_loss(x, label)?;
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub net: ToyEarlyExitNet,
    /// Mean joint loss over the training set after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains the toy network on the exit-weighted joint loss.
pub fn train_toy_net(net: &ToyEarlyExitNet, data: &Dataset, cfg: &TrainConfig) -> Result<ToyTrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    Error::check_len("dataset input dimension", net.input_dim(), data.input_dim())?;
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = net.zero_gradients();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        for batch in shuffled_batches(&mut rng, data.len(), cfg.batch_size) {
            grads.scale(0.0);
            for &i in &batch {
                net.accumulate_gradients(&data.inputs[i], data.labels[i], &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            net.apply(&grads, lr, cfg.weight_decay);
        }
        let loss = net.joint_loss(data)?;
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        curve.push(loss);
    }
    Ok(ToyTrainOutcome { net, loss_curve: curve })
}

/// Options for turning a trained network into traces.
#[derive(Debug, Clone, PartialEq)]
pub struct EmitConfig {
    /// Added to the sample index to form its id.
    pub id_offset: u64,
    /// Probability of replacing the final-exit prediction with another class.
    pub compression_flip: f64,
    pub include_features: bool,
    pub seed: u64,
}

impl Default for EmitConfig {
    fn default() -> Self {
        EmitConfig {
            id_offset: 0,
            compression_flip: 0.0,
            include_features: true,
            seed: 0,
        }
    }
}

/// Records every exit's top-1 confidence and class for every sample.
pub fn emit_traces(
    net: &ToyEarlyExitNet,
    data: &Dataset,
    topology: &ExitTopology,
    cfg: &EmitConfig,
) -> Result<TraceSet> {
    Error::check_len("topology exits", net.num_exits(), topology.num_exits)?;
    Error::check_len("topology classes", net.num_classes(), topology.num_classes)?;
    if !(0.0..=1.0).contains(&cfg.compression_flip) {
        return Err(Error::config("compression_flip must lie in [0, 1]"));
    }
    let mut samples = Vec::with_capacity(data.len());
    for (i, (x, &label)) in data.inputs.iter().zip(&data.labels).enumerate() {
        let out = net.forward(x)?;
        let mut confidences = Vec::with_capacity(out.logits.len());
        let mut predicted = Vec::with_capacity(out.logits.len());
        for z in &out.logits {
            let (c, k) = math::top1(z);
            confidences.push(c.min(CONFIDENCE_CAP));
            predicted.push(k);
        }
        if cfg.compression_flip > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            if rng.gen_bool(cfg.compression_flip) {
                let last = predicted.len() - 1;
                predicted[last] = other_class(&mut rng, topology.num_classes, predicted[last]);
            }
        }
        samples.push(SampleTrace {
            id: cfg.id_offset + i as u64,
            label,
            confidences,
            predicted,
            features: cfg.include_features.then(|| x.clone()),
        });
    }
    TraceSet::new(topology.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::cost_preset;

    fn small_spec(n: usize, seed: u64) -> SynthSpec {
        SynthSpec::blobs(n, 2, 4, 2.0, 0.6, seed)
    }

    fn topo(classes: usize) -> ExitTopology {
        let mut t = ExitTopology::from_preset(cost_preset("vgg16bn-cifar10").unwrap(), 0.4, 4096, 64.0).unwrap();
        t.num_classes = classes;
        t
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr_initial: 0.1,
            lr_end: 0.001,
            end_epoch: epochs,
            epochs,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn zero_spread_puts_samples_on_centers() {
        let mut spec = SynthSpec::blobs(50, 3, 5, 1.0, 0.0, 2);
        spec.spreads = vec![0.0; 3];
        let data = generate_dataset(&spec).unwrap();
        for (x, &c) in data.inputs.iter().zip(&data.source_class) {
            assert_eq!(x, &spec.centers[c]);
        }
        assert_eq!(data.labels, data.source_class);
    }

    #[test]
    fn mixture_samples_sit_on_their_class_modes() {
        let spec = SynthSpec::mixture(200, 3, 2, 4, 5.0, 0.0, 3);
        assert_eq!(spec.centers.len(), 12);
        let data = generate_dataset(&spec).unwrap();
        let mut used = [false; 12];
        for (x, &c) in data.inputs.iter().zip(&data.source_class) {
            let j = spec.centers.iter().position(|m| m == x).unwrap();
            assert_eq!(j % 3, c);
            used[j] = true;
        }
        assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn class_counts_are_balanced() {
        let data = generate_dataset(&SynthSpec::blobs(10_000, 10, 3, 1.0, 1.0, 8)).unwrap();
        let mut counts = [0usize; 10];
        for &l in &data.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| (950..=1050).contains(&c)), "{counts:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            label_noise: 0.1,
            ..small_spec(300, 5)
        };
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let other = SynthSpec { seed: 6, ..spec.clone() };
        assert_ne!(generate_dataset(&spec).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let spec = SynthSpec {
            label_noise: 1.5,
            ..small_spec(10, 1)
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let data = generate_dataset(&small_spec(400, 3)).unwrap();
        let net = ToyEarlyExitNet::new(&ToyNetSpec::new(4, 2, 3), DEFAULT_EXIT_WEIGHTS.to_vec()).unwrap();
        let out = train_toy_net(&net, &data, &quick_cfg(30)).unwrap();
        assert!(out.net.final_accuracy(&data).unwrap() >= 0.95);
        assert!(out.loss_curve.last().unwrap() < &out.loss_curve[0]);
    }

    #[test]
    fn zero_weight_exits_get_no_gradient() {
        let data = generate_dataset(&small_spec(16, 3)).unwrap();
        let net = ToyEarlyExitNet::new(&ToyNetSpec::new(4, 2, 3), vec![0.0, 0.0, 1.0]).unwrap();
        let mut g = net.zero_gradients();
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            net.accumulate_gradients(x, y, &mut g).unwrap();
        }
        assert!(g.exit_heads.iter().all(Gradients::is_zero));
        assert!(!g.final_head.is_zero());
        assert!(!g.segments[0].is_zero());
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let data = generate_dataset(&SynthSpec::blobs(4, 4, 3, 1.0, 0.5, 2)).unwrap();
        let spec = ToyNetSpec {
            trunk_width: 6,
            final_hidden: 5,
            ..ToyNetSpec::new(3, 4, 7)
        };
        let net = ToyEarlyExitNet::new(&spec, DEFAULT_EXIT_WEIGHTS.to_vec()).unwrap();
        let err = joint_gradient_check(&net, &data.inputs[0], data.labels[0]).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn emitted_traces_are_valid_and_match_direct_evaluation() {
        let data = generate_dataset(&SynthSpec::blobs(300, 3, 4, 1.5, 0.8, 4)).unwrap();
        let net = ToyEarlyExitNet::new(&ToyNetSpec::new(4, 3, 1), DEFAULT_EXIT_WEIGHTS.to_vec()).unwrap();
        let net = train_toy_net(&net, &data, &quick_cfg(10)).unwrap().net;
        let set = emit_traces(&net, &data, &topo(3), &EmitConfig::default()).unwrap();
        let floor = 1.0 / 3.0;
        for s in set.samples() {
            assert!(s.confidences.iter().all(|&c| c >= floor && c < 1.0));
            assert!(s.features.is_some());
        }
        let trace_acc = set.samples().iter().filter(|s| s.correct_at(3)).count() as f64 / set.len() as f64;
        assert_eq!(trace_acc, net.final_accuracy(&data).unwrap());
    }

    #[test]
    fn uniform_head_reports_inverse_class_count() {
        let spec = ToyNetSpec::new(2, 4, 0);
        let mut net = ToyEarlyExitNet::new(&spec, DEFAULT_EXIT_WEIGHTS.to_vec()).unwrap();
        for head in net.exit_heads.iter_mut() {
            for l in head.layers_mut() {
                l.weights.iter_mut().for_each(|w| *w = 0.0);
                l.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let data = Dataset {
            num_classes: 4,
            inputs: vec![vec![0.3, -0.2]],
            labels: vec![1],
            source_class: vec![1],
        };
        let set = emit_traces(&net, &data, &topo(4), &EmitConfig::default()).unwrap();
        assert_eq!(set.samples()[0].confidences[0], 0.25);
        assert_eq!(set.samples()[0].confidences[1], 0.25);
    }

    #[test]
    fn full_flip_changes_every_final_prediction() {
        let data = generate_dataset(&SynthSpec::blobs(50, 3, 4, 1.5, 0.8, 4)).unwrap();
        let net = ToyEarlyExitNet::new(&ToyNetSpec::new(4, 3, 1), DEFAULT_EXIT_WEIGHTS.to_vec()).unwrap();
        let clean = emit_traces(&net, &data, &topo(3), &EmitConfig::default()).unwrap();
        let flipped = emit_traces(
            &net,
            &data,
            &topo(3),
            &EmitConfig {
                compression_flip: 1.0,
                ..EmitConfig::default()
            },
        )
        .unwrap();
        for (a, b) in clean.samples().iter().zip(flipped.samples()) {
            assert_ne!(a.predicted[2], b.predicted[2]);
            assert_eq!(a.predicted[..2], b.predicted[..2]);
            assert_eq!(a.confidences, b.confidences);
        }
    }
}
