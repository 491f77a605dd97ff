use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "softmax" => Some(Activation::Softmax),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut Vec<f64>) {
        match self {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => z.iter_mut().for_each(|v| *v = math::sigmoid(*v)),
            Activation::Softmax => *z = math::softmax(z),
            Activation::Identity => {}
        }
    }

    /// Pulls a gradient w.r.t. the activation output back to the
    /// pre-activation, using only the activation output.
    fn backprop(self, out: &[f64], d_out: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => out
                .iter()
                .zip(d_out)
                .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
                .collect(),
            Activation::Sigmoid => out.iter().zip(d_out).map(|(&s, &d)| d * s * (1.0 - s)).collect(),
            Activation::Softmax => {
                let dot: f64 = out.iter().zip(d_out).map(|(&p, &d)| p * d).sum();
                out.iter().zip(d_out).map(|(&p, &d)| p * (d - dot)).collect()
            }
            Activation::Identity => d_out.to_vec(),
        }
    }
}

/// Dense layer `y = act(W x + b)` with `W` stored row-major, `out_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform Glorot initialization, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = math::sqrt(6.0 / (in_dim + out_dim) as f64);
        let weights = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Layer {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        Error::check_len("layer weights", self.in_dim * self.out_dim, self.weights.len())?;
        Error::check_len("layer bias", self.out_dim, self.bias.len())?;
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::invariant("layer", None, "zero-width layer"));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invariant("layer", None, "non-finite parameter"));
        }
        Ok(())
    }
}

/// Feedforward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer activations from one forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation of the last layer.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Where a backward pass starts.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad<'a> {
    /// Gradient w.r.t. the network output (after the last activation).
    Output(&'a [f64]),
    /// Gradient w.r.t. the last layer's pre-activation (fused losses).
    PreActivation(&'a [f64]),
}

/// Parameter gradients, accumulated with `+=` semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn reset(&mut self) {
        self.scale(0.0);
    }

    /// All gradient entries in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.iter().all(|&g| g == 0.0))
    }
}

impl Mlp {
    /// Builds a Glorot-initialized network. `dims` has one more entry than
    /// `activations`.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        Error::check_len("activations", dims.len().saturating_sub(1), activations.len())?;
        if activations.is_empty() {
            return Err(Error::invariant("layers", None, "network needs at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| Layer::glorot(d[0], d[1], act, &mut rng))
            .collect();
        Mlp::from_layers(layers, seed)
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invariant("layers", None, "network needs at least one layer"));
        }
        for layer in &layers {
            layer.validate()?;
        }
        for pair in layers.windows(2) {
            Error::check_len("layer chaining", pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Mlp { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Multiply-accumulate FLOPs of one forward pass (2 per weight).
    pub fn flops(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.weights.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub(crate) fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("network input", self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = layer.pre_activation(&x);
            layer.activation.apply(&mut z);
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        Error::check_len("network input", self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let mut logits = Vec::new();
        for layer in &self.layers {
            let mut z = layer.pre_activation(acts.last().unwrap());
            logits.clone_from(&z);
            layer.activation.apply(&mut z);
            acts.push(z);
        }
        Ok(ForwardCache { acts, logits })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad: OutputGrad<'_>, grads: &mut Gradients) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = match grad {
            OutputGrad::PreActivation(d) => d.to_vec(),
            OutputGrad::Output(d) => self.layers[last].activation.backprop(&cache.acts[last + 1], d),
        };
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let input = &cache.acts[i];
            let gw = &mut grads.weights[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (g, &d) in grads.bias[i].iter_mut().zip(&delta) {
                *g += d;
            }
            let mut d_input = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (di, &w) in d_input.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            if i == 0 {
                return d_input;
            }
            delta = self.layers[i - 1].activation.backprop(&cache.acts[i], &d_input);
        }
        unreachable!()
    }

    /// Plain SGD step with weight decay folded into the gradient.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (w, &g) in layer.weights.iter_mut().zip(&grads.weights[i]) {
                *w -= lr * (g + weight_decay * *w);
            }
            for (b, &g) in layer.bias.iter_mut().zip(&grads.bias[i]) {
                *b -= lr * (g + weight_decay * *b);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}
