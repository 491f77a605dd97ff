//! TOML experiment configuration. Every key has a default, so an empty
//! document is a complete configuration.

use std::path::{Path, PathBuf};

use exitsim_core::nn::TrainConfig;
use exitsim_core::optimizer::RegressorConfig;
use exitsim_core::trace::cost_preset;
use exitsim_core::zoo::{SynthSpec, ToyNetSpec};
use exitsim_core::{Environment, ExitTopology};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "EXITSIM_CONFIG";

const MBIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub backbone_training: TrainSection,
    pub topology: TopologyConfig,
    pub predictor: PredictorConfig,
    pub predictor_training: TrainSection,
    pub environment: EnvironmentConfig,
    pub optimizer: OptimizerConfig,
    pub regressor: RegressorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Gaussian modes per class.
    pub modes_per_class: usize,
    /// Mode centers are drawn uniformly from `[-separation, separation]`.
    pub separation: f64,
    pub spread: f64,
    pub label_noise: f64,
    /// Probability of corrupting a final-exit prediction.
    pub compression_flip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_exits: usize,
    pub trunk_width: usize,
    pub final_hidden: usize,
    pub exit_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_initial: f64,
    pub lr_end: f64,
    pub end_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Named cost preset; explicit cost lists below take precedence.
    pub preset: Option<String>,
    pub segment_flops: Option<Vec<f64>>,
    pub exit_flops: Option<Vec<f64>>,
    pub server_flops: Option<f64>,
    pub predictor_flops: f64,
    pub raw_feature_bits: u64,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
    /// Confidence thresholds the predictor is trained for.
    pub lambda: Vec<f64>,
    pub gamma_step: f64,
    pub last_exit_budget: f64,
    /// Share of the training traces held out for choosing gamma.
    pub holdout_fraction: f64,
    /// Choose gamma on the evaluation traces instead of a held-out split.
    pub select_on_test: bool,
    /// Threshold settings reported in the accuracy/FLOPs frontier.
    pub frontier_lambdas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// FLOP/s.
    pub compute_speed: f64,
    /// Seconds.
    pub latency_budget: f64,
    /// Link rate for single-environment commands, Mbit/s.
    pub bandwidth_mbps: f64,
    /// Link rates swept by `sweep` and `demo`, Mbit/s.
    pub sweep_mbps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Candidate values for every confidence threshold.
    pub lambda_values: Vec<f64>,
    /// Candidate values for every prediction threshold.
    pub gamma_values: Vec<f64>,
    /// Regression intervals, Mbit/s.
    pub intervals_mbps: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSection {
    pub hidden: usize,
    pub training: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: PathBuf::from("exitsim-out"),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            backbone_training: TrainSection::from(&TrainConfig::backbone()),
            topology: TopologyConfig::default(),
            predictor: PredictorConfig::default(),
            predictor_training: TrainSection::from(&TrainConfig::predictor()),
            environment: EnvironmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            regressor: RegressorSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 2000,
            test_samples: 1000,
            num_classes: 10,
            input_dim: 8,
            modes_per_class: 6,
            separation: 3.0,
            spread: 0.9,
            label_noise: 0.0,
            compression_flip: 0.0,
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let spec = ToyNetSpec::new(1, 2, 0);
        NetworkConfig {
            num_exits: spec.num_exits,
            trunk_width: spec.trunk_width,
            final_hidden: spec.final_hidden,
            exit_weights: exitsim_core::zoo::DEFAULT_EXIT_WEIGHTS.to_vec(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection::from(&TrainConfig::backbone())
    }
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        TrainSection {
            lr_initial: c.lr_initial,
            lr_end: c.lr_end,
            end_epoch: c.end_epoch,
            epochs: c.epochs,
            batch_size: c.batch_size,
            weight_decay: c.weight_decay,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_initial: self.lr_initial,
            lr_end: self.lr_end,
            end_epoch: self.end_epoch,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            preset: Some("vgg16bn-cifar10".into()),
            segment_flops: None,
            exit_flops: None,
            server_flops: None,
            predictor_flops: exitsim_core::predictor::DEFAULT_PREDICTOR_MFLOPS,
            // 128 x 16 x 16 activations of 32 bits
            raw_feature_bits: 1_048_576,
            compression_ratio: 64.0,
        }
    }
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: 64,
            lambda: vec![0.9, 0.8],
            gamma_step: exitsim_core::predictor::DEFAULT_GAMMA_STEP,
            last_exit_budget: exitsim_core::predictor::DEFAULT_LAST_EXIT_BUDGET,
            holdout_fraction: 0.2,
            select_on_test: false,
            frontier_lambdas: [0.5, 0.6, 0.7, 0.8, 0.9, 0.95].iter().map(|&l| vec![l, l]).collect(),
        }
    }
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            compute_speed: exitsim_core::optimizer::DEFAULT_COMPUTE_SPEED,
            latency_budget: exitsim_core::optimizer::DEFAULT_LATENCY_BUDGET,
            bandwidth_mbps: 10.0,
            sweep_mbps: vec![0.1, 0.3, 0.5, 0.7, 1.0, 3.0, 5.0, 10.0, 30.0, 100.0],
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lambda_values: exitsim_core::math::linspace_step(0.2, 0.9, 0.1),
            gamma_values: exitsim_core::math::unit_grid(0.1),
            intervals_mbps: exitsim_core::optimizer::DEFAULT_INTERVALS
                .iter()
                .map(|&(lo, hi)| [lo / MBIT, hi / MBIT])
                .collect(),
        }
    }
}

impl Default for RegressorSection {
    fn default() -> Self {
        let c = RegressorConfig::default();
        RegressorSection {
            hidden: c.hidden,
            training: TrainSection::from(&c.train),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            Error::parse(path, line, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(path, &fsutil::read_to_string(path)?)
    }

    /// Explicit path, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let core = |r: exitsim_core::Result<()>| r.map_err(|e| bad(format!("invalid configuration: {e}")));
        core(self.synth_spec().validate())?;
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err(bad("data.train_samples and data.test_samples must be positive"));
        }
        if self.network.num_exits < 2 || self.network.exit_weights.len() != self.network.num_exits {
            return Err(bad("network.exit_weights needs one weight per exit"));
        }
        for (name, t) in [
            ("backbone_training", &self.backbone_training),
            ("predictor_training", &self.predictor_training),
            ("regressor.training", &self.regressor.training),
        ] {
            t.with_seed(0).validate().map_err(|e| bad(format!("{name}: {e}")))?;
        }
        let topo = self.topology()?;
        if topo.num_exits != self.network.num_exits {
            return Err(bad(format!(
                "topology has {} exits but the network has {}",
                topo.num_exits, self.network.num_exits
            )));
        }
        let early = topo.num_exits - 1;
        let p = &self.predictor;
        if p.lambda.len() != early || p.frontier_lambdas.iter().any(|l| l.len() != early) {
            return Err(bad(format!("predictor thresholds need {early} entries")));
        }
        core(exitsim_core::trace::validate_lambda(&p.lambda))?;
        for l in &p.frontier_lambdas {
            core(exitsim_core::trace::validate_lambda(l))?;
        }
        if !(p.gamma_step > 0.0 && p.gamma_step < 1.0) || !(0.0..1.0).contains(&p.holdout_fraction) || p.hidden == 0 {
            return Err(bad("predictor.gamma_step must lie in (0, 1), holdout_fraction in [0, 1), hidden > 0"));
        }
        if !p.select_on_test && p.holdout_fraction == 0.0 {
            return Err(bad("predictor.holdout_fraction must be positive unless select_on_test is set"));
        }
        core(self.environment().map(|_| ()))?;
        if self.environment.sweep_mbps.iter().any(|&b| !(b.is_finite() && b > 0.0)) {
            return Err(bad("environment.sweep_mbps must hold positive rates"));
        }
        let o = &self.optimizer;
        if o.lambda_values.is_empty() || o.lambda_values.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(bad("optimizer.lambda_values must be nonempty and inside (0, 1)"));
        }
        if o.gamma_values.is_empty() || o.gamma_values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(bad("optimizer.gamma_values must be nonempty and inside [0, 1]"));
        }
        if o.intervals_mbps.iter().any(|&[lo, hi]| !(lo > 0.0 && hi > lo)) {
            return Err(bad("optimizer.intervals_mbps must be increasing positive pairs"));
        }
        if self.regressor.hidden == 0 {
            return Err(bad("regressor.hidden must be positive"));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        let mut spec = SynthSpec::mixture(
            d.train_samples + d.test_samples,
            d.num_classes,
            d.input_dim,
            d.modes_per_class,
            d.separation,
            d.spread,
            self.seed,
        );
        spec.label_noise = d.label_noise;
        spec.compression_flip = d.compression_flip;
        spec
    }

    pub fn net_spec(&self) -> ToyNetSpec {
        ToyNetSpec {
            input_dim: self.data.input_dim,
            num_classes: self.data.num_classes,
            num_exits: self.network.num_exits,
            trunk_width: self.network.trunk_width,
            final_hidden: self.network.final_hidden,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn backbone_train(&self) -> TrainConfig {
        self.backbone_training.with_seed(self.seed.wrapping_add(1))
    }

    pub fn predictor_train(&self) -> TrainConfig {
        self.predictor_training.with_seed(self.seed.wrapping_add(2))
    }

    pub fn regressor_config(&self) -> RegressorConfig {
        RegressorConfig {
            hidden: self.regressor.hidden,
            train: self.regressor.training.with_seed(self.seed.wrapping_add(3)),
        }
    }

    /// Cost topology with the toy task's class count.
    pub fn topology(&self) -> Result<ExitTopology> {
        let t = &self.topology;
        let (segment_flops, exit_flops, server_flops) = match (&t.segment_flops, &t.exit_flops, t.server_flops) {
            (Some(s), Some(e), Some(v)) => (s.clone(), e.clone(), v),
            (None, None, None) => {
                let name = t.preset.as_deref().ok_or_else(|| bad("topology needs a preset or explicit costs"))?;
                let p = cost_preset(name).ok_or_else(|| bad(format!("unknown cost preset {name:?}")))?;
                (p.segment_flops.to_vec(), p.exit_flops.to_vec(), p.server_flops)
            }
            _ => return Err(bad("segment_flops, exit_flops and server_flops must be given together")),
        };
        let topo = ExitTopology {
            num_exits: segment_flops.len() + 1,
            segment_flops,
            exit_flops,
            server_flops,
            predictor_flops: t.predictor_flops,
            num_classes: self.data.num_classes,
            raw_feature_bits: t.raw_feature_bits,
            compression_ratio: t.compression_ratio,
        };
        topo.validate().map_err(|e| bad(format!("invalid topology: {e}")))?;
        Ok(topo)
    }

    pub fn environment(&self) -> exitsim_core::Result<Environment> {
        let e = &self.environment;
        Environment::new(e.compute_speed, e.bandwidth_mbps * MBIT, e.latency_budget)
    }

    /// Sweep rates in bit/s.
    pub fn sweep_bandwidths(&self) -> Vec<f64> {
        self.environment.sweep_mbps.iter().map(|b| b * MBIT).collect()
    }

    /// Regression intervals in bit/s.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.optimizer.intervals_mbps.iter().map(|&[lo, hi]| (lo * MBIT, hi * MBIT)).collect()
    }

    pub fn lambda_axes(&self, early: usize) -> Vec<Vec<f64>> {
        vec![self.optimizer.lambda_values.clone(); early]
    }

    pub fn gamma_axes(&self, early: usize) -> Vec<Vec<f64>> {
        vec![self.optimizer.gamma_values.clone(); early]
    }
}
