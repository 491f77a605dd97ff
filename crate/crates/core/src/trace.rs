//! Network topology, per-sample traces and threshold vectors.
//!
//! A [`TraceSet`] is the empirical input distribution every policy is
//! evaluated against: one [`SampleTrace`] per input, holding the top-1
//! confidence and predicted class of every exit. Confidences are recorded
//! once and never recomputed, so policy evaluation needs no network at all.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Static cost and shape description of a partitioned early-exit network.
///
/// FLOP figures are in MFLOPs. Exits are numbered `1..=num_exits`; exit
/// `num_exits` is the server-side final classifier, the others run on the
/// device. The partition point is right after the last early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitTopology {
    pub num_exits: usize,
    /// Backbone segment ending at early exit `n` (index `n - 1`).
    pub segment_flops: Vec<f64>,
    /// Intermediate classifier of early exit `n` (index `n - 1`).
    pub exit_flops: Vec<f64>,
    /// Backbone after the partition point, including the final classifier.
    pub server_flops: f64,
    pub predictor_flops: f64,
    pub num_classes: usize,
    /// Uncompressed payload at the partition point, in bits.
    pub raw_feature_bits: u64,
    pub compression_ratio: f64,
}

impl ExitTopology {
    pub fn validate(&self) -> Result<()> {
        if self.num_exits < 2 {
            return Err(Error::invariant("N", None, format!("need at least 2 exits, got {}", self.num_exits)));
        }
        if self.num_classes < 2 {
            return Err(Error::invariant("P", None, format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let early = self.num_exits - 1;
        if self.segment_flops.len() != early {
            return Err(Error::invariant(
                "segment_flops",
                None,
                format!("expected {early} entries, found {}", self.segment_flops.len()),
            ));
        }
        if self.exit_flops.len() != early {
            return Err(Error::invariant(
                "exit_flops",
                None,
                format!("expected {early} entries, found {}", self.exit_flops.len()),
            ));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.segment_flops.iter().all(|&v| nonneg(v)) {
            return Err(Error::invariant("segment_flops", None, "every entry must be finite and >= 0"));
        }
        if !self.exit_flops.iter().all(|&v| nonneg(v)) {
            return Err(Error::invariant("exit_flops", None, "every entry must be finite and >= 0"));
        }
        if !nonneg(self.server_flops) {
            return Err(Error::invariant("server_flops", None, "must be finite and >= 0"));
        }
        if !nonneg(self.predictor_flops) {
            return Err(Error::invariant("predictor_flops", None, "must be finite and >= 0"));
        }
        if self.raw_feature_bits == 0 {
            return Err(Error::invariant("raw_feature_bits", None, "must be > 0"));
        }
        if !(self.compression_ratio.is_finite() && self.compression_ratio >= 1.0) {
            return Err(Error::invariant("compression_ratio", None, "must be >= 1"));
        }
        Ok(())
    }

    #[inline]
    pub fn num_early_exits(&self) -> usize {
        self.num_exits - 1
    }

    /// Payload sent to the server for a transmitted sample.
    pub fn transmitted_bits(&self) -> u64 {
        math::ceil(self.raw_feature_bits as f64 / self.compression_ratio) as u64
    }

    /// On-device cost when every early exit is computed and none terminates.
    pub fn full_device_flops(&self) -> f64 {
        self.segment_flops.iter().sum::<f64>() + self.exit_flops.iter().sum::<f64>()
    }

    /// Builds a topology from a cost preset. The transmitted payload is never
    /// implied by a preset and must be supplied.
    pub fn from_preset(
        preset: &CostPreset,
        predictor_flops: f64,
        raw_feature_bits: u64,
        compression_ratio: f64,
    ) -> Result<Self> {
        let topology = ExitTopology {
            num_exits: preset.segment_flops.len() + 1,
            segment_flops: preset.segment_flops.to_vec(),
            exit_flops: preset.exit_flops.to_vec(),
            server_flops: preset.server_flops,
            predictor_flops,
            num_classes: preset.num_classes,
            raw_feature_bits,
            compression_ratio,
        };
        topology.validate()?;
        Ok(topology)
    }
}

/// Published per-part on-device costs of the reference backbones.
///
/// `server_flops` is the whole-backbone cost minus the on-device segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPreset {
    pub name: &'static str,
    pub num_classes: usize,
    pub segment_flops: &'static [f64],
    pub exit_flops: &'static [f64],
    pub server_flops: f64,
}

pub const COST_PRESETS: &[CostPreset] = &[
    CostPreset {
        name: "alexnet-cifar10",
        num_classes: 10,
        segment_flops: &[0.49, 7.11],
        exit_flops: &[4.75, 1.78],
        server_flops: 55.28,
    },
    CostPreset {
        name: "vgg16bn-cifar10",
        num_classes: 10,
        segment_flops: &[1.97, 56.98],
        exit_flops: &[16.70, 14.23],
        server_flops: 274.13,
    },
    CostPreset {
        name: "resnet44-cifar10",
        num_classes: 10,
        segment_flops: &[5.29, 32.53],
        exit_flops: &[9.66, 4.79],
        server_flops: 60.70,
    },
    CostPreset {
        name: "alexnet-cifar100",
        num_classes: 100,
        segment_flops: &[0.49, 7.11],
        exit_flops: &[4.84, 1.80],
        server_flops: 55.65,
    },
    CostPreset {
        name: "vgg16bn-cifar100",
        num_classes: 100,
        segment_flops: &[1.97, 56.98],
        exit_flops: &[17.43, 14.60],
        server_flops: 274.50,
    },
    CostPreset {
        name: "resnet44-cifar100",
        num_classes: 100,
        segment_flops: &[5.29, 32.53],
        exit_flops: &[10.03, 4.97],
        server_flops: 60.70,
    },
    CostPreset {
        name: "resnet44-cifar100-3exit",
        num_classes: 100,
        segment_flops: &[5.29, 14.4, 18.13],
        exit_flops: &[10.03, 5.23, 4.97],
        server_flops: 60.70,
    },
];

pub fn cost_preset(name: &str) -> Option<&'static CostPreset> {
    COST_PRESETS.iter().find(|p| p.name == name)
}

/// One input's recorded pass through every exit.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub id: u64,
    pub label: usize,
    /// Top-1 softmax probability at each exit; the last entry is the final exit.
    pub confidences: Vec<f64>,
    /// Argmax class at each exit.
    pub predicted: Vec<usize>,
    /// Raw input vector, needed only for predictor training and scoring.
    pub features: Option<Vec<f64>>,
}

impl SampleTrace {
    pub fn validate(&self, topology: &ExitTopology) -> Result<()> {
        let n = topology.num_exits;
        let p = topology.num_classes;
        let id = Some(self.id);
        if self.confidences.len() != n {
            return Err(Error::invariant(
                "confidences",
                id,
                format!("expected {n} entries, found {}", self.confidences.len()),
            ));
        }
        if self.predicted.len() != n {
            return Err(Error::invariant(
                "predicted",
                id,
                format!("expected {n} entries, found {}", self.predicted.len()),
            ));
        }
        if self.label >= p {
            return Err(Error::invariant("label", id, format!("{} is not below P = {p}", self.label)));
        }
        let floor = 1.0 / p as f64;
        for (i, &c) in self.confidences.iter().enumerate() {
            if !(c >= floor && c < 1.0) {
                return Err(Error::invariant(
                    "confidences",
                    id,
                    format!("exit {} confidence {c} outside [1/P, 1)", i + 1),
                ));
            }
        }
        if let Some(&bad) = self.predicted.iter().find(|&&k| k >= p) {
            return Err(Error::invariant("predicted", id, format!("class {bad} is not below P = {p}")));
        }
        if let Some(features) = &self.features {
            if features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant("features", id, "non-finite value"));
            }
        }
        Ok(())
    }

    /// Whether the classifier at exit `exit` (1-based) predicted the label.
    #[inline]
    pub fn correct_at(&self, exit: usize) -> bool {
        self.predicted[exit - 1] == self.label
    }
}

/// A topology together with the samples recorded against it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    topology: ExitTopology,
    samples: Vec<SampleTrace>,
}

impl TraceSet {
    pub fn new(topology: ExitTopology, samples: Vec<SampleTrace>) -> Result<Self> {
        topology.validate()?;
        let mut seen = BTreeSet::new();
        for sample in &samples {
            sample.validate(&topology)?;
            if !seen.insert(sample.id) {
                return Err(Error::invariant("id", Some(sample.id), "duplicate sample id"));
            }
        }
        Ok(TraceSet { topology, samples })
    }

    #[inline]
    pub fn topology(&self) -> &ExitTopology {
        &self.topology
    }

    #[inline]
    pub fn samples(&self) -> &[SampleTrace] {
        &self.samples
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replaces the cost side of the topology. Shape fields (`N`, `P`) must
    /// stay the same.
    pub fn with_topology(&self, topology: ExitTopology) -> Result<Self> {
        if topology.num_exits != self.topology.num_exits || topology.num_classes != self.topology.num_classes {
            return Err(Error::invariant("topology", None, "N and P must match the recorded traces"));
        }
        TraceSet::new(topology, self.samples.clone())
    }

    /// Splits off the trailing `fraction` of samples (rounded up) as a
    /// held-out set. Sample order is preserved in both halves.
    pub fn split_holdout(&self, fraction: f64) -> Result<(TraceSet, TraceSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("held-out fraction {fraction} outside [0, 1)")));
        }
        let held = math::ceil(self.samples.len() as f64 * fraction) as usize;
        let cut = self.samples.len() - held;
        let head = TraceSet {
            topology: self.topology.clone(),
            samples: self.samples[..cut].to_vec(),
        };
        let tail = TraceSet {
            topology: self.topology.clone(),
            samples: self.samples[cut..].to_vec(),
        };
        Ok((head, tail))
    }

    pub fn into_parts(self) -> (ExitTopology, Vec<SampleTrace>) {
        (self.topology, self.samples)
    }
}

/// Confidence thresholds `lambda` and prediction thresholds `gamma`, one per
/// early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Thresholds {
    pub fn new(lambda: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        validate_lambda(&lambda)?;
        if gamma.len() != lambda.len() {
            return Err(Error::invariant(
                "gamma",
                None,
                format!("expected {} entries, found {}", lambda.len(), gamma.len()),
            ));
        }
        if !gamma.iter().all(|g| (0.0..=1.0).contains(g)) {
            return Err(Error::invariant("gamma", None, "every entry must lie in [0, 1]"));
        }
        Ok(Thresholds { lambda, gamma })
    }

    /// `gamma = 0`: every reached exit is computed, as without a predictor.
    pub fn without_skipping(lambda: Vec<f64>) -> Result<Self> {
        let gamma = alloc::vec![0.0; lambda.len()];
        Thresholds::new(lambda, gamma)
    }

    pub fn check_topology(&self, topology: &ExitTopology) -> Result<()> {
        Error::check_len("thresholds", topology.num_early_exits(), self.lambda.len())
    }
}

pub fn validate_lambda(lambda: &[f64]) -> Result<()> {
    if lambda.is_empty() {
        return Err(Error::invariant("lambda", None, "at least one early exit is required"));
    }
    if !lambda.iter().all(|&l| l > 0.0 && l < 1.0) {
        return Err(Error::invariant("lambda", None, "every entry must lie in (0, 1)"));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn vgg10() -> ExitTopology {
        ExitTopology::from_preset(cost_preset("vgg16bn-cifar10").unwrap(), 0.40, 1_048_576, 64.0).unwrap()
    }

    fn sample(id: u64, conf: Vec<f64>) -> SampleTrace {
        let n = conf.len();
        SampleTrace {
            id,
            label: 0,
            confidences: conf,
            predicted: vec![0; n],
            features: None,
        }
    }

    #[test]
    fn minimal_set_is_valid() {
        let mut t = vgg10();
        t.num_classes = 10;
        let set = TraceSet::new(t, vec![sample(0, vec![0.5, 0.5, 0.5])]).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn confidence_above_one_names_the_field() {
        let err = TraceSet::new(vgg10(), vec![sample(7, vec![0.5, 1.2, 0.5])]).unwrap_err();
        match err {
            Error::Invariant { field, sample, .. } => {
                assert_eq!(field, "confidences");
                assert_eq!(sample, Some(7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn confidence_below_uniform_floor_rejected() {
        assert!(TraceSet::new(vgg10(), vec![sample(0, vec![0.05, 0.5, 0.5])]).is_err());
        assert!(TraceSet::new(vgg10(), vec![sample(0, vec![0.1, 0.5, 0.5])]).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = TraceSet::new(vgg10(), vec![sample(3, vec![0.5; 3]), sample(3, vec![0.5; 3])]).unwrap_err();
        assert!(matches!(err, Error::Invariant { field: "id", sample: Some(3), .. }));
    }

    #[test]
    fn wrong_exit_count_rejected() {
        let err = TraceSet::new(vgg10(), vec![sample(0, vec![0.5; 2])]).unwrap_err();
        assert!(matches!(err, Error::Invariant { field: "confidences", .. }));
    }

    #[test]
    fn topology_invariants() {
        let mut t = vgg10();
        t.compression_ratio = 0.5;
        assert!(t.validate().is_err());
        let mut t = vgg10();
        t.raw_feature_bits = 0;
        assert!(t.validate().is_err());
        let mut t = vgg10();
        t.exit_flops.push(1.0);
        assert!(t.validate().is_err());
        let mut t = vgg10();
        t.segment_flops[0] = -1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn transmitted_bits_rounds_up() {
        let mut t = vgg10();
        t.raw_feature_bits = 1000;
        t.compression_ratio = 64.0;
        assert_eq!(t.transmitted_bits(), 16);
        t.raw_feature_bits = 1024;
        assert_eq!(t.transmitted_bits(), 16);
    }

    #[test]
    fn preset_server_costs_close_the_backbone_totals() {
        // whole-backbone MFLOPs of the reference models
        let totals = [
            ("alexnet-cifar10", 62.88),
            ("vgg16bn-cifar10", 333.08),
            ("resnet44-cifar10", 98.52),
            ("alexnet-cifar100", 63.25),
            ("vgg16bn-cifar100", 333.45),
            ("resnet44-cifar100", 98.52),
            ("resnet44-cifar100-3exit", 98.52),
        ];
        for (name, total) in totals {
            let p = cost_preset(name).unwrap();
            let sum: f64 = p.segment_flops.iter().sum::<f64>() + p.server_flops;
            assert!((sum - total).abs() < 1e-9, "{name}");
        }
    }

    #[test]
    fn thresholds_validation() {
        assert!(Thresholds::new(vec![0.9, 0.9], vec![0.0, 1.0]).is_ok());
        assert!(Thresholds::new(vec![1.0, 0.9], vec![0.0, 0.0]).is_err());
        assert!(Thresholds::new(vec![0.9, 0.9], vec![0.0]).is_err());
        assert!(Thresholds::new(vec![0.9, 0.9], vec![0.0, 1.1]).is_err());
    }

    #[test]
    fn holdout_split_takes_the_tail() {
        let samples = (0..10).map(|i| sample(i, vec![0.5; 3])).collect();
        let set = TraceSet::new(vgg10(), samples).unwrap();
        let (a, b) = set.split_holdout(0.2).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(b.samples()[0].id, 8);
    }
}
