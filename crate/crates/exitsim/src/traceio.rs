//! Line-delimited JSON trace files.
//!
//! The first line is the topology header, every further non-blank line one
//! sample. Reals are written in shortest round-trip form so a load after a
//! save reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use exitsim_core::{ExitTopology, SampleTrace, TraceSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "N")]
    num_exits: usize,
    #[serde(rename = "P")]
    num_classes: usize,
    segment_flops: Vec<f64>,
    exit_flops: Vec<f64>,
    server_flops: f64,
    predictor_flops: f64,
    raw_feature_bits: u64,
    compression_ratio: f64,
}

impl From<&ExitTopology> for Header {
    fn from(t: &ExitTopology) -> Self {
        Header {
            num_exits: t.num_exits,
            num_classes: t.num_classes,
            segment_flops: t.segment_flops.clone(),
            exit_flops: t.exit_flops.clone(),
            server_flops: t.server_flops,
            predictor_flops: t.predictor_flops,
            raw_feature_bits: t.raw_feature_bits,
            compression_ratio: t.compression_ratio,
        }
    }
}

impl From<Header> for ExitTopology {
    fn from(h: Header) -> Self {
        ExitTopology {
            num_exits: h.num_exits,
            segment_flops: h.segment_flops,
            exit_flops: h.exit_flops,
            server_flops: h.server_flops,
            predictor_flops: h.predictor_flops,
            num_classes: h.num_classes,
            raw_feature_bits: h.raw_feature_bits,
            compression_ratio: h.compression_ratio,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    label: usize,
    confidences: Vec<f64>,
    predicted: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

/// Renders a trace set in file form.
pub fn to_string(set: &TraceSet) -> String {
    let mut out = String::new();
    let header = serde_json::to_string(&Header::from(set.topology())).expect("header serializes");
    out.push_str(&header);
    out.push('\n');
    for s in set.samples() {
        let rec = Record {
            id: s.id,
            label: s.label,
            confidences: s.confidences.clone(),
            predicted: s.predicted.clone(),
            features: s.features.clone(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    out
}

/// Parses file contents; `path` only labels errors.
pub fn from_str(path: &Path, text: &str) -> Result<TraceSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (idx, first) = lines
        .next()
        .ok_or_else(|| Error::parse(path, Some(1), "missing header line"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::parse(path, Some(idx + 1), e))?;
    let topology = ExitTopology::from(header);
    topology.validate().map_err(|e| Error::invalid(path, Some(idx + 1), e))?;

    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines {
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::parse(path, Some(idx + 1), e))?;
        let sample = SampleTrace {
            id: rec.id,
            label: rec.label,
            confidences: rec.confidences,
            predicted: rec.predicted,
            features: rec.features,
        };
        sample
            .validate(&topology)
            .map_err(|e| Error::invalid(path, Some(idx + 1), e))?;
        if !seen.insert(sample.id) {
            return Err(Error::invalid(
                path,
                Some(idx + 1),
                exitsim_core::Error::Invariant {
                    field: "id",
                    sample: Some(sample.id),
                    detail: "duplicate sample id".into(),
                },
            ));
        }
        samples.push(sample);
    }
    Ok(TraceSet::new(topology, samples)?)
}

pub fn save(path: &Path, set: &TraceSet) -> Result<()> {
    fsutil::write_atomic(path, to_string(set).as_bytes())
}

pub fn load(path: &Path) -> Result<TraceSet> {
    from_str(path, &fsutil::read_to_string(path)?)
}
