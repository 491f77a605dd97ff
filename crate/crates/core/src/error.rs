use alloc::boxed::Box;
use alloc::string::String;

use crate::optimizer::PolicyPoint;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value violates a data-model invariant. `sample` is the offending
    /// sample id when the violation is per-sample.
    #[error("invalid {field}{}: {detail}", sample.map(|id| alloc::format!(" (sample {id})")).unwrap_or_default())]
    Invariant {
        field: &'static str,
        sample: Option<u64>,
        detail: String,
    },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("no predictor scores for sample {id}")]
    MissingScores { id: u64 },

    #[error("sample {id} carries no features")]
    MissingFeatures { id: u64 },

    #[error(
        "no threshold combination meets the latency budget; fastest point has mean latency {:.6} s",
        .best.latency_s
    )]
    Infeasible { best: Box<PolicyPoint> },

    #[error("bandwidth interval {index} has {points} training points, need at least 2")]
    EmptyInterval { index: usize, points: usize },

    #[error("bandwidth {bandwidth} bit/s is not covered by any interval")]
    BandwidthOutOfRange { bandwidth: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invariant(field: &'static str, sample: Option<u64>, detail: impl Into<String>) -> Self {
        Error::Invariant {
            field,
            sample,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                expected,
                found,
            })
        }
    }
}
