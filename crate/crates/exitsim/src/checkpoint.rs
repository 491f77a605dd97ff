//! JSON checkpoints for networks, predictors, regressor bundles and
//! datasets. Every document carries a `format` tag naming its kind.

use std::path::Path;

use exitsim_core::nn::{Activation, Layer, Mlp};
use exitsim_core::optimizer::ThresholdRegressor;
use exitsim_core::zoo::{Dataset, ToyEarlyExitNet};
use exitsim_core::ExitPredictor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MLP_FORMAT: &str = "exitsim-mlp";
pub const TOYNET_FORMAT: &str = "exitsim-toynet";
pub const PREDICTOR_FORMAT: &str = "exitsim-predictor";
pub const REGRESSORS_FORMAT: &str = "exitsim-regressors";
pub const DATASET_FORMAT: &str = "exitsim-dataset";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    in_dim: usize,
    out_dim: usize,
    activation: String,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpDoc {
    seed: u64,
    layers: Vec<LayerDoc>,
}

impl MlpDoc {
    fn from_net(net: &Mlp) -> Self {
        MlpDoc {
            seed: net.seed(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerDoc {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    activation: l.activation.tag().to_string(),
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    fn into_net(self) -> exitsim_core::Result<Mlp> {
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                let activation = Activation::from_tag(&l.activation).ok_or_else(|| exitsim_core::Error::Invariant {
                    field: "activation",
                    sample: None,
                    detail: format!("unknown activation {:?}", l.activation),
                })?;
                Ok(Layer {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: l.weights,
                    bias: l.bias,
                    activation,
                })
            })
            .collect::<exitsim_core::Result<Vec<_>>>()?;
        Mlp::from_layers(layers, self.seed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Tagged<T> {
    format: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    net: MlpDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyNetDoc {
    exit_weights: Vec<f64>,
    segments: Vec<MlpDoc>,
    exit_heads: Vec<MlpDoc>,
    final_head: MlpDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorDoc {
    lambda: Vec<f64>,
    predictor_flops: f64,
    net: MlpDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorDoc {
    lo: f64,
    hi: f64,
    training_bandwidths: Vec<f64>,
    fit_error: f64,
    lambda_net: MlpDoc,
    gamma_net: MlpDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorsDoc {
    num_classes: usize,
    regressors: Vec<RegressorDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    num_classes: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    source_class: Vec<usize>,
}

fn render<T: Serialize>(format: &str, body: T) -> String {
    let mut s = serde_json::to_string_pretty(&Tagged {
        format: format.to_string(),
        body,
    })
    .expect("checkpoint serializes");
    s.push('\n');
    s
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str, format: &str) -> Result<T> {
    let doc: Tagged<T> = serde_json::from_str(text).map_err(|e| Error::parse(path, Some(e.line()), e))?;
    if doc.format != format {
        return Err(Error::parse(path, None, format!("expected format {format:?}, found {:?}", doc.format)));
    }
    Ok(doc.body)
}

/// Value of the `format` key, if the text is a tagged JSON object.
pub fn peek_format(text: &str) -> Option<String> {
    #[derive(Deserialize)]
    struct Peek {
        format: String,
    }
    serde_json::from_str::<Peek>(text).ok().map(|p| p.format)
}

pub fn mlp_to_string(net: &Mlp) -> String {
    render(MLP_FORMAT, MlpFile { net: MlpDoc::from_net(net) })
}

pub fn mlp_from_str(path: &Path, text: &str) -> Result<Mlp> {
    let doc: MlpFile = parse(path, text, MLP_FORMAT)?;
    doc.net.into_net().map_err(|e| Error::invalid(path, None, e))
}

pub fn toynet_to_string(net: &ToyEarlyExitNet) -> String {
    render(
        TOYNET_FORMAT,
        ToyNetDoc {
            exit_weights: net.exit_weights().to_vec(),
            segments: net.segments().iter().map(MlpDoc::from_net).collect(),
            exit_heads: net.exit_heads().iter().map(MlpDoc::from_net).collect(),
            final_head: MlpDoc::from_net(net.final_head()),
        },
    )
}

pub fn toynet_from_str(path: &Path, text: &str) -> Result<ToyEarlyExitNet> {
    let doc: ToyNetDoc = parse(path, text, TOYNET_FORMAT)?;
    let build = || -> exitsim_core::Result<ToyEarlyExitNet> {
        let segments = doc.segments.into_iter().map(MlpDoc::into_net).collect::<exitsim_core::Result<_>>()?;
        let heads = doc.exit_heads.into_iter().map(MlpDoc::into_net).collect::<exitsim_core::Result<_>>()?;
        ToyEarlyExitNet::from_parts(segments, heads, doc.final_head.into_net()?, doc.exit_weights)
    };
    build().map_err(|e| Error::invalid(path, None, e))
}

pub fn predictor_to_string(ep: &ExitPredictor) -> String {
    render(
        PREDICTOR_FORMAT,
        PredictorDoc {
            lambda: ep.lambda().to_vec(),
            predictor_flops: ep.predictor_flops(),
            net: MlpDoc::from_net(ep.net()),
        },
    )
}

pub fn predictor_from_str(path: &Path, text: &str) -> Result<ExitPredictor> {
    let doc: PredictorDoc = parse(path, text, PREDICTOR_FORMAT)?;
    let net = doc.net.into_net().map_err(|e| Error::invalid(path, None, e))?;
    ExitPredictor::new(net, doc.lambda, doc.predictor_flops).map_err(|e| Error::invalid(path, None, e))
}

pub fn regressors_to_string(regs: &[ThresholdRegressor]) -> String {
    render(
        REGRESSORS_FORMAT,
        RegressorsDoc {
            num_classes: regs.first().map_or(0, |r| r.num_classes),
            regressors: regs
                .iter()
                .map(|r| RegressorDoc {
                    lo: r.lo,
                    hi: r.hi,
                    training_bandwidths: r.training_bandwidths.clone(),
                    fit_error: r.fit_error,
                    lambda_net: MlpDoc::from_net(&r.lambda_net),
                    gamma_net: MlpDoc::from_net(&r.gamma_net),
                })
                .collect(),
        },
    )
}

pub fn regressors_from_str(path: &Path, text: &str) -> Result<Vec<ThresholdRegressor>> {
    let doc: RegressorsDoc = parse(path, text, REGRESSORS_FORMAT)?;
    let bad = |detail: String| {
        Error::invalid(
            path,
            None,
            exitsim_core::Error::Invariant {
                field: "regressors",
                sample: None,
                detail,
            },
        )
    };
    if doc.regressors.is_empty() {
        return Err(bad("bundle holds no regressors".into()));
    }
    if doc.num_classes < 2 {
        return Err(bad("num_classes must be at least 2".into()));
    }
    doc.regressors
        .into_iter()
        .map(|r| {
            let lambda_net = r.lambda_net.into_net().map_err(|e| Error::invalid(path, None, e))?;
            let gamma_net = r.gamma_net.into_net().map_err(|e| Error::invalid(path, None, e))?;
            if !(r.lo > 0.0 && r.hi > r.lo) {
                return Err(bad(format!("interval [{}, {}] is not a positive range", r.lo, r.hi)));
            }
            if lambda_net.input_dim() != 1 || gamma_net.input_dim() != 1 || lambda_net.output_dim() != gamma_net.output_dim() {
                return Err(bad("regressor shapes do not match".into()));
            }
            Ok(ThresholdRegressor {
                lo: r.lo,
                hi: r.hi,
                training_bandwidths: r.training_bandwidths,
                lambda_net,
                gamma_net,
                num_classes: doc.num_classes,
                fit_error: r.fit_error,
            })
        })
        .collect()
}

pub fn dataset_to_string(data: &Dataset) -> String {
    render(
        DATASET_FORMAT,
        DatasetDoc {
            num_classes: data.num_classes,
            inputs: data.inputs.clone(),
            labels: data.labels.clone(),
            source_class: data.source_class.clone(),
        },
    )
}

pub fn dataset_from_str(path: &Path, text: &str) -> Result<Dataset> {
    let doc: DatasetDoc = parse(path, text, DATASET_FORMAT)?;
    let bad = |detail: String| {
        Error::invalid(
            path,
            None,
            exitsim_core::Error::Invariant {
                field: "dataset",
                sample: None,
                detail,
            },
        )
    };
    let n = doc.inputs.len();
    if doc.labels.len() != n || doc.source_class.len() != n {
        return Err(bad("inputs, labels and source_class differ in length".into()));
    }
    let dim = doc.inputs.first().map_or(0, Vec::len);
    if doc.inputs.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(bad("inputs are ragged or non-finite".into()));
    }
    if doc.labels.iter().chain(&doc.source_class).any(|&c| c >= doc.num_classes) {
        return Err(bad("class index out of range".into()));
    }
    Ok(Dataset {
        num_classes: doc.num_classes,
        inputs: doc.inputs,
        labels: doc.labels,
        source_class: doc.source_class,
    })
}

macro_rules! file_io {
    ($save:ident, $load:ident, $ty:ty, $to:ident, $from:ident) => {
        pub fn $save(path: &Path, value: &$ty) -> Result<()> {
            fsutil::write_atomic(path, $to(value).as_bytes())
        }

        pub fn $load(path: &Path) -> Result<<$ty as ToOwned>::Owned> {
            $from(path, &fsutil::read_to_string(path)?)
        }
    };
}

file_io!(save_mlp, load_mlp, Mlp, mlp_to_string, mlp_from_str);
file_io!(save_toynet, load_toynet, ToyEarlyExitNet, toynet_to_string, toynet_from_str);
file_io!(save_predictor, load_predictor, ExitPredictor, predictor_to_string, predictor_from_str);
file_io!(save_regressors, load_regressors, [ThresholdRegressor], regressors_to_string, regressors_from_str);
file_io!(save_dataset, load_dataset, Dataset, dataset_to_string, dataset_from_str);

#[cfg(test)]
mod tests {
    use super::*;
    use exitsim_core::zoo::{generate_dataset, SynthSpec, ToyNetSpec};

    #[test]
    fn mlp_round_trip_is_exact() {
        let net = Mlp::new(&[3, 5, 2], &[Activation::Relu, Activation::Softmax], 42).unwrap();
        let text = mlp_to_string(&net);
        let back = mlp_from_str(Path::new("m"), &text).unwrap();
        assert_eq!(back, net);
        assert_eq!(mlp_to_string(&back), text);
    }

    #[test]
    fn toynet_and_dataset_round_trip() {
        let net = ToyEarlyExitNet::new(&ToyNetSpec::new(4, 3, 9), vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(toynet_from_str(Path::new("n"), &toynet_to_string(&net)).unwrap(), net);
        let data = generate_dataset(&SynthSpec::blobs(20, 3, 4, 2.0, 1.0, 1)).unwrap();
        assert_eq!(dataset_from_str(Path::new("d"), &dataset_to_string(&data)).unwrap(), data);
    }

    #[test]
    fn predictor_scores_survive_round_trip() {
        let net = Mlp::new(&[2, 8, 2], &[Activation::Relu, Activation::Sigmoid], 3).unwrap();
        let ep = ExitPredictor::new(net, vec![0.9, 0.8], 0.4).unwrap();
        let back = predictor_from_str(Path::new("p"), &predictor_to_string(&ep)).unwrap();
        assert_eq!(back.lambda(), &[0.9, 0.8]);
        assert_eq!(back.score(&[0.3, -0.7]).unwrap(), ep.score(&[0.3, -0.7]).unwrap());
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let net = Mlp::new(&[2, 2], &[Activation::Sigmoid], 0).unwrap();
        let text = mlp_to_string(&net);
        assert_eq!(peek_format(&text).as_deref(), Some(MLP_FORMAT));
        assert!(matches!(predictor_from_str(Path::new("p"), &text), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_activation_is_an_invariant_error() {
        let net = Mlp::new(&[2, 2], &[Activation::Sigmoid], 0).unwrap();
        let text = mlp_to_string(&net).replace("\"sigmoid\"", "\"tanh\"");
        assert!(matches!(mlp_from_str(Path::new("m"), &text), Err(Error::Invalid { .. })));
    }
}
