//! JSON model files.
//!
//! ```text
//! { "format_version": 1, "kind": "mlp", "layers": [LAYER, ...] }
//! { "format_version": 1, "kind": "stochastic",
//!   "mu_layers": [...], "sigma_layers": [...], "sigma_floor": 1e-4,
//!   "encoder_layers": [...] }            // encoder_layers optional
//! { "format_version": 1, "kind": "logistic", "layers": [LAYER] }
//! LAYER = { "in": n, "out": m, "activation": "tanh", "weights": [row-major m·n], "bias": [m] }
//! ```
//!
//! Floats are written in shortest round-trip form, so a load reproduces the
//! saved parameters bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, FeatureMap, Layer, Mlp, StochasticGenerator};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Any network document the toolkit reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelFile {
    Mlp(Mlp),
    Stochastic {
        generator: StochasticGenerator,
        encoder: Option<Mlp>,
    },
    Logistic(FeatureMap),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "in")]
    inputs: usize,
    #[serde(rename = "out")]
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    format_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<RawLayer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu_layers: Option<Vec<RawLayer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_layers: Option<Vec<RawLayer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_layers: Option<Vec<RawLayer>>,
}

fn raw_layers(net: &Mlp) -> Vec<RawLayer> {
    net.layers()
        .iter()
        .map(|l| RawLayer {
            inputs: l.inputs(),
            outputs: l.outputs(),
            activation: l.activation,
            weights: l.weights.as_slice().to_vec(),
            bias: l.bias.clone(),
        })
        .collect()
}

fn build_mlp(field: &str, raw: Vec<RawLayer>) -> Result<Mlp> {
    if raw.is_empty() {
        return Err(Error::Validation {
            layer: field.to_string(),
            reason: "no layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(raw.len());
    let mut prev_out: Option<usize> = None;
    for (i, r) in raw.into_iter().enumerate() {
        let name = format!("{field}[{i}]");
        let invalid = |reason: String| Error::Validation {
            layer: name.clone(),
            reason,
        };
        if let Some(p) = prev_out {
            if p != r.inputs {
                return Err(invalid(format!(
                    "declares {} inputs but the previous layer has {} outputs",
                    r.inputs, p
                )));
            }
        }
        if r.weights.len() != r.inputs * r.outputs {
            return Err(invalid(format!(
                "weights has {} entries, expected {}×{}",
                r.weights.len(),
                r.outputs,
                r.inputs
            )));
        }
        if r.bias.len() != r.outputs {
            return Err(invalid(format!(
                "bias has {} entries, expected {}",
                r.bias.len(),
                r.outputs
            )));
        }
        let weights = Matrix::new(r.outputs, r.inputs, r.weights)
            .map_err(|e| invalid(e.to_string()))?;
        layers.push(Layer::new(weights, r.bias, r.activation).map_err(|e| invalid(e.to_string()))?);
        prev_out = Some(r.outputs);
    }
    Mlp::new(layers)
}

fn require<T>(value: Option<T>, field: &str, kind: &str) -> Result<T> {
    value.ok_or_else(|| Error::Parse(format!("field `{field}` is required for kind \"{kind}\"")))
}

impl ModelFile {
    pub fn to_json(&self) -> String {
        let mut doc = RawDocument {
            format_version: FORMAT_VERSION,
            kind: String::new(),
            layers: None,
            mu_layers: None,
            sigma_layers: None,
            sigma_floor: None,
            encoder_layers: None,
        };
        match self {
            ModelFile::Mlp(net) => {
                doc.kind = "mlp".into();
                doc.layers = Some(raw_layers(net));
            }
            ModelFile::Stochastic { generator, encoder } => {
                doc.kind = "stochastic".into();
                doc.mu_layers = Some(raw_layers(generator.mu_net()));
                doc.sigma_layers = Some(raw_layers(generator.sigma_net()));
                doc.sigma_floor = Some(generator.sigma_floor());
                doc.encoder_layers = encoder.as_ref().map(raw_layers);
            }
            ModelFile::Logistic(map) => {
                doc.kind = "logistic".into();
                if let FeatureMap::Logistic { weights, bias } = map {
                    doc.layers = Some(vec![RawLayer {
                        inputs: weights.cols(),
                        outputs: weights.rows(),
                        activation: Activation::Identity,
                        weights: weights.as_slice().to_vec(),
                        bias: bias.clone(),
                    }]);
                }
            }
        }
        serde_json::to_string(&doc).expect("model documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::Parse(format!("unsupported format_version {v}"))),
            None => return Err(Error::Parse("missing field `format_version`".into())),
        }
        let doc: RawDocument = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        match doc.kind.as_str() {
            "mlp" => Ok(ModelFile::Mlp(build_mlp(
                "layers",
                require(doc.layers, "layers", "mlp")?,
            )?)),
            "stochastic" => {
                let mu = build_mlp("mu_layers", require(doc.mu_layers, "mu_layers", "stochastic")?)?;
                let sigma = build_mlp(
                    "sigma_layers",
                    require(doc.sigma_layers, "sigma_layers", "stochastic")?,
                )?;
                let floor = require(doc.sigma_floor, "sigma_floor", "stochastic")?;
                let encoder = doc
                    .encoder_layers
                    .map(|l| build_mlp("encoder_layers", l))
                    .transpose()?;
                Ok(ModelFile::Stochastic {
                    generator: StochasticGenerator::new(mu, sigma, floor)?,
                    encoder,
                })
            }
            "logistic" => {
                let net = build_mlp("layers", require(doc.layers, "layers", "logistic")?)?;
                if net.layers().len() != 1 || net.layers()[0].activation != Activation::Identity {
                    return Err(Error::Validation {
                        layer: "layers".into(),
                        reason: "logistic model must be a single identity layer".into(),
                    });
                }
                let layer = net.layers()[0].clone();
                Ok(ModelFile::Logistic(FeatureMap::logistic(layer.weights, layer.bias)?))
            }
            other => Err(Error::Parse(format!("unknown model kind \"{other}\""))),
        }
    }
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_json())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    ModelFile::from_json(&text)
}
