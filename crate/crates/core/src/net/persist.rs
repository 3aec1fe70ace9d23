use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{LayerParams, LayerSpec, Network};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "certvote-net";
pub const FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`Network`].
///
/// ```json
/// {"format":"certvote-net","version":1,"temperature":10.0,
///  "input_shape":[16],"label_count":4,
///  "layers":[{"kind":"dense","params":{"in_dim":16,"out_dim":4},
///             "weights":[...],"bias":[...]}]}
/// ```
///
/// Arrays are row-major; dense weights are `[out][in]`, convolution weights
/// `[out_channel][in_channel][row][col]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format: String,
    pub version: u32,
    pub temperature: f64,
    pub input_shape: Vec<usize>,
    pub label_count: usize,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDocument {
    pub kind: String,
    pub params: Map<String, Value>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn spec_params(spec: &LayerSpec) -> Map<String, Value> {
    let value = match *spec {
        LayerSpec::Dense { in_dim, out_dim } => json!({ "in_dim": in_dim, "out_dim": out_dim }),
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
        } => json!({
            "kernel_h": kernel_h,
            "kernel_w": kernel_w,
            "in_channels": in_channels,
            "out_channels": out_channels,
        }),
        LayerSpec::Maxpool2d => json!({ "window": [2, 2] }),
        LayerSpec::Dropout { keep } => json!({ "keep": keep }),
        LayerSpec::Relu | LayerSpec::Flatten => json!({}),
    };
    match value {
        Value::Object(map) => map,
        _ => unreachable!(),
    }
}

fn parse_spec(doc: &LayerDocument) -> Result<LayerSpec> {
    let mut tagged = doc.params.clone();
    tagged.remove("window");
    tagged.insert("kind".into(), Value::String(doc.kind.clone()));
    serde_json::from_value(Value::Object(tagged))
        .map_err(|e| Error::Format(format!("bad `{}` layer: {e}", doc.kind)))
}

impl Network {
    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            temperature: self.temperature,
            input_shape: self.input_shape.clone(),
            label_count: self.label_count,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    kind: l.spec.kind().into(),
                    params: spec_params(&l.spec),
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: NetworkDocument) -> Result<Network> {
        if doc.format != FORMAT_TAG {
            return Err(Error::Format(format!("unknown model format `{}`", doc.format)));
        }
        if doc.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                doc.version
            )));
        }
        let layers = doc
            .layers
            .iter()
            .map(|l| Ok(LayerParams::new(parse_spec(l)?, l.weights.clone(), l.bias.clone())))
            .collect::<Result<Vec<_>>>()?;
        let net = Network::from_parts(&doc.input_shape, layers, doc.temperature)?;
        if net.label_count != doc.label_count {
            return Err(Error::Consistency(format!(
                "document declares {} labels but the final layer has {}",
                doc.label_count, net.label_count
            )));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("network documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Network> {
        let doc: NetworkDocument =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
        Network::from_document(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        Network::from_json(&fs::read_to_string(path)?)
    }
}
