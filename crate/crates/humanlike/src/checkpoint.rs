//! JSON checkpoints for base models and LoRA adapters. Both carry a magic
//! string and a format version; floats round-trip exactly.

use std::fs;
use std::path::Path;

use humanlike_core::lm::{LanguageModel, ModelConfig};
use humanlike_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &str = "humanlike-model";
pub const ADAPTER_MAGIC: &str = "humanlike-lora";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TensorData {
    fn into_tensor(self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape, self.data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub magic: String,
    pub version: u32,
    pub config: ModelConfig,
    pub weights: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub magic: String,
    pub version: u32,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Hex SHA-256 of the base weights the adapters were trained on.
    pub base_digest: String,
    pub layers: Vec<AdapterLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    /// Name of the base weight the adapter modifies.
    pub target: String,
    pub a: TensorData,
    pub b: TensorData,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: message.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| format_error(path, e.to_string()))?;
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, magic: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_error(path, e.to_string()))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(m) if m == magic => {}
        other => {
            return Err(format_error(
                path,
                format!("expected a `{magic}` file, found magic {other:?}"),
            ))
        }
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        other => {
            return Err(format_error(
                path,
                format!("unsupported format version {other:?}, expected {FORMAT_VERSION}"),
            ))
        }
    }
    serde_json::from_value(value).map_err(|e| format_error(path, e.to_string()))
}

/// Saves the base weights (adapters are never included).
pub fn save_model(path: impl AsRef<Path>, model: &LanguageModel) -> Result<()> {
    let ckpt = ModelCheckpoint {
        magic: MODEL_MAGIC.into(),
        version: FORMAT_VERSION,
        config: model.config().clone(),
        weights: model
            .base_weights()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                tensor: (&t).into(),
            })
            .collect(),
    };
    write_json(path.as_ref(), &ckpt)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LanguageModel> {
    let path = path.as_ref();
    let ckpt: ModelCheckpoint = read_json(path, MODEL_MAGIC)?;
    let weights = ckpt
        .weights
        .into_iter()
        .map(|w| Ok((w.name, w.tensor.into_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    LanguageModel::from_weights(ckpt.config, &weights).map_err(|e| format_error(path, e.to_string()))
}

pub fn save_adapters(path: impl AsRef<Path>, model: &LanguageModel) -> Result<()> {
    let path = path.as_ref();
    let adapters = model.adapters();
    let first = adapters
        .first()
        .ok_or_else(|| format_error(path, "model has no adapters to save"))?
        .1
        .adapter;
    let store = model.store();
    let ckpt = AdapterCheckpoint {
        magic: ADAPTER_MAGIC.into(),
        version: FORMAT_VERSION,
        rank: first.rank,
        alpha: first.alpha,
        dropout: first.dropout,
        base_digest: hex(&model.base_digest()),
        layers: adapters
            .iter()
            .map(|(name, layer)| AdapterLayer {
                target: name.clone(),
                a: (&store.get(layer.adapter.a).value).into(),
                b: (&store.get(layer.adapter.b).value).into(),
            })
            .collect(),
    };
    write_json(path, &ckpt)
}

/// Attaches stored adapters to `model`. The base must be the one the
/// adapters were trained on, and every shape must fit.
pub fn load_adapters(path: impl AsRef<Path>, model: &mut LanguageModel) -> Result<()> {
    let path = path.as_ref();
    let ckpt: AdapterCheckpoint = read_json(path, ADAPTER_MAGIC)?;
    let digest = hex(&model.base_digest());
    if ckpt.base_digest != digest {
        return Err(format_error(
            path,
            format!(
                "adapters were trained on base {}, this base is {digest}",
                ckpt.base_digest
            ),
        ));
    }
    let layers = ckpt
        .layers
        .into_iter()
        .map(|l| Ok((l.target, l.a.into_tensor()?, l.b.into_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    model
        .load_lora(ckpt.rank, ckpt.alpha, ckpt.dropout, &layers)
        .map_err(|e| format_error(path, e.to_string()))
}
