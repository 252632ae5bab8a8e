//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `I2FCKPT\0`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header (network kind, config, `m_max`, input
//! statistics, tensor names and shapes), then every tensor as little-endian
//! `f32` in header order.

use std::fs;
use std::path::Path;

use im2flow_nn::{Module, TensorKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{SmallCnn, SmallCnnConfig};
use crate::model::{Im2FlowNet, ModelConfig};

pub const MAGIC: &[u8; 8] = b"I2FCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds a {found} network, expected {expected}")]
    KindMismatch { expected: &'static str, found: &'static str },
    #[error("tensor `{name}` has shape {found:?}, the config expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint config rejected: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Network {
    Im2flow { config: ModelConfig, m_max: f64 },
    Classifier { config: SmallCnnConfig },
}

impl Network {
    fn name(&self) -> &'static str {
        match self {
            Network::Im2flow { .. } => "im2flow",
            Network::Classifier { .. } => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub network: Network,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

fn encode(network: Network, module: &dyn Module<f32>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    let (mut input_mean, mut input_std) = (Vec::new(), Vec::new());
    module.visit_state("", &mut |name, _, shape, v| {
        tensors.push(TensorEntry { name: name.to_string(), shape: shape.to_vec() });
        for x in v {
            body.extend_from_slice(&x.to_le_bytes());
        }
        match name {
            "input_mean" => input_mean = v.iter().map(|x| *x as f64).collect(),
            "input_std" => input_std = v.iter().map(|x| *x as f64).collect(),
            _ => {}
        }
    });
    let header = Header { network, input_mean, input_std, tensors };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

/// Parses the header, returning it with the byte offset of the tensor data.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Corrupt(format!("{} bytes is shorter than the fixed preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| CheckpointError::Corrupt("header extends past end of file".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("unreadable header: {e}")))?;
    Ok((header, 16 + len))
}

pub fn read_header(path: &Path) -> Result<Header, CheckpointError> {
    Ok(parse_header(&fs::read(path)?)?.0)
}

/// Fills `module` from the tensor section, checking names and shapes against
/// what the module expects.
fn fill(header: &Header, data: &[u8], module: &mut dyn Module<f32>) -> Result<(), CheckpointError> {
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != expected * 4 {
        return Err(CheckpointError::Corrupt(format!(
            "tensor section has {} bytes, header describes {}",
            data.len(),
            expected * 4
        )));
    }
    let mut entries = header.tensors.iter();
    let mut offset = 0;
    let mut result = Ok(());
    module.visit_state_mut("", &mut |name, _: TensorKind, shape, v| {
        if result.is_err() {
            return;
        }
        let Some(entry) = entries.next() else {
            result = Err(CheckpointError::Corrupt(format!("missing tensor `{name}`")));
            return;
        };
        if entry.name != name {
            result = Err(CheckpointError::Corrupt(format!("expected tensor `{name}`, found `{}`", entry.name)));
            return;
        }
        if entry.shape != shape {
            result = Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: entry.shape.clone(),
            });
            return;
        }
        let len = 4 * v.len();
        for (dst, chunk) in v.iter_mut().zip(data[offset..offset + len].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        offset += len;
    });
    result?;
    if let Some(extra) = entries.next() {
        return Err(CheckpointError::Corrupt(format!("unexpected tensor `{}`", extra.name)));
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn model_bytes(net: &Im2FlowNet<f32>) -> Vec<u8> {
    encode(Network::Im2flow { config: net.config.clone(), m_max: net.m_max() }, net)
}

pub fn parse_model(bytes: &[u8]) -> Result<Im2FlowNet<f32>, CheckpointError> {
    let (header, start) = parse_header(bytes)?;
    let Network::Im2flow { config, m_max } = header.network.clone() else {
        return Err(CheckpointError::KindMismatch { expected: "im2flow", found: header.network.name() });
    };
    let mut net = Im2FlowNet::new(config, m_max).map_err(|e| CheckpointError::Config(e.to_string()))?;
    fill(&header, &bytes[start..], &mut net)?;
    Ok(net)
}

pub fn save_model(net: &Im2FlowNet<f32>, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &model_bytes(net))
}

pub fn load_model(path: &Path) -> Result<Im2FlowNet<f32>, CheckpointError> {
    parse_model(&fs::read(path)?)
}

pub fn classifier_bytes(net: &SmallCnn<f32>) -> Vec<u8> {
    encode(Network::Classifier { config: net.config.clone() }, net)
}

pub fn parse_classifier(bytes: &[u8]) -> Result<SmallCnn<f32>, CheckpointError> {
    let (header, start) = parse_header(bytes)?;
    let Network::Classifier { config } = header.network.clone() else {
        return Err(CheckpointError::KindMismatch { expected: "classifier", found: header.network.name() });
    };
    let mut net = SmallCnn::new(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    fill(&header, &bytes[start..], &mut net)?;
    Ok(net)
}

pub fn save_classifier(net: &SmallCnn<f32>, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &classifier_bytes(net))
}

pub fn load_classifier(path: &Path) -> Result<SmallCnn<f32>, CheckpointError> {
    parse_classifier(&fs::read(path)?)
}
