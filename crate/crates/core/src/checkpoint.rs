//! Versioned checkpoint container.
//!
//! Layout: the magic line `REDERCKPT1\n`, a little-endian `u64` header
//! length, a JSON header (model config, vocabulary, tensor names and
//! shapes, free-form metadata), then every tensor's data as little-endian
//! `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::atomic_write;
use crate::error::{RederError, Result};
use crate::model::{DuplexModel, ModelConfig, ModelParams, ModelWeights};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &[u8] = b"REDERCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Model parameters first, in [`ModelWeights::named`] order, then any
    /// extra state (optimizer moments).
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &DuplexModel, vocab: &Vocab) -> Self {
        Self {
            config: model.config.clone(),
            vocab: vocab.clone(),
            tensors: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.symbols().to_vec(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RederError::Checkpoint(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing REDERCKPT1 magic header"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])?;
        let mut body = rest[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = body.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad(&format!("tensor {} truncated", e.name)));
            }
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if body.next().is_some() || (rest.len() - hlen) % 8 != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut syms = header.vocab.into_iter();
        syms.next();
        syms.next();
        Ok(Self {
            config: header.config,
            vocab: Vocab::from_symbols(syms)?,
            tensors,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model. With `expected`, any config difference is an
    /// error naming both configs.
    pub fn model(&self, expected: Option<&ModelConfig>) -> Result<DuplexModel> {
        if let Some(want) = expected {
            if want != &self.config {
                return Err(RederError::Checkpoint(format!(
                    "config mismatch: checkpoint has {:?}, run expects {:?}",
                    self.config, want
                )));
            }
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(RederError::Checkpoint(format!(
                "vocabulary has {} entries but config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let template = DuplexModel::zero_layers(self.config.clone(), 0)?;
        let names: Vec<String> = template.params.named().into_iter().map(|(n, _)| n).collect();
        let mut values = Vec::with_capacity(names.len());
        for name in &names {
            let t = self
                .tensor(name)
                .ok_or_else(|| RederError::Checkpoint(format!("missing tensor {name}")))?;
            values.push(t.clone());
        }
        let params: ModelParams = ModelWeights::from_ordered(self.config.layers, values)
            .ok_or_else(|| RederError::Checkpoint("parameter count mismatch".into()))?;
        DuplexModel::from_params(self.config.clone(), params)
    }
}
