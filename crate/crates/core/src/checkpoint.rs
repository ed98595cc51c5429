//! Versioned binary checkpoint container.
//!
//! Layout: `b"OCTCKPT\0"`, `u32` format version, `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, HeadConfig, TissueModel};
use crate::nn::{Module, ParamKind};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OCTCKPT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Both branch encoders after contrastive pretraining.
    Pretrain,
    /// Encoders plus classification head.
    Model,
    /// A single trunk used to initialize both branches.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    pub head: Option<HeadConfig>,
    pub seed: u64,
    pub config_hash: Option<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, encoder: EncoderConfig, head: Option<HeadConfig>, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind,
                encoder,
                head,
                seed,
                config_hash: None,
                meta: serde_json::Value::Null,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.header.config_hash = Some(hash.into());
        self
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.header.meta = meta;
        self
    }

    /// Append every parameter of `module` under `prefix`.
    pub fn add_module(&mut self, prefix: &str, module: &dyn Module) {
        let (tensors, data) = (&mut self.header.tensors, &mut self.data);
        module.visit_ref(prefix, &mut |name, p| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
                buffer: p.kind == ParamKind::Buffer,
                offset: data.len(),
            });
            data.extend_from_slice(&p.value);
        });
    }

    pub fn from_encoders(model: &TissueModel, seed: u64) -> Self {
        let mut c = Self::new(CheckpointKind::Pretrain, model.encoder_config, None, seed);
        c.add_module("f", &model.f);
        c.add_module("g", &model.g);
        c
    }

    pub fn from_model(model: &TissueModel, seed: u64) -> Self {
        let mut c = Self::new(CheckpointKind::Model, model.encoder_config, Some(model.head_config), seed);
        c.add_module("f", &model.f);
        c.add_module("g", &model.g);
        c.add_module("head", &model.head);
        c
    }

    /// Rebuild a full model from a `model` checkpoint.
    pub fn to_model(&self) -> Result<TissueModel> {
        let head = match (self.header.kind, self.header.head) {
            (CheckpointKind::Model, Some(h)) => h,
            _ => return Err(Error::Checkpoint("not a full model checkpoint".into())),
        };
        let mut m = TissueModel::scratch(self.header.encoder, head, self.header.seed)?;
        self.restore_into(&mut m.f, "f")?;
        self.restore_into(&mut m.g, "g")?;
        self.restore_into(&mut m.head, "head")?;
        Ok(m)
    }

    pub fn check_encoder(&self, expected: &EncoderConfig) -> Result<()> {
        let got = &self.header.encoder;
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint encoder {:?}/{} does not match configured {:?}/{}",
                got.architecture, got.embed_dim, expected.architecture, expected.embed_dim
            )));
        }
        Ok(())
    }

    pub fn check_config_hash(&self, expected: &str) -> Result<()> {
        match &self.header.config_hash {
            Some(h) if h == expected => Ok(()),
            Some(h) => Err(Error::Checkpoint(format!("config hash {h} does not match {expected}"))),
            None => Err(Error::Checkpoint("checkpoint carries no config hash".into())),
        }
    }

    /// Copy tensors named `prefix.<param>` into `module`; every parameter must be present.
    pub fn restore_into(&self, module: &mut dyn Module, prefix: &str) -> Result<()> {
        let index: HashMap<&str, &TensorEntry> = self.header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        module.visit(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match index.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(Error::Checkpoint(format!("tensor {name}: shape {:?} != {:?}", t.shape, p.shape)))
                }
                Some(t) => {
                    let n = p.len();
                    p.value.copy_from_slice(&self.data[t.offset..t.offset + n])
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section not f32-aligned"));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset + n > data.len() {
                return Err(bad(&format!("tensor {} runs past end of data", t.name)));
            }
        }
        Ok(Self { header, data })
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        crate::format::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.encode()?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
