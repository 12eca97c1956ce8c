//! `EFFTCKPT` container.
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 8     | magic `EFFTCKPT`                         |
//! | 4     | format version, `u32` little-endian      |
//! | 8     | header length `n`, `u64` little-endian   |
//! | n     | UTF-8 JSON header                        |
//! | rest  | `f64` little-endian buffers, header order |
//!
//! The header lists every tensor by name and shape; the buffers follow in
//! exactly that order with nothing after the last one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{FactorSpec, Factors};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::RunReport;
use crate::vit::{TuningMask, ViTConfig, ViTModel};

pub const MAGIC: &[u8; 8] = b"EFFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Parameterization name, or `linear`.
    pub kind: String,
    pub model: ViTConfig,
    pub spec: Option<FactorSpec>,
    pub seed: u64,
    pub mask: TuningMask,
    pub backbone_digest: String,
    pub report: Option<RunReport>,
    pub tensors: Vec<TensorEntry>,
}

/// A fully restored model, optional factor set and training report.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ViTModel<f64>,
    pub factors: Option<Factors<f64>>,
    pub spec: Option<FactorSpec>,
    pub mask: TuningMask,
    pub seed: u64,
    pub report: Option<RunReport>,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut all = self.model.tensors();
        if let Some(f) = &self.factors {
            all.extend(f.tensors().into_iter().map(|(n, t)| (format!("factors.{n}"), t)));
        }
        all
    }

    pub fn header(&self) -> Header {
        Header {
            kind: self
                .factors
                .as_ref()
                .map_or("linear".into(), |f| f.method().to_string()),
            model: self.model.cfg.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            mask: self.mask.clone(),
            backbone_digest: self.model.backbone_digest(),
            report: self.report.clone(),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.factors.is_some() != self.spec.is_some() {
            return Err(Error::Format("factors and their spec must be saved together".into()));
        }
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        for (_, t) in self.named_tensors() {
            for &x in t.data() {
                out.extend(x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 20 {
            return Err(fmt(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt("not an EFFTCKPT file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(fmt(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("eight bytes")) as usize;
        let header_bytes = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| fmt("checkpoint header truncated".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| fmt(format!("bad checkpoint header: {e}")))?;

        let mut body = &bytes[20 + header_len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 8)
            .sum();
        if body.len() != expected {
            return Err(fmt(format!(
                "checkpoint body holds {} bytes, header declares {expected}",
                body.len()
            )));
        }

        // Allocate the right structures, then overwrite every value.
        let mut model = ViTModel::build(&header.model, &mut Rng::new(0))?;
        let mut factors = header
            .spec
            .as_ref()
            .map(|s| Factors::init(s, 0.0, &mut Rng::new(0)))
            .transpose()?;
        let mut ckpt_names: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if let Some(f) = &factors {
            ckpt_names.extend(
                f.tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("factors.{n}"), t.shape().to_vec())),
            );
        }
        if ckpt_names.len() != header.tensors.len() {
            return Err(fmt(format!(
                "header lists {} tensors, configuration implies {}",
                header.tensors.len(),
                ckpt_names.len()
            )));
        }
        for ((name, shape), entry) in ckpt_names.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(fmt(format!(
                    "header tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }

        let mut targets = model.tensors_mut();
        if let Some(f) = factors.as_mut() {
            targets.extend(f.tensors_mut());
        }
        for t in targets {
            let n = t.len();
            let (chunk, rest) = body.split_at(n * 8);
            for (x, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *x = f64::from_le_bytes(b.try_into().expect("eight bytes"));
            }
            body = rest;
        }
        if model.backbone_digest() != header.backbone_digest {
            return Err(fmt("backbone digest does not match the stored weights".into()));
        }
        if header.kind != factors.as_ref().map_or("linear".into(), |f| f.method().to_string()) {
            return Err(fmt(format!("header kind `{}` does not match its spec", header.kind)));
        }

        Ok(Checkpoint {
            model,
            factors,
            spec: header.spec,
            mask: header.mask,
            seed: header.seed,
            report: header.report,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
