//! Single-file checkpoint container.
//!
//! ```text
//! [u8   version]
//! [u64  header length, little endian]
//! [header: UTF-8 JSON]
//! [float blocks: little-endian f64, in the order listed by header.blocks]
//! ```
//!
//! Blocks are the parameters (`param/<name>`) followed, when a phase was
//! interrupted, by the optimizer moments (`adam.m/<name>`, `adam.v/<name>`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::Phase;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamSet, Tensor};

pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
}

/// An interrupted phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    /// Optimizer steps already applied.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
    names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: Vec<String>,
    completed: Vec<Phase>,
    progress: Option<Progress>,
    checksums: BTreeMap<String, String>,
    losses: Vec<LossRecord>,
    optimizer: Option<OptimizerHeader>,
    blocks: Vec<BlockEntry>,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub completed: Vec<Phase>,
    pub progress: Option<Progress>,
    /// `<phase>/<parameter prefix>` → checksum at the end of that phase.
    pub checksums: BTreeMap<String, String>,
    pub losses: Vec<LossRecord>,
    pub params: ParamSet,
    /// Present only while a phase is in progress.
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn has(&self, phase: Phase) -> bool {
        self.completed.contains(&phase)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut tensors: Vec<&Tensor> = Vec::new();
        for (name, p) in self.params.iter() {
            blocks.push(BlockEntry { name: format!("param/{name}"), rows: p.value.rows(), cols: p.value.cols() });
            tensors.push(&p.value);
        }
        let optimizer = self.optimizer.as_ref().map(|o| {
            for (kind, set) in [("adam.m", &o.m), ("adam.v", &o.v)] {
                for (name, t) in o.names.iter().zip(set) {
                    blocks.push(BlockEntry { name: format!("{kind}/{name}"), rows: t.rows(), cols: t.cols() });
                    tensors.push(t);
                }
            }
            OptimizerHeader { config: o.config.clone(), step: o.step, names: o.names.clone() }
        });
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            completed: self.completed.clone(),
            progress: self.progress.clone(),
            checksums: self.checksums.clone(),
            losses: self.losses.clone(),
            optimizer,
            blocks,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len() + 8 * self.params.numel());
        out.push(FORMAT_VERSION);
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for t in tensors {
            out.extend(t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (&version, rest) =
            bytes.split_first().ok_or_else(|| Error::Format("empty checkpoint".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if rest.len() < 8 {
            return Err(Error::Format("truncated header length".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        let mut data = &rest[len..];

        let mut params = ParamSet::new();
        let mut moments: BTreeMap<String, Tensor> = BTreeMap::new();
        for b in &header.blocks {
            let n = b.rows * b.cols;
            if data.len() < 8 * n {
                return Err(Error::Format(format!("block {} truncated", b.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Tensor::from_rows(b.rows, b.cols, values)?;
            match b.name.split_once('/') {
                Some(("param", name)) => params.insert(name, t),
                Some(("adam.m" | "adam.v", _)) => {
                    moments.insert(b.name.clone(), t);
                }
                _ => return Err(Error::Format(format!("unknown block {}", b.name))),
            }
        }
        if !data.is_empty() {
            return Err(Error::Format("trailing bytes after last block".into()));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let take = |kind: &str, name: &str, moments: &mut BTreeMap<String, Tensor>| {
                    moments
                        .remove(&format!("{kind}/{name}"))
                        .ok_or_else(|| Error::Format(format!("missing {kind} for {name}")))
                };
                let mut m = Vec::with_capacity(o.names.len());
                let mut v = Vec::with_capacity(o.names.len());
                for name in &o.names {
                    m.push(take("adam.m", name, &mut moments)?);
                    v.push(take("adam.v", name, &mut moments)?);
                }
                Some(AdamW { config: o.config, step: o.step, names: o.names, m, v })
            }
        };
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            completed: header.completed,
            progress: header.progress,
            checksums: header.checksums,
            losses: header.losses,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
