//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DIMPRUNE`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f32` values at the
//! byte offsets listed in the header (relative to the payload start). Scores
//! and optimizer moments are ordinary payload tensors, so every float
//! round-trips bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::scoring::{ScoreTable, ScoreVector, ScoredModel, SiteId};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIMPRUNE";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and loop position, enough to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub seed: u64,
    pub optimizer: AdamW,
}

/// A model that still carries score vectors (search output).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCheckpoint {
    pub stage: String,
    pub model: ScoredModel<f32>,
    pub train: Option<TrainState>,
    pub data: Option<DataSpec>,
}

/// A score-free model (initial, pruned or fine-tuned).
#[derive(Clone, Debug, PartialEq)]
pub struct PlainCheckpoint {
    pub stage: String,
    pub model: Backbone<f32>,
    /// Keep ratio the model was pruned with, if any.
    pub rho: Option<f64>,
    pub train: Option<TrainState>,
    pub data: Option<DataSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Scored(ScoredCheckpoint),
    Plain(PlainCheckpoint),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    epochs_done: usize,
    seed: u64,
    optimizer: AdamWConfig,
    step: u64,
    /// Parameters with stored moments (`adam.m.<name>`, `adam.v.<name>`).
    moments: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    stage: String,
    config: BackboneConfig,
    rho: Option<f64>,
    /// Sites with a score tensor `score.<site>`; absent for score-free models.
    scores: Option<Vec<SiteId>>,
    train: Option<TrainHeader>,
    data: Option<DataSpec>,
    tensors: Vec<TensorEntry>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, shape: &[usize], data: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.payload.len() as u64,
        });
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn config(&self) -> &BackboneConfig {
        match self {
            Checkpoint::Scored(c) => &c.model.backbone.config,
            Checkpoint::Plain(c) => &c.model.config,
        }
    }

    pub fn stage(&self) -> &str {
        match self {
            Checkpoint::Scored(c) => &c.stage,
            Checkpoint::Plain(c) => &c.stage,
        }
    }

    pub fn backbone(&self) -> &Backbone<f32> {
        match self {
            Checkpoint::Scored(c) => &c.model.backbone,
            Checkpoint::Plain(c) => &c.model,
        }
    }

    pub fn data(&self) -> Option<&DataSpec> {
        match self {
            Checkpoint::Scored(c) => c.data.as_ref(),
            Checkpoint::Plain(c) => c.data.as_ref(),
        }
    }

    pub fn into_scored(self) -> Result<ScoredCheckpoint> {
        match self {
            Checkpoint::Scored(c) => Ok(c),
            Checkpoint::Plain(c) => Err(Error::Usage(format!(
                "checkpoint from stage '{}' has no score vectors; run search first",
                c.stage
            ))),
        }
    }

    pub fn into_plain(self) -> Result<PlainCheckpoint> {
        match self {
            Checkpoint::Plain(c) => Ok(c),
            Checkpoint::Scored(c) => Err(Error::Usage(format!(
                "checkpoint from stage '{}' still carries score vectors; prune it first",
                c.stage
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            entries: Vec::new(),
            payload: Vec::new(),
        };
        for (name, t) in self.backbone().named_tensors() {
            w.push(name, t.shape(), t.data());
        }
        let (stage, rho, train, data, scores) = match self {
            Checkpoint::Scored(c) => {
                let mut sites = Vec::with_capacity(c.model.scores.len());
                for s in c.model.scores.iter() {
                    w.push(format!("score.{}", s.site), s.alpha.shape(), s.alpha.data());
                    sites.push(s.site);
                }
                (&c.stage, None, &c.train, &c.data, Some(sites))
            }
            Checkpoint::Plain(c) => (&c.stage, c.rho, &c.train, &c.data, None),
        };
        let train = train.as_ref().map(|t| {
            let mut names = Vec::with_capacity(t.optimizer.moments.len());
            for (name, m) in &t.optimizer.moments {
                w.push(format!("adam.m.{name}"), &[m.m.len()], &m.m);
                w.push(format!("adam.v.{name}"), &[m.v.len()], &m.v);
                names.push(name.clone());
            }
            TrainHeader {
                epochs_done: t.epochs_done,
                seed: t.seed,
                optimizer: t.optimizer.config,
                step: t.optimizer.step,
                moments: names,
            }
        });
        let header = Header {
            version: FORMAT_VERSION,
            stage: stage.clone(),
            config: self.config().clone(),
            rho,
            scores,
            train,
            data: data.clone(),
            tensors: w.entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("encoding header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size {}", bytes.len())));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let payload = &body[hlen..];
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(format!("tensor '{}' runs past the payload", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?).is_some() {
                return Err(bad(format!("duplicate tensor '{}'", e.name)));
            }
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor '{name}'")))
        };

        let train = match &header.train {
            Some(t) => {
                let mut moments = BTreeMap::new();
                for name in &t.moments {
                    let m = take(&format!("adam.m.{name}"))?.into_data();
                    let v = take(&format!("adam.v.{name}"))?.into_data();
                    moments.insert(name.clone(), Moments { m, v });
                }
                Some(TrainState {
                    epochs_done: t.epochs_done,
                    seed: t.seed,
                    optimizer: AdamW {
                        config: t.optimizer,
                        step: t.step,
                        moments,
                    },
                })
            }
            None => None,
        };
        let scores = match &header.scores {
            Some(sites) => {
                let mut entries = Vec::with_capacity(sites.len());
                for site in sites {
                    let alpha = take(&format!("score.{site}"))?.with_grad();
                    entries.push(ScoreVector { site: *site, alpha });
                }
                Some(ScoreTable::new(entries)?)
            }
            None => None,
        };
        let backbone = Backbone::from_named(&header.config, tensors)?;
        Ok(match scores {
            Some(scores) => Checkpoint::Scored(ScoredCheckpoint {
                stage: header.stage,
                model: ScoredModel::new(backbone, scores)?,
                train,
                data: header.data,
            }),
            None => Checkpoint::Plain(PlainCheckpoint {
                stage: header.stage,
                model: backbone,
                rho: header.rho,
                train,
                data: header.data,
            }),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
