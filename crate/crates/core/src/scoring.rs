//! Architecture parameters: one score vector `α` per prunable site, and the
//! L1-regularized search objective `CE + γ·Σ|α|`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::tensor::{Element, Tensor};

/// Default sparsity scale `γ`.
pub const DEFAULT_GAMMA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Attn,
    Mlp,
}

/// A prunable site: the attention embeddings or the MLP hidden layer of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub stage: usize,
    pub block: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(stage: usize, block: usize, kind: SiteKind) -> Self {
        SiteId { stage, block, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SiteKind::Attn => "attn",
            SiteKind::Mlp => "mlp",
        };
        write!(f, "s{}.b{}.{}", self.stage, self.block, kind)
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed site id '{s}'"));
        let mut parts = s.split('.');
        let stage = parts.next().and_then(|p| p.strip_prefix('s')).ok_or_else(bad)?;
        let block = parts.next().and_then(|p| p.strip_prefix('b')).ok_or_else(bad)?;
        let kind = match parts.next() {
            Some("attn") => SiteKind::Attn,
            Some("mlp") => SiteKind::Mlp,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(SiteId {
            stage: stage.parse().map_err(|_| bad())?,
            block: block.parse().map_err(|_| bad())?,
            kind,
        })
    }
}

impl Serialize for SiteId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every prunable site of an unpruned model with its score length:
/// `d_s/h_s` for attention, `d_m` for the MLP.
pub fn sites(config: &BackboneConfig) -> Vec<(SiteId, usize)> {
    let mut out = Vec::new();
    for s in 0..config.num_stages() {
        for b in 0..config.depths[s] {
            out.push((SiteId::new(s, b, SiteKind::Attn), config.head_dim(s)));
            out.push((SiteId::new(s, b, SiteKind::Mlp), config.mlp_hidden(s)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector<T: Element = f32> {
    pub site: SiteId,
    /// Diagonal of the scoring matrix.
    pub alpha: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable<T: Element = f32> {
    entries: Vec<ScoreVector<T>>,
}

pub(crate) fn score_name(site: &SiteId) -> String {
    format!("score.{site}")
}

impl<T: Element> ScoreTable<T> {
    pub fn new(entries: Vec<ScoreVector<T>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.site) {
                return Err(Error::Config(format!("duplicate score site {}", e.site)));
            }
        }
        Ok(ScoreTable { entries })
    }

    /// All-ones scores sized to the backbone's current widths.
    pub fn ones_for(backbone: &Backbone<T>) -> Result<Self> {
        let mut entries = Vec::new();
        for (s, stage) in backbone.stages.iter().enumerate() {
            for (b, blk) in stage.blocks.iter().enumerate() {
                entries.push(ScoreVector {
                    site: SiteId::new(s, b, SiteKind::Attn),
                    alpha: Tensor::ones(&[blk.attn.head_dim()])?.with_grad(),
                });
                entries.push(ScoreVector {
                    site: SiteId::new(s, b, SiteKind::Mlp),
                    alpha: Tensor::ones(&[blk.mlp.hidden_dim()])?.with_grad(),
                });
            }
        }
        Self::new(entries)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScoreVector<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ScoreVector<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, site: &SiteId) -> Option<&ScoreVector<T>> {
        self.entries.iter().find(|e| e.site == *site)
    }

    pub fn get_mut(&mut self, site: &SiteId) -> Option<&mut ScoreVector<T>> {
        self.entries.iter_mut().find(|e| e.site == *site)
    }

    /// `Σ_sites Σ_i |α_i|`.
    pub fn l1(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.alpha.data().iter())
            .map(|v| v.to_f64().abs())
            .sum()
    }

    /// Number of scores with `|α| < threshold`, over all sites.
    pub fn count_below(&self, threshold: f64) -> usize {
        self.entries
            .iter()
            .flat_map(|e| e.alpha.data().iter())
            .filter(|v| v.to_f64().abs() < threshold)
            .count()
    }

    pub fn cast<U: Element>(&self) -> ScoreTable<U> {
        ScoreTable {
            entries: self
                .entries
                .iter()
                .map(|e| ScoreVector {
                    site: e.site,
                    alpha: e.alpha.cast(),
                })
                .collect(),
        }
    }

    /// Records every score vector as a named leaf (`score.<site>`).
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ScoreVars<'t, T> {
        ScoreVars {
            map: self
                .entries
                .iter()
                .map(|e| (e.site, tape.param(score_name(&e.site), &e.alpha)))
                .collect(),
        }
    }
}

/// Score vectors recorded on a tape.
pub struct ScoreVars<'t, T: Element = f32> {
    map: BTreeMap<SiteId, Var<'t, T>>,
}

impl<'t, T: Element> ScoreVars<'t, T> {
    /// Wraps score variables recorded elsewhere, e.g. leaves of a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (SiteId, Var<'t, T>)>) -> Self {
        ScoreVars {
            map: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, site: &SiteId) -> Result<&Var<'t, T>> {
        self.map
            .get(site)
            .ok_or_else(|| Error::Config(format!("no score vector for site {site}")))
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.map.values().copied().collect()
    }
}

/// A backbone with scores attached at every prunable site.
///
/// Attaching consumes the score-free [`Backbone`], so a model can only be
/// scored once.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredModel<T: Element = f32> {
    pub backbone: Backbone<T>,
    pub scores: ScoreTable<T>,
}

/// Attaches all-ones scores: the search starts at the unscored network.
pub fn attach_scores<T: Element>(backbone: Backbone<T>) -> Result<ScoredModel<T>> {
    let scores = ScoreTable::ones_for(&backbone)?;
    Ok(ScoredModel { backbone, scores })
}

impl<T: Element> ScoredModel<T> {
    pub fn new(backbone: Backbone<T>, scores: ScoreTable<T>) -> Result<Self> {
        for (s, stage) in backbone.stages.iter().enumerate() {
            for (b, blk) in stage.blocks.iter().enumerate() {
                for (kind, len) in [
                    (SiteKind::Attn, blk.attn.head_dim()),
                    (SiteKind::Mlp, blk.mlp.hidden_dim()),
                ] {
                    let site = SiteId::new(s, b, kind);
                    let e = scores
                        .get(&site)
                        .ok_or_else(|| Error::Config(format!("no score vector for site {site}")))?;
                    if e.alpha.shape() != [len] {
                        return Err(Error::Config(format!(
                            "site {site}: score length {:?} does not match width {len}",
                            e.alpha.shape()
                        )));
                    }
                }
            }
        }
        let expected: usize = backbone.stages.iter().map(|s| 2 * s.blocks.len()).sum();
        if scores.len() != expected {
            return Err(Error::Config(format!(
                "score table has {} sites, model has {expected}",
                scores.len()
            )));
        }
        Ok(ScoredModel { backbone, scores })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, images: &Tensor<T>) -> Result<BackboneOutput<'t, T>> {
        self.backbone.forward(tape, images, Some(&self.scores))
    }

    pub fn cast<U: Element>(&self) -> ScoredModel<U> {
        ScoredModel {
            backbone: self.backbone.cast(),
            scores: self.scores.cast(),
        }
    }
}

/// `CE(logits, targets) + γ·Σ_sites ‖α‖₁`.
pub fn total_loss<'t, T: Element>(
    logits: &Var<'t, T>,
    targets: &[usize],
    scores: &[Var<'t, T>],
    gamma: f64,
) -> Result<Var<'t, T>> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut loss = logits.cross_entropy(targets)?;
    if gamma > 0.0 {
        for a in scores {
            loss = loss.add(&a.l1_norm().scale(gamma))?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: SiteId,
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Scores with `|α| < threshold`.
    pub below: usize,
    pub threshold: f64,
}

/// Order statistics of `|α|` per site.
pub fn score_summary<T: Element>(scores: &ScoreTable<T>, threshold: f64) -> Vec<SiteSummary> {
    scores
        .iter()
        .map(|e| {
            let mut mags: Vec<f64> = e.alpha.data().iter().map(|v| v.to_f64().abs()).collect();
            mags.sort_by(f64::total_cmp);
            let n = mags.len();
            let median = if n % 2 == 1 {
                mags[n / 2]
            } else {
                0.5 * (mags[n / 2 - 1] + mags[n / 2])
            };
            SiteSummary {
                site: e.site,
                count: n,
                min: mags[0],
                median,
                max: mags[n - 1],
                below: mags.iter().filter(|&&m| m < threshold).count(),
                threshold,
            }
        })
        .collect()
}
