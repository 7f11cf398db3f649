//! Rank-and-prune surgery.
//!
//! At every site the `keep_count(k, ρ)` dimensions with the largest `|α|`
//! survive. Surviving scores are folded into the weight columns, so the
//! pruned, score-free model computes exactly what the scored model computes
//! with the dropped scores set to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttentionParams;
use crate::nn::backbone::Backbone;
use crate::nn::mlp::MlpParams;
use crate::scoring::{ScoreTable, ScoreVector, ScoredModel, SiteId, SiteKind};
use crate::tensor::{Element, Tensor};

pub fn validate_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keep ratio must lie in (0, 1], got {rho}")))
    }
}

/// `max(1, round_half_up(ρ·k))`.
pub fn keep_count(k: usize, rho: f64) -> Result<usize> {
    validate_rho(rho)?;
    // The epsilon keeps products like 0.7·5 = 3.4999… on the intended side.
    let kept = (rho * k as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(kept.clamp(1, k.max(1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepSet {
    pub site: SiteId,
    /// Surviving dimension indices, ascending.
    pub indices: Vec<usize>,
    /// Site width before pruning.
    pub original: usize,
    pub rho: f64,
}

impl KeepSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps the indices of the `keep_count` largest `|α|`; ties go to the lower index.
pub fn select_keep<T: Element>(scores: &ScoreVector<T>, rho: f64) -> Result<KeepSet> {
    let alpha = scores.alpha.data();
    let k = alpha.len();
    let count = keep_count(k, rho)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (alpha[a].to_f64().abs(), alpha[b].to_f64().abs());
        mb.total_cmp(&ma).then(a.cmp(&b))
    });
    let mut indices = order[..count].to_vec();
    indices.sort_unstable();
    Ok(KeepSet {
        site: scores.site,
        indices,
        original: k,
        rho,
    })
}

fn check_keep(keep: &KeepSet, width: usize, alpha: usize) -> Result<()> {
    if keep.original != width || alpha != width {
        return Err(Error::Internal(format!(
            "site {}: keep set over {} dims, weights have {width}, scores {alpha}",
            keep.site, keep.original
        )));
    }
    if let Some(&bad) = keep.indices.iter().find(|&&i| i >= width) {
        return Err(Error::Internal(format!(
            "site {}: keep index {bad} out of range {width}",
            keep.site
        )));
    }
    Ok(())
}

/// Keeps columns `cols` of `w`, multiplying each by `scale[col]` when given.
fn take_columns<T: Element>(w: &Tensor<T>, cols: &[usize], scale: Option<&[T]>) -> Result<Tensor<T>> {
    let (rows, _) = w.dims2()?;
    let mut data = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        for (i, &c) in cols.iter().enumerate() {
            let v = w.at2(r, c);
            data.push(match scale {
                Some(s) => T::from_f64(v.to_f64() * s[i].to_f64()),
                None => v,
            });
        }
    }
    Ok(Tensor::new(&[rows, cols.len()], data)?.with_grad())
}

fn take_rows<T: Element>(w: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let (_, cols) = w.dims2()?;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&w.data()[r * cols..(r + 1) * cols]);
    }
    Ok(Tensor::new(&[rows.len(), cols], data)?.with_grad())
}

/// Per-head column surgery on `W_Q/W_K/W_V` (scores folded in) and the
/// matching row surgery on `W_O`. The softmax scale is left untouched.
pub fn prune_attention<T: Element>(
    p: &AttentionParams<T>,
    keep: &KeepSet,
    alpha: &Tensor<T>,
) -> Result<AttentionParams<T>> {
    let dh = p.head_dim();
    check_keep(keep, dh, alpha.numel())?;
    let cols: Vec<usize> = (0..p.heads)
        .flat_map(|j| keep.indices.iter().map(move |&i| j * dh + i))
        .collect();
    let kept_alpha: Vec<T> = (0..p.heads)
        .flat_map(|_| keep.indices.iter().map(|&i| alpha.data()[i]))
        .collect();
    let out = AttentionParams {
        w_q: take_columns(&p.w_q, &cols, Some(&kept_alpha))?,
        w_k: take_columns(&p.w_k, &cols, Some(&kept_alpha))?,
        w_v: take_columns(&p.w_v, &cols, Some(&kept_alpha))?,
        w_o: take_rows(&p.w_o, &cols)?,
        heads: p.heads,
        scale_dim: p.scale_dim,
        rel_pos_bias: p.rel_pos_bias.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Column surgery on `W₁` (scores folded in), row surgery on `W₂`.
pub fn prune_mlp<T: Element>(p: &MlpParams<T>, keep: &KeepSet, alpha: &Tensor<T>) -> Result<MlpParams<T>> {
    check_keep(keep, p.hidden_dim(), alpha.numel())?;
    let kept_alpha: Vec<T> = keep.indices.iter().map(|&i| alpha.data()[i]).collect();
    MlpParams::new(
        take_columns(&p.w1, &keep.indices, Some(&kept_alpha))?,
        take_rows(&p.w2, &keep.indices)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePrune {
    pub keep: KeepSet,
    /// Smallest surviving `|α|`.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub rho: f64,
    pub sites: Vec<SitePrune>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Applies [`select_keep`] and surgery at every site with a uniform `ρ`.
pub fn prune_model<T: Element>(model: &ScoredModel<T>, rho: f64) -> Result<(Backbone<T>, PruneReport)> {
    validate_rho(rho)?;
    let mut pruned = model.backbone.clone();
    let mut sites = Vec::with_capacity(model.scores.len());
    for (s, stage) in pruned.stages.iter_mut().enumerate() {
        for (b, blk) in stage.blocks.iter_mut().enumerate() {
            for kind in [SiteKind::Attn, SiteKind::Mlp] {
                let site = SiteId::new(s, b, kind);
                let scores = model
                    .scores
                    .get(&site)
                    .ok_or_else(|| Error::Config(format!("no score vector for site {site}")))?;
                let keep = select_keep(scores, rho)?;
                match kind {
                    SiteKind::Attn => blk.attn = prune_attention(&blk.attn, &keep, &scores.alpha)?,
                    SiteKind::Mlp => blk.mlp = prune_mlp(&blk.mlp, &keep, &scores.alpha)?,
                }
                let threshold = keep
                    .indices
                    .iter()
                    .map(|&i| scores.alpha.data()[i].to_f64().abs())
                    .fold(f64::INFINITY, f64::min);
                sites.push(SitePrune { keep, threshold });
            }
        }
    }
    let report = PruneReport {
        rho,
        sites,
        params_before: model.backbone.parameter_count(),
        params_after: pruned.parameter_count(),
    };
    Ok((pruned, report))
}

/// Copy of `scores` with every dimension outside the `ρ` keep set zeroed.
pub fn mask_dropped<T: Element>(scores: &ScoreTable<T>, rho: f64) -> Result<ScoreTable<T>> {
    let mut out = scores.clone();
    for e in out.iter_mut() {
        let keep = select_keep(e, rho)?;
        let data = e.alpha.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            if keep.indices.binary_search(&i).is_err() {
                *v = T::from_f64(0.0);
            }
        }
    }
    Ok(out)
}
