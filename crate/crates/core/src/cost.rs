//! Parameter and FLOP accounting.
//!
//! [`model_cost`] is the closed form; [`measured_cost`] enumerates real tensor
//! sizes and counts matrix-product MACs during one forward pass. FLOPs only
//! cover matrix products: softmax, norms, GELU and elementwise scoring are
//! excluded on both sides.
//!
//! Kept widths are realized as `h·keep_count(d/h, ρ)` and `keep_count(d_m, ρ)`,
//! so the closed form describes exactly the model surgery produces. Whenever
//! `ρ·d/h` and `ρ·d_m` are integers this is the textbook `ρd` and `ρd_m`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig};
use crate::pruner::{keep_count, validate_rho};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConvention {
    /// FLOPs per multiply-accumulate, 1 or 2.
    pub mac_factor: u64,
    /// Count a bias vector on every linear layer (runtime layers have none).
    pub include_bias: bool,
    /// Count a relative position bias table per block, whatever the runtime flag.
    pub include_rpb: bool,
    /// Count every layer norm and the classifier.
    pub include_norms_and_head: bool,
}

impl Default for CostConvention {
    /// The convention calibrated against the published Swin-T row.
    fn default() -> Self {
        CostConvention {
            mac_factor: 1,
            include_bias: true,
            include_rpb: true,
            include_norms_and_head: true,
        }
    }
}

impl CostConvention {
    /// Convention matching what a runtime model of `config` actually holds.
    pub fn runtime(config: &BackboneConfig) -> Self {
        CostConvention {
            mac_factor: 1,
            include_bias: false,
            include_rpb: config.relative_position_bias,
            include_norms_and_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.mac_factor, 1 | 2) {
            return Err(Error::Config(format!(
                "mac_factor must be 1 or 2, got {}",
                self.mac_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::ops::Sub for Cost {
    type Output = Cost;
    fn sub(self, o: Cost) -> Cost {
        Cost {
            params: self.params - o.params,
            flops: self.flops - o.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn attn_width(d: usize, h: usize, rho: f64) -> Result<u64> {
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Config(format!("dim {d} is not divisible by {h} heads")));
    }
    Ok((h * keep_count(d / h, rho)?) as u64)
}

/// Global attention over `n` tokens. Bias terms are itemized separately by
/// [`model_cost`], so they never appear here.
pub fn msa_cost(n: usize, d: usize, h: usize, rho: f64, conv: &CostConvention) -> Result<Cost> {
    wmsa_cost_area(n, d, h, n, rho, conv)
}

/// Windowed attention with `M×M` windows over `n` tokens.
pub fn wmsa_cost(n: usize, d: usize, h: usize, window: usize, rho: f64, conv: &CostConvention) -> Result<Cost> {
    wmsa_cost_area(n, d, h, window * window, rho, conv)
}

fn wmsa_cost_area(n: usize, d: usize, h: usize, area: usize, rho: f64, conv: &CostConvention) -> Result<Cost> {
    conv.validate()?;
    let w = attn_width(d, h, rho)?;
    let (n, d, area) = (n as u64, d as u64, area as u64);
    Ok(Cost {
        params: 4 * w * d,
        flops: conv.mac_factor * (4 * n * w * d + 2 * n * area * w),
    })
}

pub fn mlp_cost(n: usize, d: usize, d_m: usize, rho: f64, conv: &CostConvention) -> Result<Cost> {
    conv.validate()?;
    let k = keep_count(d_m, rho)? as u64;
    let (n, d) = (n as u64, d as u64);
    Ok(Cost {
        params: 2 * d * k,
        flops: conv.mac_factor * 2 * n * d * k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    /// A site id (`s0.b1.attn`) for prunable entries, a component label otherwise.
    pub label: String,
    pub prunable: bool,
    pub params: u64,
    pub flops: u64,
}

impl CostEntry {
    pub fn cost(&self) -> Cost {
        Cost {
            params: self.params,
            flops: self.flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: BackboneConfig,
    /// `None` for measured reports.
    pub rho: Option<f64>,
    pub convention: CostConvention,
    pub entries: Vec<CostEntry>,
    pub total: Cost,
    pub prunable: Cost,
    pub overhead: Cost,
    /// Total without the classifier.
    pub backbone: Cost,
}

fn is_head(label: &str) -> bool {
    label == "head" || label.starts_with("head.")
}

impl CostReport {
    fn from_entries(
        config: &BackboneConfig,
        rho: Option<f64>,
        convention: CostConvention,
        entries: Vec<CostEntry>,
    ) -> Self {
        let total: Cost = entries.iter().map(CostEntry::cost).sum();
        let prunable: Cost = entries.iter().filter(|e| e.prunable).map(CostEntry::cost).sum();
        let head: Cost = entries.iter().filter(|e| is_head(&e.label)).map(CostEntry::cost).sum();
        CostReport {
            config: config.clone(),
            rho,
            convention,
            total,
            prunable,
            overhead: total - prunable,
            backbone: total - head,
            entries,
        }
    }

    pub fn entry(&self, label: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Aligned text table, one row per entry plus totals.
    pub fn render_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.label.len()).max().unwrap_or(5).max(9);
        let mut out = String::new();
        let rho = self.rho.map_or("measured".to_string(), |r| format!("{r}"));
        let _ = writeln!(out, "rho = {rho}, mac_factor = {}", self.convention.mac_factor);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "entry", "params", "flops");
        for e in &self.entries {
            let mark = if e.prunable { "" } else { " *" };
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}{mark}", e.label, e.params, e.flops);
        }
        for (name, c) in [
            ("prunable", self.prunable),
            ("overhead", self.overhead),
            ("backbone", self.backbone),
            ("total", self.total),
        ] {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", name, c.params, c.flops);
        }
        let _ = writeln!(
            out,
            "total: {:.3} M params, {:.3} G flops  (* = not pruned)",
            self.total.params as f64 / 1e6,
            self.total.flops as f64 / 1e9
        );
        out
    }

    /// One JSON object per entry: `{"site_id", "params", "flops", "prunable"}`.
    pub fn site_records(&self) -> Vec<serde_json::Value> {
        self.entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "site_id": e.label,
                    "params": e.params,
                    "flops": e.flops,
                    "prunable": e.prunable,
                })
            })
            .collect()
    }
}

/// Closed-form cost of `config` pruned uniformly with keep ratio `rho`.
pub fn model_cost(config: &BackboneConfig, rho: f64, conv: &CostConvention) -> Result<CostReport> {
    config.validate()?;
    conv.validate()?;
    validate_rho(rho)?;
    let c = config;
    let mac = conv.mac_factor;
    let mut entries = Vec::new();
    let mut push = |label: String, prunable: bool, params: u64, flops: u64| {
        entries.push(CostEntry {
            label,
            prunable,
            params,
            flops,
        })
    };
    let norm = |d: usize| if conv.include_norms_and_head { 2 * d as u64 } else { 0 };

    let d0 = c.dim as u64;
    let patch_in = (c.in_channels * c.patch_size * c.patch_size) as u64;
    let n0 = c.stage_tokens(0) as u64;
    push("patch_embed".into(), false, patch_in * d0, mac * n0 * patch_in * d0);
    if conv.include_bias {
        push("patch_embed.bias".into(), false, d0, 0);
    }
    if conv.include_norms_and_head {
        push("patch_embed.norm".into(), false, norm(c.dim), 0);
    }
    for s in 0..c.num_stages() {
        let (d, h, n, m) = (c.stage_dim(s), c.heads[s], c.stage_tokens(s), c.stage_window(s));
        let d_m = c.mlp_hidden(s);
        for b in 0..c.depths[s] {
            let attn = wmsa_cost(n, d, h, m, rho, conv)?;
            let mlp = mlp_cost(n, d, d_m, rho, conv)?;
            push(format!("s{s}.b{b}.attn"), true, attn.params, attn.flops);
            push(format!("s{s}.b{b}.mlp"), true, mlp.params, mlp.flops);
            if conv.include_norms_and_head {
                push(format!("s{s}.b{b}.norms"), false, 2 * norm(d), 0);
            }
            if conv.include_bias {
                // q, k, v, proj, fc1, fc2 at their unpruned widths
                push(format!("s{s}.b{b}.bias"), false, (5 * d + d_m) as u64, 0);
            }
            if conv.include_rpb {
                let side = (2 * m - 1) as u64;
                push(format!("s{s}.b{b}.rpb"), false, side * side * h as u64, 0);
            }
        }
        if s + 1 < c.num_stages() {
            let (d, n) = (d as u64, n as u64);
            push(format!("s{s}.merge"), false, 8 * d * d, mac * (n / 4) * 8 * d * d);
            if conv.include_norms_and_head {
                push(format!("s{s}.merge.norm"), false, 8 * d, 0);
            }
        }
    }
    if conv.include_norms_and_head {
        let f = c.final_dim() as u64;
        let k = c.num_classes as u64;
        push("norm".into(), false, norm(c.final_dim()), 0);
        push("head".into(), false, f * k, mac * f * k);
        if conv.include_bias {
            push("head.bias".into(), false, k, 0);
        }
    }
    Ok(CostReport::from_entries(config, Some(rho), *conv, entries))
}

/// Entry label of a named backbone tensor, matching [`model_cost`] labels.
fn entry_label(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["patch_embed", "weight"] => "patch_embed".into(),
        ["patch_embed", "norm", _] => "patch_embed.norm".into(),
        ["stages", s, "blocks", b, "attn", "rel_pos_bias"] => format!("s{s}.b{b}.rpb"),
        ["stages", s, "blocks", b, "attn", _] => format!("s{s}.b{b}.attn"),
        ["stages", s, "blocks", b, "mlp", _] => format!("s{s}.b{b}.mlp"),
        ["stages", s, "blocks", b, _, _] => format!("s{s}.b{b}.norms"),
        ["stages", s, "merge", "reduction"] => format!("s{s}.merge"),
        ["stages", s, "merge", "norm", _] => format!("s{s}.merge.norm"),
        ["norm", _] => "norm".into(),
        ["head", _] => "head".into(),
        _ => name.to_string(),
    }
}

fn is_prunable_label(label: &str) -> bool {
    label.ends_with(".attn") || label.ends_with(".mlp")
}

/// Counts what `model` actually holds and executes: tensor sizes for
/// parameters, instrumented matrix products of one single-image forward pass
/// for FLOPs (`mac_factor` 1). Entries appear in [`model_cost`] order.
pub fn measured_cost<T: Element>(model: &Backbone<T>) -> Result<CostReport> {
    let c = &model.config;
    let mut entries: Vec<CostEntry> = Vec::new();
    let slot = |label: String, entries: &mut Vec<CostEntry>| -> usize {
        if let Some(i) = entries.iter().position(|e| e.label == label) {
            return i;
        }
        entries.push(CostEntry {
            prunable: is_prunable_label(&label),
            label,
            params: 0,
            flops: 0,
        });
        entries.len() - 1
    };
    for (name, t) in model.named_tensors() {
        let i = slot(entry_label(&name), &mut entries);
        entries[i].params += t.numel() as u64;
    }
    let tape = Tape::<T>::new();
    let image = Tensor::zeros(&[1, c.in_channels, c.image_size, c.image_size])?;
    let out = model.forward(&tape, &image, None)?;
    drop(out);
    for (label, macs) in tape.mac_counts() {
        let i = slot(label, &mut entries);
        entries[i].flops += macs;
    }
    // model_cost lists per-block entries as attn, mlp, norms, rpb; follow it.
    let reference = model_cost(c, 1.0, &CostConvention::runtime(c))?;
    let rank = |l: &str| {
        reference
            .entries
            .iter()
            .position(|e| e.label == l)
            .unwrap_or(usize::MAX)
    };
    entries.sort_by_key(|e| rank(&e.label));
    Ok(CostReport::from_entries(c, None, CostConvention::runtime(c), entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mac_factor: u64,
    pub flops: u64,
    /// `(flops − target) / target`.
    pub rel_error: f64,
    pub within_tolerance: bool,
}

/// Picks the `mac_factor` whose unpruned FLOPs land closest to `target`.
pub fn calibrate_mac_factor(
    config: &BackboneConfig,
    base: &CostConvention,
    target_flops: f64,
    tolerance: f64,
) -> Result<Calibration> {
    if target_flops.is_nan() || target_flops <= 0.0 {
        return Err(Error::Config(format!(
            "calibration target must be positive, got {target_flops}"
        )));
    }
    let mut best: Option<Calibration> = None;
    for mac_factor in [1, 2] {
        let conv = CostConvention { mac_factor, ..*base };
        let flops = model_cost(config, 1.0, &conv)?.total.flops;
        let rel_error = (flops as f64 - target_flops) / target_flops;
        let cand = Calibration {
            mac_factor,
            flops,
            rel_error,
            within_tolerance: rel_error.abs() <= tolerance,
        };
        if best.is_none_or(|b| rel_error.abs() < b.rel_error.abs()) {
            best = Some(cand);
        }
    }
    Ok(best.expect("two candidates"))
}
