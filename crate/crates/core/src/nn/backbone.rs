//! Hierarchical windowed-attention backbone with a linear classifier.
//!
//! Stage `s` runs at dimension `d·2ˢ` on a grid halved by every patch merge.
//! Blocks alternate unshifted and half-window-shifted partitions; the shift is
//! dropped when the whole stage fits in one window.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::attention::AttentionParams;
use crate::nn::block::{block_forward_scoped, BlockParams, BlockVars};
use crate::nn::embed::{patch_embed, patch_merge};
use crate::nn::mlp::MlpParams;
use crate::nn::norm::{NormParams, NormVars};
use crate::nn::window::WindowSpec;
use crate::scoring::{ScoreTable, ScoreVars, SiteId, SiteKind};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    /// Base embedding dimension `d` of the first stage.
    pub dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window side `M`.
    pub window: usize,
    /// `d_m / d`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub relative_position_bias: bool,
}

impl BackboneConfig {
    /// Swin-T geometry at 224² input.
    pub fn swin_tiny(num_classes: usize) -> Self {
        BackboneConfig {
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            num_classes,
            relative_position_bias: false,
        }
    }

    /// Minutes-scale CPU configuration.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 32,
            in_channels: 3,
            patch_size: 4,
            dim: 16,
            depths: vec![1, 1],
            heads: vec![2, 4],
            window: 4,
            mlp_ratio: 2,
            num_classes: 4,
            relative_position_bias: false,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.dim << stage
    }

    /// Patch-grid side at `stage`.
    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    pub fn stage_tokens(&self, stage: usize) -> usize {
        self.stage_grid(stage) * self.stage_grid(stage)
    }

    /// Effective window side: `M`, clamped to the grid.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window.min(self.stage_grid(stage))
    }

    pub fn head_dim(&self, stage: usize) -> usize {
        self.stage_dim(stage) / self.heads[stage]
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        self.stage_dim(stage) * self.mlp_ratio
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn window_spec(&self, stage: usize, block: usize) -> Result<WindowSpec> {
        let grid = self.stage_grid(stage);
        let m = self.stage_window(stage);
        let shift = if block % 2 == 1 && grid > self.window { m / 2 } else { 0 };
        WindowSpec::new(m, shift, grid, grid)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.in_channels == 0 || self.patch_size == 0 {
            return bad("image_size, in_channels and patch_size must be positive".into());
        }
        if self.dim == 0 || self.window == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("dim, window, mlp_ratio and num_classes must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid0 = self.image_size / self.patch_size;
        let merges = self.num_stages() - 1;
        if !grid0.is_multiple_of(1 << merges) {
            return bad(format!("patch grid {grid0} cannot be halved {merges} times"));
        }
        for s in 0..self.num_stages() {
            let h = self.heads[s];
            if h == 0 || !self.stage_dim(s).is_multiple_of(h) {
                return bad(format!(
                    "stage {s} dim {} is not divisible by {h} heads",
                    self.stage_dim(s)
                ));
            }
            if !self.stage_grid(s).is_multiple_of(self.stage_window(s)) {
                return bad(format!(
                    "stage {s} grid {} is not divisible by window {}",
                    self.stage_grid(s),
                    self.stage_window(s)
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeParams<T: Element = f32> {
    /// Norm over the concatenated `4d` features.
    pub norm: NormParams<T>,
    /// `[4d × 2d]`
    pub reduction: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T: Element = f32> {
    pub blocks: Vec<BlockParams<T>>,
    pub merge: Option<MergeParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Element = f32> {
    pub config: BackboneConfig,
    /// `[(C·P²) × d]`
    pub patch_embed: Tensor<T>,
    pub patch_norm: NormParams<T>,
    pub stages: Vec<Stage<T>>,
    pub norm: NormParams<T>,
    /// `[final_dim × num_classes]`
    pub head: Tensor<T>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a) as f32).collect();
    Ok(Tensor::new(&[rows, cols], data)?.with_grad())
}

pub(crate) fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

impl Backbone<f32> {
    /// Seeded initialization: Xavier-uniform weights, identity norms,
    /// zero relative position bias.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let patch_in = c.in_channels * c.patch_size * c.patch_size;
        let patch_embed = xavier(&mut rng, patch_in, c.dim)?;
        let mut stages = Vec::with_capacity(c.num_stages());
        for s in 0..c.num_stages() {
            let d = c.stage_dim(s);
            let h = c.heads[s];
            let mut blocks = Vec::with_capacity(c.depths[s]);
            for _ in 0..c.depths[s] {
                let mut attn = AttentionParams::new(
                    xavier(&mut rng, d, d)?,
                    xavier(&mut rng, d, d)?,
                    xavier(&mut rng, d, d)?,
                    xavier(&mut rng, d, d)?,
                    h,
                    c.head_dim(s),
                )?;
                if c.relative_position_bias {
                    let side = 2 * c.stage_window(s) - 1;
                    attn.rel_pos_bias = Some(Tensor::zeros(&[side * side, h])?.with_grad());
                }
                let mlp = MlpParams::new(
                    xavier(&mut rng, d, c.mlp_hidden(s))?,
                    xavier(&mut rng, c.mlp_hidden(s), d)?,
                )?;
                blocks.push(BlockParams {
                    norm1: NormParams::identity(d)?,
                    attn,
                    norm2: NormParams::identity(d)?,
                    mlp,
                });
            }
            let merge = if s + 1 < c.num_stages() {
                Some(MergeParams {
                    norm: NormParams::identity(4 * d)?,
                    reduction: xavier(&mut rng, 4 * d, 2 * d)?,
                })
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Backbone {
            config: config.clone(),
            patch_embed,
            patch_norm: NormParams::identity(c.dim)?,
            stages,
            norm: NormParams::identity(c.final_dim())?,
            head: xavier(&mut rng, c.final_dim(), c.num_classes)?,
        })
    }
}

/// Output of a backbone forward pass.
pub struct BackboneOutput<'t, T: Element = f32> {
    /// `[batch × num_classes]`
    pub logits: Var<'t, T>,
    /// Per-stage token features `[batch·n_s × d_s]`, before merging.
    pub features: Vec<Var<'t, T>>,
}

/// Backbone weights recorded on a tape.
pub struct BackboneVars<'t, T: Element = f32> {
    pub patch_embed: Var<'t, T>,
    pub patch_norm: NormVars<'t, T>,
    pub blocks: Vec<Vec<BlockVars<'t, T>>>,
    pub merges: Vec<Option<(NormVars<'t, T>, Var<'t, T>)>>,
    pub norm: NormVars<'t, T>,
    pub head: Var<'t, T>,
}

impl<T: Element> Backbone<T> {
    pub fn cast<U: Element>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            patch_norm: self.patch_norm.cast(),
            stages: self
                .stages
                .iter()
                .map(|st| Stage {
                    blocks: st.blocks.iter().map(BlockParams::cast).collect(),
                    merge: st.merge.as_ref().map(|m| MergeParams {
                        norm: m.norm.cast(),
                        reduction: m.reduction.cast(),
                    }),
                })
                .collect(),
            norm: self.norm.cast(),
            head: self.head.cast(),
        }
    }

    pub fn block(&self, stage: usize, block: usize) -> &BlockParams<T> {
        &self.stages[stage].blocks[block]
    }

    pub fn block_mut(&mut self, stage: usize, block: usize) -> &mut BlockParams<T> {
        &mut self.stages[stage].blocks[block]
    }

    /// Every parameter tensor with its stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("patch_embed.weight".into(), &self.patch_embed));
        out.push(("patch_embed.norm.gain".into(), &self.patch_norm.gain));
        out.push(("patch_embed.norm.bias".into(), &self.patch_norm.bias));
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.blocks.iter().enumerate() {
                let p = block_prefix(s, b);
                out.push((format!("{p}.norm1.gain"), &blk.norm1.gain));
                out.push((format!("{p}.norm1.bias"), &blk.norm1.bias));
                out.push((format!("{p}.attn.w_q"), &blk.attn.w_q));
                out.push((format!("{p}.attn.w_k"), &blk.attn.w_k));
                out.push((format!("{p}.attn.w_v"), &blk.attn.w_v));
                out.push((format!("{p}.attn.w_o"), &blk.attn.w_o));
                if let Some(t) = &blk.attn.rel_pos_bias {
                    out.push((format!("{p}.attn.rel_pos_bias"), t));
                }
                out.push((format!("{p}.norm2.gain"), &blk.norm2.gain));
                out.push((format!("{p}.norm2.bias"), &blk.norm2.bias));
                out.push((format!("{p}.mlp.w1"), &blk.mlp.w1));
                out.push((format!("{p}.mlp.w2"), &blk.mlp.w2));
            }
            if let Some(m) = &stage.merge {
                out.push((format!("stages.{s}.merge.norm.gain"), &m.norm.gain));
                out.push((format!("stages.{s}.merge.norm.bias"), &m.norm.bias));
                out.push((format!("stages.{s}.merge.reduction"), &m.reduction));
            }
        }
        out.push(("norm.gain".into(), &self.norm.gain));
        out.push(("norm.bias".into(), &self.norm.bias));
        out.push(("head.weight".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("patch_embed.weight".into(), &mut self.patch_embed));
        out.push(("patch_embed.norm.gain".into(), &mut self.patch_norm.gain));
        out.push(("patch_embed.norm.bias".into(), &mut self.patch_norm.bias));
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, blk) in stage.blocks.iter_mut().enumerate() {
                let p = block_prefix(s, b);
                out.push((format!("{p}.norm1.gain"), &mut blk.norm1.gain));
                out.push((format!("{p}.norm1.bias"), &mut blk.norm1.bias));
                out.push((format!("{p}.attn.w_q"), &mut blk.attn.w_q));
                out.push((format!("{p}.attn.w_k"), &mut blk.attn.w_k));
                out.push((format!("{p}.attn.w_v"), &mut blk.attn.w_v));
                out.push((format!("{p}.attn.w_o"), &mut blk.attn.w_o));
                if let Some(t) = &mut blk.attn.rel_pos_bias {
                    out.push((format!("{p}.attn.rel_pos_bias"), t));
                }
                out.push((format!("{p}.norm2.gain"), &mut blk.norm2.gain));
                out.push((format!("{p}.norm2.bias"), &mut blk.norm2.bias));
                out.push((format!("{p}.mlp.w1"), &mut blk.mlp.w1));
                out.push((format!("{p}.mlp.w2"), &mut blk.mlp.w2));
            }
            if let Some(m) = &mut stage.merge {
                out.push((format!("stages.{s}.merge.norm.gain"), &mut m.norm.gain));
                out.push((format!("stages.{s}.merge.norm.bias"), &mut m.norm.bias));
                out.push((format!("stages.{s}.merge.reduction"), &mut m.reduction));
            }
        }
        out.push(("norm.gain".into(), &mut self.norm.gain));
        out.push(("norm.bias".into(), &mut self.norm.bias));
        out.push(("head.weight".into(), &mut self.head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a backbone from named tensors. Attention and MLP widths are
    /// read from the tensor shapes, so pruned models load as well.
    pub fn from_named(config: &BackboneConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let mut t = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
            t.requires_grad = true;
            Ok(t)
        };
        let patch_embed = take("patch_embed.weight")?;
        let patch_norm = NormParams {
            gain: take("patch_embed.norm.gain")?,
            bias: take("patch_embed.norm.bias")?,
        };
        let mut stages = Vec::new();
        for s in 0..config.num_stages() {
            let mut blocks = Vec::new();
            for b in 0..config.depths[s] {
                let p = block_prefix(s, b);
                let norm1 = NormParams {
                    gain: take(&format!("{p}.norm1.gain"))?,
                    bias: take(&format!("{p}.norm1.bias"))?,
                };
                let mut attn = AttentionParams::new(
                    take(&format!("{p}.attn.w_q"))?,
                    take(&format!("{p}.attn.w_k"))?,
                    take(&format!("{p}.attn.w_v"))?,
                    take(&format!("{p}.attn.w_o"))?,
                    config.heads[s],
                    config.head_dim(s),
                )?;
                if config.relative_position_bias {
                    attn.rel_pos_bias = Some(take(&format!("{p}.attn.rel_pos_bias"))?);
                }
                let norm2 = NormParams {
                    gain: take(&format!("{p}.norm2.gain"))?,
                    bias: take(&format!("{p}.norm2.bias"))?,
                };
                let mlp = MlpParams::new(take(&format!("{p}.mlp.w1"))?, take(&format!("{p}.mlp.w2"))?)?;
                blocks.push(BlockParams {
                    norm1,
                    attn,
                    norm2,
                    mlp,
                });
            }
            let merge = if s + 1 < config.num_stages() {
                Some(MergeParams {
                    norm: NormParams {
                        gain: take(&format!("stages.{s}.merge.norm.gain"))?,
                        bias: take(&format!("stages.{s}.merge.norm.bias"))?,
                    },
                    reduction: take(&format!("stages.{s}.merge.reduction"))?,
                })
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        let norm = NormParams {
            gain: take("norm.gain")?,
            bias: take("norm.bias")?,
        };
        let head = take("head.weight")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        let model = Backbone {
            config: config.clone(),
            patch_embed,
            patch_norm,
            stages,
            norm,
            head,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Shapes of the non-prunable tensors agree with the config.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |t: &Tensor<T>, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "{what}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(
            &self.patch_embed,
            &[c.in_channels * c.patch_size * c.patch_size, c.dim],
            "patch_embed",
        )?;
        for (s, stage) in self.stages.iter().enumerate() {
            let d = c.stage_dim(s);
            for blk in &stage.blocks {
                expect(&blk.norm1.gain, &[d], "norm1")?;
                if blk.attn.dim() != d || blk.mlp.w1.shape()[0] != d {
                    return Err(Error::Format(format!("stage {s} block width differs from {d}")));
                }
            }
            if let Some(m) = &stage.merge {
                expect(&m.reduction, &[4 * d, 2 * d], "merge reduction")?;
            }
        }
        expect(&self.head, &[c.final_dim(), c.num_classes], "head")
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BackboneVars<'t, T> {
        let blocks = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| {
                st.blocks
                    .iter()
                    .enumerate()
                    .map(|(b, blk)| blk.bind(tape, &block_prefix(s, b)))
                    .collect()
            })
            .collect();
        let merges = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| {
                st.merge.as_ref().map(|m| {
                    (
                        m.norm.bind(tape, &format!("stages.{s}.merge.norm")),
                        tape.param(format!("stages.{s}.merge.reduction"), &m.reduction),
                    )
                })
            })
            .collect();
        BackboneVars {
            patch_embed: tape.param("patch_embed.weight", &self.patch_embed),
            patch_norm: self.patch_norm.bind(tape, "patch_embed.norm"),
            blocks,
            merges,
            norm: self.norm.bind(tape, "norm"),
            head: tape.param("head.weight", &self.head),
        }
    }

    /// Records parameters (and scores, if given) on `tape` and runs the
    /// forward pass on `images[B×C×H×W]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        scores: Option<&ScoreTable<T>>,
    ) -> Result<BackboneOutput<'t, T>> {
        let vars = self.bind(tape);
        let score_vars = scores.map(|s| s.bind(tape));
        let x = tape.constant(images);
        forward_bound(&self.config, &vars, &x, score_vars.as_ref())
    }
}

pub fn forward_bound<'t, T: Element>(
    config: &BackboneConfig,
    vars: &BackboneVars<'t, T>,
    images: &Var<'t, T>,
    scores: Option<&ScoreVars<'t, T>>,
) -> Result<BackboneOutput<'t, T>> {
    let shape = images.shape();
    if shape.len() != 4
        || shape[1] != config.in_channels
        || shape[2] != config.image_size
        || shape[3] != config.image_size
    {
        return Err(Error::dim(
            "backbone_forward",
            &shape,
            &[0, config.in_channels, config.image_size, config.image_size],
        ));
    }
    let batch = shape[0];
    let tape = images.tape();
    let mut x = tape.scoped("patch_embed", || {
        patch_embed(images, config.patch_size, &vars.patch_embed)
    })?;
    x = vars.patch_norm.apply(&x)?;
    let mut features = Vec::with_capacity(config.num_stages());
    for s in 0..config.num_stages() {
        for (b, blk) in vars.blocks[s].iter().enumerate() {
            let w = config.window_spec(s, b)?;
            let attn_site = SiteId::new(s, b, SiteKind::Attn);
            let mlp_site = SiteId::new(s, b, SiteKind::Mlp);
            let (sa, sm) = match scores {
                Some(sv) => (Some(sv.get(&attn_site)?), Some(sv.get(&mlp_site)?)),
                None => (None, None),
            };
            x = block_forward_scoped(&x, blk, sa, sm, &w, &attn_site.to_string(), &mlp_site.to_string())?;
        }
        features.push(x);
        if let Some((norm, reduction)) = &vars.merges[s] {
            let grid = config.stage_grid(s);
            x = tape.scoped(&format!("s{s}.merge"), || {
                patch_merge(&x, grid, grid, Some(norm), reduction)
            })?;
        }
    }
    let pooled = vars.norm.apply(&x)?.group_mean(batch)?;
    let logits = tape.scoped("head", || pooled.matmul(&vars.head))?;
    Ok(BackboneOutput { logits, features })
}
