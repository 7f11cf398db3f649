//! Search, prune, fine-tune and evaluate.
//!
//! Each stage consumes and produces checkpoints. Training is single-threaded
//! and fully determined by the stage config: epoch `e` shuffles and augments
//! with a ChaCha stream `e` seeded by `seed`, so a resumed run replays the
//! same batches.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{PlainCheckpoint, ScoredCheckpoint, TrainState};
use crate::data::{preprocess, Augment, DataSpec, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::backbone::{forward_bound, Backbone};
use crate::optim::{AdamW, AdamWConfig};
use crate::pruner::{prune_model, PruneReport};
use crate::scoring::{total_loss, ScoreTable, ScoredModel, DEFAULT_GAMMA};
use crate::tensor::Tensor;

/// `|α|` below this counts as "near zero" in logs and reports.
pub const NEAR_ZERO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Search,
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Search => "search",
            StageKind::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// L1 weight on the scores; read by the search stage only.
    pub gamma: f64,
    pub seed: u64,
    pub data: DataSpec,
}

impl StageConfig {
    /// Minutes-scale settings on the synthetic task.
    pub fn desk(stage: StageKind) -> Self {
        StageConfig {
            stage,
            epochs: 20,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.05,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            data: DataSpec::synthetic(0, 64, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if [self.weight_decay, self.gamma].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("weight_decay and gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: StageKind,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// `Σ|α|`, search only.
    pub score_l1: Option<f64>,
    /// Scores with `|α| < 0.1`, search only.
    pub scores_near_zero: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Appends one JSON record per line.
pub fn append_jsonl<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Internal(format!("encoding record: {e}")))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits[B × K]` whose argmax equals the label.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn load_split(spec: &DataSpec, split: &str, model: &Backbone<f32>) -> Result<(Dataset, Normalization)> {
    let c = &model.config;
    let ds = spec.load(split, c.image_size, c.in_channels, c.num_classes)?;
    let norm = spec.normalization(c.in_channels)?;
    Ok((ds, norm))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains `backbone` (and `scores`, when present) from epoch `state.epochs_done`
/// up to `cfg.epochs`.
fn train(
    cfg: &StageConfig,
    backbone: &mut Backbone<f32>,
    mut scores: Option<&mut ScoreTable<f32>>,
    state: &mut TrainState,
    log: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let (ds, norm) = load_split(&cfg.data, "train", backbone)?;
    let augment = cfg.data.augment.then(Augment::default);
    let gamma = if scores.is_some() { cfg.gamma } else { 0.0 };
    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (raw, labels) = ds.batch(chunk)?;
            let x = preprocess(&raw, augment, &norm, &mut rng)?;
            let tape = Tape::<f32>::new();
            let (loss_id, loss_value, hits) = {
                let vars = backbone.bind(&tape);
                let score_vars = scores.as_deref().map(|s| s.bind(&tape));
                let images = tape.constant(&x);
                let out = forward_bound(&backbone.config, &vars, &images, score_vars.as_ref())?;
                let alphas = score_vars.as_ref().map(|s| s.vars()).unwrap_or_default();
                let loss = total_loss(&out.logits, &labels, &alphas, gamma)?;
                (
                    loss.id(),
                    loss.value().item(),
                    count_correct(&out.logits.value(), &labels),
                )
            };
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            let grads = tape.backward(loss_id)?;
            let mut params = backbone.named_tensors_mut();
            if let Some(s) = scores.as_deref_mut() {
                params.extend(s.iter_mut().map(|e| (format!("score.{}", e.site), &mut e.alpha)));
            }
            state.optimizer.step(params, &grads)?;
            loss_sum += loss_value * chunk.len() as f64;
            correct += hits;
        }
        state.epochs_done = epoch + 1;
        let m = EpochMetrics {
            stage: cfg.stage,
            epoch: epoch + 1,
            loss: loss_sum / ds.len() as f64,
            train_accuracy: correct as f64 / ds.len() as f64,
            score_l1: scores.as_deref().map(ScoreTable::l1),
            scores_near_zero: scores.as_deref().map(|s| s.count_below(NEAR_ZERO)),
        };
        if let Some(path) = log {
            append_jsonl(path, &m)?;
        }
        history.push(m);
    }
    Ok(history)
}

fn fresh_state(cfg: &StageConfig) -> Result<TrainState> {
    Ok(TrainState {
        epochs_done: 0,
        seed: cfg.seed,
        optimizer: AdamW::new(cfg.optimizer())?,
    })
}

/// Trains weights and scores jointly under `CE + γ·Σ‖α‖₁`. A checkpoint that
/// already went through part of the same search resumes where it stopped.
pub fn run_search(
    cfg: &StageConfig,
    start: ScoredCheckpoint,
    log: Option<&Path>,
) -> Result<(ScoredCheckpoint, Vec<EpochMetrics>)> {
    if cfg.stage != StageKind::Search {
        return Err(Error::Config("run_search needs a search stage config".into()));
    }
    let ScoredCheckpoint {
        model, train: prior, ..
    } = start;
    let ScoredModel {
        mut backbone,
        mut scores,
    } = model;
    let mut state = match prior {
        Some(t) if t.seed == cfg.seed && t.optimizer.config == cfg.optimizer() => t,
        _ => fresh_state(cfg)?,
    };
    let history = train(cfg, &mut backbone, Some(&mut scores), &mut state, log)?;
    let out = ScoredCheckpoint {
        stage: StageKind::Search.name().into(),
        model: ScoredModel::new(backbone, scores)?,
        train: Some(state),
        data: Some(cfg.data.clone()),
    };
    Ok((out, history))
}

/// Surgery at keep ratio `rho`; the result carries no scores and no optimizer state.
pub fn run_prune(start: &ScoredCheckpoint, rho: f64) -> Result<(PlainCheckpoint, PruneReport)> {
    let (model, report) = prune_model(&start.model, rho)?;
    let out = PlainCheckpoint {
        stage: "prune".into(),
        model,
        rho: Some(rho),
        train: None,
        data: start.data.clone(),
    };
    Ok((out, report))
}

/// Warm-start training of a score-free model. Optimizer moments start fresh
/// unless the checkpoint is itself a partial fine-tune with the same settings.
pub fn run_finetune(
    cfg: &StageConfig,
    start: PlainCheckpoint,
    log: Option<&Path>,
) -> Result<(PlainCheckpoint, Vec<EpochMetrics>)> {
    if cfg.stage != StageKind::Finetune {
        return Err(Error::Config("run_finetune needs a finetune stage config".into()));
    }
    let PlainCheckpoint {
        stage,
        mut model,
        rho,
        train: prior,
        ..
    } = start;
    let mut state = match prior {
        Some(t)
            if stage == StageKind::Finetune.name() && t.seed == cfg.seed && t.optimizer.config == cfg.optimizer() =>
        {
            t
        }
        _ => fresh_state(cfg)?,
    };
    let history = train(cfg, &mut model, None, &mut state, log)?;
    let out = PlainCheckpoint {
        stage: StageKind::Finetune.name().into(),
        model,
        rho,
        train: Some(state),
        data: Some(cfg.data.clone()),
    };
    Ok((out, history))
}

/// Top-1 accuracy and mean cross-entropy, no augmentation, no mutation.
pub fn evaluate(
    backbone: &Backbone<f32>,
    scores: Option<&ScoreTable<f32>>,
    ds: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<EvalResult> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (raw, labels) = ds.batch(chunk)?;
        let x = preprocess(&raw, None, norm, &mut rng)?;
        let tape = Tape::<f32>::new();
        let out = backbone.forward(&tape, &x, scores)?;
        let logits = out.logits.value();
        loss_sum += out.logits.cross_entropy(&labels)?.value().item() * chunk.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / ds.len() as f64,
        loss: loss_sum / ds.len() as f64,
        samples: ds.len(),
    })
}

/// Evaluates on `split` of `spec`, including scores for a search checkpoint.
pub fn evaluate_split(
    backbone: &Backbone<f32>,
    scores: Option<&ScoreTable<f32>>,
    spec: &DataSpec,
    split: &str,
    batch_size: usize,
) -> Result<EvalResult> {
    let (ds, norm) = load_split(spec, split, backbone)?;
    evaluate(backbone, scores, &ds, &norm, batch_size)
}
