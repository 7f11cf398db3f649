//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use dimprune::nn::attention::AttentionParams;
use dimprune::scoring::{ScoreTable, ScoreVector};
use dimprune::{attach_scores, Backbone, BackboneConfig, ScoredModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

/// Trainable f64 tensor with entries in `(-a, a)`.
pub fn rand64(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &uniform(rng, n, a)).unwrap().with_grad()
}

pub fn rand32(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &uniform(rng, n, a)).unwrap().with_grad()
}

/// Images in `[0, 1]`.
pub fn images(rng: &mut ChaCha8Rng, cfg: &BackboneConfig, batch: usize) -> Tensor<f32> {
    let n = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_f64(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], &data).unwrap()
}

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        in_channels: 2,
        patch_size: 2,
        dim: 8,
        depths: vec![2, 1],
        heads: vec![2, 2],
        window: 2,
        mlp_ratio: 2,
        num_classes: 3,
        relative_position_bias: false,
    }
}

/// Twelve small configurations varying depth, heads, window, shift, ratio,
/// patch size and position bias.
pub fn config_matrix() -> Vec<BackboneConfig> {
    let base = tiny_config();
    let mut out = Vec::new();
    let mut push = |f: &dyn Fn(&mut BackboneConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.validate().unwrap();
        out.push(c);
    };
    push(&|_| {});
    push(&|c| c.relative_position_bias = true);
    push(&|c| {
        c.depths = vec![1];
        c.heads = vec![2];
    });
    push(&|c| {
        c.depths = vec![1];
        c.heads = vec![4];
    });
    push(&|c| {
        c.window = 4;
        c.depths = vec![2, 2];
    });
    push(&|c| {
        c.image_size = 16;
        c.depths = vec![2, 2, 1];
        c.heads = vec![1, 2, 4];
    });
    push(&|c| {
        c.image_size = 16;
        c.window = 4;
        c.relative_position_bias = true;
    });
    push(&|c| c.mlp_ratio = 3);
    push(&|c| {
        c.dim = 6;
        c.heads = vec![3, 3];
        c.in_channels = 1;
    });
    push(&|c| {
        c.patch_size = 4;
        c.image_size = 16;
        c.num_classes = 5;
    });
    push(&|c| {
        c.image_size = 12;
        c.window = 3;
        c.depths = vec![2];
        c.heads = vec![2];
    });
    push(&|c| {
        c.dim = 12;
        c.heads = vec![3, 6];
        c.mlp_ratio = 1;
        c.relative_position_bias = true;
    });
    assert_eq!(out.len(), 12);
    out
}

/// A model with random weights and random scores of mixed sign and
/// magnitude, including near-ties.
pub fn random_scored(cfg: &BackboneConfig, seed: u64) -> ScoredModel<f32> {
    let mut backbone = Backbone::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, t) in backbone.named_tensors_mut() {
        if t.shape().len() == 1 || t.numel() == 0 {
            // norm gains and biases: perturb away from identity
            for v in t.data_mut() {
                *v += r.random_range(-0.2f32..0.2);
            }
        } else if t.data().iter().all(|v| *v == 0.0) {
            for v in t.data_mut() {
                *v = r.random_range(-0.5f32..0.5);
            }
        }
    }
    let ScoredModel { backbone, scores } = attach_scores(backbone).unwrap();
    let entries = scores
        .iter()
        .map(|e| {
            let n = e.alpha.numel();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let m: f64 = r.random_range(0.05..1.5);
                    if r.random_bool(0.3) {
                        -m
                    } else {
                        m
                    }
                })
                .collect();
            ScoreVector {
                site: e.site,
                alpha: Tensor::from_f64(&[n], &data).unwrap().with_grad(),
            }
        })
        .collect();
    ScoredModel::new(backbone, ScoreTable::new(entries).unwrap()).unwrap()
}

pub fn attention64(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams<f64> {
    let a = 1.0 / (d as f64).sqrt();
    AttentionParams::new(
        rand64(rng, &[d, d], a),
        rand64(rng, &[d, d], a),
        rand64(rng, &[d, d], a),
        rand64(rng, &[d, d], a),
        heads,
        d / heads,
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// -- plain-loop oracles, independent of the tape --

pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax_ref(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head attention over `tokens` (row indices of `x[n×d]`) with an
/// explicit `diag(α)` multiplying every head's Q, K and V, and an optional
/// additive logit offset `mask(head, row, col)`. Returns rows in `tokens` order.
#[allow(clippy::too_many_arguments)]
pub fn attention_ref(
    x: &[f64],
    d: usize,
    tokens: &[usize],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    heads: usize,
    scale_dim: usize,
    alpha: Option<&[f64]>,
    mask: Option<&dyn Fn(usize, usize, usize) -> f64>,
) -> Vec<f64> {
    let width = wq.len() / d;
    let dh = width / heads;
    let n = tokens.len();
    let xs: Vec<f64> = tokens.iter().flat_map(|&t| x[t * d..(t + 1) * d].to_vec()).collect();
    let q = matmul_ref(&xs, wq, n, d, width);
    let k = matmul_ref(&xs, wk, n, d, width);
    let v = matmul_ref(&xs, wv, n, d, width);
    let mut concat = vec![0.0; n * width];
    for j in 0..heads {
        let pick = |m: &[f64], r: usize, i: usize| {
            let a = alpha.map_or(1.0, |a| a[i]);
            m[r * width + j * dh + i] * a
        };
        for r in 0..n {
            let mut logits = vec![0.0; n];
            for (c, l) in logits.iter_mut().enumerate() {
                let dot: f64 = (0..dh).map(|i| pick(&q, r, i) * pick(&k, c, i)).sum();
                *l = dot / (scale_dim as f64).sqrt() + mask.map_or(0.0, |f| f(j, r, c));
            }
            let p = softmax_ref(&logits);
            for i in 0..dh {
                concat[r * width + j * dh + i] = (0..n).map(|c| p[c] * pick(&v, c, i)).sum();
            }
        }
    }
    matmul_ref(&concat, wo, n, width, d)
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

/// Indices surviving at keep ratio `rho`: the `round(ρk)` (at least one)
/// largest `|α|`, ties to the lower index, ascending.
pub fn keep_oracle(alpha: &[f64], rho: f64) -> Vec<usize> {
    let k = alpha.len();
    let count = ((rho * k as f64 + 0.5).floor() as usize).clamp(1, k);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| alpha[b].abs().total_cmp(&alpha[a].abs()).then(a.cmp(&b)));
    let mut kept = idx[..count].to_vec();
    kept.sort_unstable();
    kept
}

/// Max abs difference between the pruned model's logits and the scored
/// model's logits with the dropped scores zeroed by hand.
pub fn masked_equivalence_gap(cfg: &BackboneConfig, seed: u64, rho: f64) -> f64 {
    use dimprune::pruner::prune_model;
    use dimprune::Tape;
    let model = random_scored(cfg, seed);
    let (pruned, _) = prune_model(&model, rho).unwrap();
    let mut masked = model.clone();
    for e in masked.scores.iter_mut() {
        let a = e.alpha.to_f64_vec();
        let keep = keep_oracle(&a, rho);
        for (i, v) in e.alpha.data_mut().iter_mut().enumerate() {
            if !keep.contains(&i) {
                *v = 0.0;
            }
        }
    }
    let x = images(&mut rng(seed + 1), cfg, 3);
    let t1 = Tape::<f32>::new();
    let want = masked.forward(&t1, &x).unwrap().logits.value().to_f64_vec();
    let t2 = Tape::<f32>::new();
    let got = pruned.forward(&t2, &x, None).unwrap().logits.value().to_f64_vec();
    max_abs_diff(&got, &want)
}
