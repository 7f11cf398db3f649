//! Finite-difference cases: every differentiable op, the attention variants,
//! the composed scored block and the full scored loss.

use super::{rand64, rng, tiny_config};
use dimprune::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use dimprune::nn::attention::{msa_forward, scaled_dot_attention, wmsa_forward, AttentionVars};
use dimprune::nn::backbone::forward_bound;
use dimprune::nn::block::{block_forward, BlockVars};
use dimprune::nn::embed::{patch_embed, patch_merge};
use dimprune::nn::mlp::{mlp_forward, MlpVars};
use dimprune::nn::norm::NormVars;
use dimprune::nn::window::WindowSpec;
use dimprune::scoring::{total_loss, ScoreVars};
use dimprune::{Backbone, Result, Tape, Tensor, Var};
use rand::Rng;

pub struct Case {
    pub name: &'static str,
    pub run: Box<dyn Fn(&GradCheckOptions) -> GradCheckReport>,
}

/// `Σ out ⊙ P` for a fixed random `P`, so every output entry contributes.
pub fn project<'t>(tape: &'t Tape<f64>, v: &Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = v.shape();
    let mut r = rng(shape.iter().fold(17, |a, &s| a * 31 + s as u64));
    let p = Tensor::from_f64(
        &shape,
        &(0..v.numel()).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>(),
    )?;
    v.mul(&tape.constant(&p))?.sum()
}

/// Entries with `|x| ≥ 0.2`, clear of the L1 kink at the probe step.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.2);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap().with_grad()
}

macro_rules! case {
    ($name:expr, $inputs:expr, $f:expr) => {
        Case {
            name: $name,
            run: Box::new(move |opts: &GradCheckOptions| {
                check_gradients(&$inputs, $f, opts).unwrap_or_else(|e| panic!("{}: {e}", $name))
            }),
        }
    };
}

fn t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand64(&mut rng(seed), shape, 1.0)
}

fn attn_vars<'t>(
    v: &[Var<'t, f64>],
    heads: usize,
    scale_dim: usize,
    rpb: Option<Var<'t, f64>>,
) -> AttentionVars<'t, f64> {
    let width = v[0].shape()[1];
    AttentionVars {
        w_q: v[0],
        w_k: v[1],
        w_v: v[2],
        w_o: v[3],
        heads,
        head_dim: width / heads,
        scale_dim,
        rel_pos_bias: rpb,
    }
}

fn attn_inputs(seed: u64, d: usize) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    let a = 1.0 / (d as f64).sqrt();
    (0..4).map(|_| rand64(&mut r, &[d, d], a)).collect()
}

pub fn cases() -> Vec<Case> {
    let mut out = vec![
        case!("add", [t(1, &[3, 4]), t(2, &[3, 4])], |tp, v| project(
            tp,
            &v[0].add(&v[1])?
        )),
        case!("sub", [t(3, &[3, 4]), t(4, &[3, 4])], |tp, v| project(
            tp,
            &v[0].sub(&v[1])?
        )),
        case!("mul", [t(5, &[3, 4]), t(6, &[3, 4])], |tp, v| project(
            tp,
            &v[0].mul(&v[1])?
        )),
        case!("scale", [t(7, &[2, 5])], |tp, v| project(tp, &v[0].scale(-1.7))),
        case!("add_row", [t(8, &[3, 4]), t(9, &[4])], |tp, v| project(
            tp,
            &v[0].add_row(&v[1])?
        )),
        case!("mul_row", [t(10, &[3, 4]), t(11, &[4])], |tp, v| project(
            tp,
            &v[0].mul_row(&v[1])?
        )),
        case!("matmul", [t(12, &[3, 4]), t(13, &[4, 5])], |tp, v| project(
            tp,
            &v[0].matmul(&v[1])?
        )),
        case!("bmm", [t(14, &[2, 3, 4]), t(15, &[2, 4, 5])], |tp, v| project(
            tp,
            &v[0].bmm(&v[1], false)?
        )),
        case!("bmm_trans_b", [t(16, &[2, 3, 4]), t(17, &[2, 5, 4])], |tp, v| project(
            tp,
            &v[0].bmm(&v[1], true)?
        )),
        case!("gather", [t(18, &[3, 4])], |tp, v| {
            let index = (0..15).map(|i| (i * 7) % 12).collect();
            project(tp, &v[0].gather(&[3, 5], index)?)
        }),
        case!("transpose", [t(19, &[3, 4])], |tp, v| project(tp, &v[0].transpose()?)),
        case!("reshape", [t(20, &[3, 4])], |tp, v| project(
            tp,
            &v[0].reshape(&[2, 6])?
        )),
        case!("concat_last", [t(21, &[3, 2]), t(22, &[3, 4])], |tp, v| project(
            tp,
            &v[0].concat_last(&v[1])?
        )),
        case!("softmax_rows", [t(23, &[3, 5])], |tp, v| project(
            tp,
            &v[0].scale(2.0).softmax_rows()?
        )),
        case!("layer_norm", [t(24, &[3, 6]), t(25, &[6]), t(26, &[6])], |tp, v| {
            project(tp, &v[0].layer_norm(&v[1], &v[2], 1e-5)?)
        }),
        case!("gelu", [t(27, &[4, 5])], |tp, v| project(tp, &v[0].scale(2.0).gelu())),
        case!("l1_norm", [away_from_zero(28, &[7])], |_tp, v| Ok(v[0].l1_norm())),
        case!("sum", [t(29, &[3, 4])], |tp, v| project(tp, &v[0].mul(&v[0])?.sum()?)),
        case!("mean", [t(30, &[3, 4])], |tp, v| project(tp, &v[0].mul(&v[0])?.mean()?)),
        case!("group_mean", [t(31, &[6, 4])], |tp, v| project(
            tp,
            &v[0].group_mean(3)?
        )),
        case!("cross_entropy", [t(32, &[4, 3])], |_tp, v| v[0]
            .scale(2.0)
            .cross_entropy(&[0, 2, 1, 2])),
        case!(
            "scaled_dot_attention",
            [t(33, &[4, 3]), t(34, &[4, 3]), t(35, &[4, 3])],
            |tp, v| {
                let mut m = vec![0.0; 16];
                m[1] = -1e4;
                m[14] = -1e4;
                let mask = tp.constant(&Tensor::from_f64(&[4, 4], &m)?);
                project(tp, &scaled_dot_attention(&v[0], &v[1], &v[2], 3, Some(&mask))?)
            }
        ),
    ];

    let mut msa_in = attn_inputs(40, 6);
    msa_in.push(t(41, &[5, 6]));
    msa_in.push(away_from_zero(42, &[3]));
    out.push(case!("msa_scored", msa_in, |tp, v| {
        let p = attn_vars(v, 2, 3, None);
        project(tp, &msa_forward(&v[4], &p, Some(&v[5]))?)
    }));

    let mut wmsa_in = attn_inputs(43, 4);
    wmsa_in.push(t(44, &[16, 4]));
    wmsa_in.push(away_from_zero(45, &[2]));
    wmsa_in.push(t(46, &[9, 2]));
    out.push(case!("wmsa_shifted_scored_rpb", wmsa_in, |tp, v| {
        let w = WindowSpec::new(2, 1, 4, 4)?;
        let p = attn_vars(v, 2, 2, Some(v[6]));
        project(tp, &wmsa_forward(&v[4], &p, Some(&v[5]), &w)?)
    }));

    out.push(case!(
        "mlp_scored",
        [t(47, &[3, 4]), t(48, &[4, 6]), t(49, &[6, 4]), away_from_zero(50, &[6])],
        |tp, v| {
            let p = MlpVars { w1: v[1], w2: v[2] };
            project(tp, &mlp_forward(&v[0], &p, Some(&v[3]))?)
        }
    ));

    out.push(case!("patch_embed", [t(51, &[2, 2, 4, 4]), t(52, &[8, 3])], |tp, v| {
        project(tp, &patch_embed(&v[0], 2, &v[1])?)
    }));

    out.push(case!(
        "patch_merge",
        [t(53, &[32, 3]), t(54, &[12]), t(55, &[12]), t(56, &[12, 6])],
        |tp, v| {
            let norm = NormVars { gain: v[1], bias: v[2] };
            project(tp, &patch_merge(&v[0], 4, 4, Some(&norm), &v[3])?)
        }
    ));

    // x, norm1 (gain, bias), W_Q, W_K, W_V, W_O, norm2 (gain, bias), W_1, W_2,
    // α_attn, α_mlp, relative position bias
    let mut blk = vec![t(60, &[16, 4]), t(61, &[4]), t(62, &[4])];
    blk.extend(attn_inputs(63, 4));
    blk.extend([t(64, &[4]), t(65, &[4]), t(66, &[4, 8]), t(67, &[8, 4])]);
    blk.extend([away_from_zero(68, &[2]), away_from_zero(69, &[8]), t(70, &[9, 2])]);
    out.push(case!("scored_block", blk, |tp, v| {
        let p = BlockVars {
            norm1: NormVars { gain: v[1], bias: v[2] },
            attn: attn_vars(&v[3..7], 2, 2, Some(v[13])),
            norm2: NormVars { gain: v[7], bias: v[8] },
            mlp: MlpVars { w1: v[9], w2: v[10] },
        };
        let w = WindowSpec::new(2, 1, 4, 4)?;
        project(tp, &block_forward(&v[0], &p, Some(&v[11]), Some(&v[12]), &w)?)
    }));

    out.push(scored_loss_case());
    out
}

/// `CE + γ·Σ‖α‖₁` of a whole scored backbone, differentiated w.r.t. every
/// score vector.
fn scored_loss_case() -> Case {
    let cfg = tiny_config();
    let model = super::random_scored(&cfg, 71).cast::<f64>();
    let sites: Vec<_> = model.scores.iter().map(|e| e.site).collect();
    let alphas: Vec<Tensor<f64>> = model.scores.iter().map(|e| e.alpha.clone()).collect();
    let backbone: Backbone<f64> = model.backbone;
    let images = super::images(&mut rng(72), &cfg, 2).cast::<f64>();
    Case {
        name: "scored_model_loss",
        run: Box::new(move |opts| {
            check_gradients(
                &alphas,
                |tp, v| {
                    let vars = backbone.bind(tp);
                    let sv = ScoreVars::from_vars(sites.iter().copied().zip(v.iter().copied()));
                    let x = tp.constant(&images);
                    let out = forward_bound(&backbone.config, &vars, &x, Some(&sv))?;
                    total_loss(&out.logits, &[0, 2], v, 0.05)
                },
                opts,
            )
            .unwrap()
        }),
    }
}
