mod common;

use common::{attention64, attention_ref, gelu_ref, matmul_ref, max_abs_diff, rand64, rng};
use dimprune::nn::attention::{msa_forward, scaled_dot_attention, wmsa_forward, AttentionParams};
use dimprune::nn::block::{block_forward, BlockParams};
use dimprune::nn::embed::{patch_embed, patch_merge};
use dimprune::nn::mlp::{mlp_forward, MlpParams};
use dimprune::nn::norm::NormParams;
use dimprune::nn::window::WindowSpec;
use dimprune::{attach_scores, Backbone, BackboneConfig, Tape, Tensor};
use proptest::prelude::*;

fn wmsa(x: &Tensor<f64>, p: &AttentionParams<f64>, alpha: Option<&Tensor<f64>>, w: &WindowSpec) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let vars = p.bind(&tape, "a");
    let a = alpha.map(|a| tape.leaf(a));
    wmsa_forward(&tape.leaf(x), &vars, a.as_ref(), w)
        .unwrap()
        .value()
        .to_f64_vec()
}

fn msa(x: &Tensor<f64>, p: &AttentionParams<f64>, alpha: Option<&Tensor<f64>>) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let vars = p.bind(&tape, "a");
    let a = alpha.map(|a| tape.leaf(a));
    msa_forward(&tape.leaf(x), &vars, a.as_ref())
        .unwrap()
        .value()
        .to_f64_vec()
}

/// Additive mask by (window, window tokens, head, row, column).
type WindowMask<'a> = &'a dyn Fn(usize, &[usize], usize, usize, usize) -> f64;

/// Scatters per-window reference outputs back to token order.
fn windowed_ref(
    x: &Tensor<f64>,
    p: &AttentionParams<f64>,
    alpha: Option<&[f64]>,
    windows: &[Vec<usize>],
    mask: Option<WindowMask>,
) -> Vec<f64> {
    let d = p.dim();
    let xv = x.to_f64_vec();
    let mut out = vec![0.0; xv.len()];
    for (wi, win) in windows.iter().enumerate() {
        let m = mask.map(|f| move |h: usize, r: usize, c: usize| f(wi, win, h, r, c));
        let y = attention_ref(
            &xv,
            d,
            win,
            &p.w_q.to_f64_vec(),
            &p.w_k.to_f64_vec(),
            &p.w_v.to_f64_vec(),
            &p.w_o.to_f64_vec(),
            p.heads,
            p.scale_dim,
            alpha,
            m.as_ref().map(|f| f as &dyn Fn(usize, usize, usize) -> f64),
        );
        for (pos, &tok) in win.iter().enumerate() {
            out[tok * d..(tok + 1) * d].copy_from_slice(&y[pos * d..(pos + 1) * d]);
        }
    }
    out
}

/// Windows of an `h×w` grid with cyclic shift `s`, written out directly.
fn shifted_windows(h: usize, w: usize, m: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for r0 in (0..h).step_by(m) {
        for c0 in (0..w).step_by(m) {
            let mut win = Vec::new();
            for r in r0..r0 + m {
                for c in c0..c0 + m {
                    win.push(((r + s) % h) * w + (c + s) % w);
                }
            }
            out.push(win);
        }
    }
    out
}

#[test]
fn scaled_dot_single_token_returns_its_value() {
    let tape = Tape::<f64>::new();
    let mut r = rng(1);
    let (q, k, v) = (
        rand64(&mut r, &[1, 3], 1.0),
        rand64(&mut r, &[1, 3], 1.0),
        rand64(&mut r, &[1, 3], 1.0),
    );
    let out = scaled_dot_attention(&tape.leaf(&q), &tape.leaf(&k), &tape.leaf(&v), 3, None).unwrap();
    assert_eq!(out.value().to_f64_vec(), v.to_f64_vec());
}

#[test]
fn scaled_dot_identical_keys_average_values() {
    let tape = Tape::<f64>::new();
    let mut r = rng(2);
    let q = rand64(&mut r, &[3, 2], 1.0);
    let k = Tensor::from_f64(&[3, 2], &[0.3, -0.7, 0.3, -0.7, 0.3, -0.7]).unwrap();
    let v = rand64(&mut r, &[3, 2], 1.0);
    let out = scaled_dot_attention(&tape.leaf(&q), &tape.leaf(&k), &tape.leaf(&v), 2, None)
        .unwrap()
        .value()
        .to_f64_vec();
    let vv = v.to_f64_vec();
    let mean = [(vv[0] + vv[2] + vv[4]) / 3.0, (vv[1] + vv[3] + vv[5]) / 3.0];
    for row in out.chunks(2) {
        assert!(max_abs_diff(row, &mean) < 1e-14);
    }
}

#[test]
fn scaled_dot_two_token_oracle() {
    let tape = Tape::<f64>::new();
    let q = Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap();
    let k = Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap();
    let v = Tensor::from_f64(&[2, 1], &[2.0, 4.0]).unwrap();
    let out = scaled_dot_attention(&tape.leaf(&q), &tape.leaf(&k), &tape.leaf(&v), 1, None)
        .unwrap()
        .value()
        .to_f64_vec();
    let p0 = 1.0 / (1.0 + (-2f64).exp());
    assert!((out[0] - (2.0 * p0 + 4.0 * (1.0 - p0))).abs() < 1e-14);
    assert!((out[1] - 3.0).abs() < 1e-14);
}

#[test]
fn msa_matches_explicit_per_head_oracle() {
    let mut r = rng(3);
    for (d, h) in [(6, 2), (8, 4), (6, 3), (4, 1)] {
        let p = attention64(&mut r, d, h);
        let x = rand64(&mut r, &[5, d], 1.0);
        let alpha = rand64(&mut r, &[d / h], 1.5);
        let got = msa(&x, &p, Some(&alpha));
        let tokens: Vec<usize> = (0..5).collect();
        let want = windowed_ref(&x, &p, Some(&alpha.to_f64_vec()), &[tokens], None);
        assert!(max_abs_diff(&got, &want) < 1e-12, "d={d} h={h}");
    }
}

#[test]
fn zero_scores_zero_the_attention_output() {
    let mut r = rng(4);
    let p = attention64(&mut r, 6, 2);
    let x = rand64(&mut r, &[4, 6], 1.0);
    let got = msa(&x, &p, Some(&Tensor::zeros(&[3]).unwrap()));
    assert!(got.iter().all(|v| *v == 0.0));
}

#[test]
fn single_window_covering_the_grid_is_msa() {
    let mut r = rng(5);
    let p = attention64(&mut r, 4, 2);
    let x = rand64(&mut r, &[16, 4], 1.0);
    let alpha = rand64(&mut r, &[2], 1.0);
    let w = WindowSpec::new(4, 0, 4, 4).unwrap();
    assert_eq!(wmsa(&x, &p, Some(&alpha), &w), msa(&x, &p, Some(&alpha)));
}

#[test]
fn wmsa_equals_attention_inside_each_window() {
    let mut r = rng(6);
    let p = attention64(&mut r, 4, 2);
    let x = rand64(&mut r, &[36, 4], 1.0);
    let alpha = rand64(&mut r, &[2], 1.0);
    let w = WindowSpec::new(3, 0, 6, 6).unwrap();
    let want = windowed_ref(&x, &p, Some(&alpha.to_f64_vec()), &shifted_windows(6, 6, 3, 0), None);
    assert!(max_abs_diff(&wmsa(&x, &p, Some(&alpha), &w), &want) < 1e-12);
}

#[test]
fn shifted_wmsa_masks_pairs_that_wrapped_around() {
    let mut r = rng(7);
    let p = attention64(&mut r, 4, 2);
    let (h, m, s) = (4, 2, 1);
    let x = rand64(&mut r, &[h * h, 4], 1.0);
    let w = WindowSpec::new(m, s, h, h).unwrap();
    // Two tokens may attend iff both or neither wrapped, on each axis.
    let wrapped = |tok: usize| ((tok / h + h - s) % h >= h - s, (tok % h + h - s) % h >= h - s);
    let mask = |_: usize, win: &[usize], _h: usize, a: usize, b: usize| {
        if wrapped(win[a]) == wrapped(win[b]) {
            0.0
        } else {
            -1e4
        }
    };
    let want = windowed_ref(&x, &p, None, &shifted_windows(h, h, m, s), Some(&mask));
    assert!(max_abs_diff(&wmsa(&x, &p, None, &w), &want) < 1e-12);
}

#[test]
fn masked_pairs_carry_no_information() {
    let mut r = rng(8);
    let p = attention64(&mut r, 4, 2);
    let (h, m, s) = (4, 2, 1);
    let w = WindowSpec::new(m, s, h, h).unwrap();
    let blocked = w.blocked_pairs().unwrap();
    let windows = w.window_tokens();
    let x = rand64(&mut r, &[h * h, 4], 1.0);
    let base = wmsa(&x, &p, None, &w);
    let area = m * m;
    let mut checked = 0;
    for (wi, win) in windows.iter().enumerate() {
        for a in 0..area {
            for b in 0..area {
                if !blocked[(wi * area + a) * area + b] {
                    continue;
                }
                let mut x2 = x.clone();
                for c in 0..4 {
                    x2.data_mut()[win[b] * 4 + c] += 5.0;
                }
                let moved = wmsa(&x2, &p, None, &w);
                let row = win[a];
                let diff = max_abs_diff(&base[row * 4..row * 4 + 4], &moved[row * 4..row * 4 + 4]);
                assert!(diff < 1e-8, "token {row} saw blocked token {}: {diff}", win[b]);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn relative_position_bias_matches_offset_lookup() {
    let mut r = rng(9);
    let mut p = attention64(&mut r, 4, 2);
    let m = 2;
    let table = rand64(&mut r, &[(2 * m - 1) * (2 * m - 1), 2], 1.0);
    p.rel_pos_bias = Some(table.clone());
    let x = rand64(&mut r, &[16, 4], 1.0);
    let w = WindowSpec::new(m, 0, 4, 4).unwrap();
    let t = table.to_f64_vec();
    let bias = |_: usize, _: &[usize], head: usize, a: usize, b: usize| {
        let dr = a / m + m - 1 - b / m;
        let dc = a % m + m - 1 - b % m;
        t[(dr * (2 * m - 1) + dc) * 2 + head]
    };
    let want = windowed_ref(&x, &p, None, &shifted_windows(4, 4, m, 0), Some(&bias));
    assert!(max_abs_diff(&wmsa(&x, &p, None, &w), &want) < 1e-12);

    p.rel_pos_bias = Some(Tensor::zeros(&[9, 2]).unwrap());
    let mut plain = p.clone();
    plain.rel_pos_bias = None;
    assert_eq!(wmsa(&x, &p, None, &w), wmsa(&x, &plain, None, &w));
}

#[test]
fn window_attention_is_local() {
    let mut r = rng(10);
    let p = attention64(&mut r, 4, 2);
    let w = WindowSpec::new(2, 0, 4, 4).unwrap();
    let x = rand64(&mut r, &[16, 4], 1.0);
    let base = wmsa(&x, &p, None, &w);
    let windows = w.window_tokens();
    let mut x2 = x.clone();
    x2.data_mut()[windows[0][1] * 4] += 1.0;
    let moved = wmsa(&x2, &p, None, &w);
    for tok in 0..16 {
        let same = base[tok * 4..tok * 4 + 4] == moved[tok * 4..tok * 4 + 4];
        assert_eq!(same, !windows[0].contains(&tok), "token {tok}");
    }
}

#[test]
fn shifted_windows_mix_across_window_borders() {
    let mut r = rng(11);
    let p = attention64(&mut r, 4, 2);
    let plain = WindowSpec::new(2, 0, 4, 4).unwrap();
    let shifted = WindowSpec::new(2, 1, 4, 4).unwrap();
    let x = rand64(&mut r, &[16, 4], 1.0);
    // token 5 = (1, 1) and token 6 = (1, 2) sit in different unshifted windows
    let mut x2 = x.clone();
    x2.data_mut()[5 * 4] += 1.0;
    let (a, b) = (wmsa(&x, &p, None, &plain), wmsa(&x2, &p, None, &plain));
    assert_eq!(a[6 * 4..7 * 4], b[6 * 4..7 * 4]);
    let (a, b) = (wmsa(&x, &p, None, &shifted), wmsa(&x2, &p, None, &shifted));
    assert!(max_abs_diff(&a[6 * 4..7 * 4], &b[6 * 4..7 * 4]) > 1e-6);
}

#[test]
fn mlp_matches_loop_oracle() {
    let mut r = rng(12);
    let (x, w1, w2) = (
        rand64(&mut r, &[3, 4], 1.0),
        rand64(&mut r, &[4, 6], 1.0),
        rand64(&mut r, &[6, 4], 1.0),
    );
    let alpha = rand64(&mut r, &[6], 1.5);
    let p = MlpParams::new(w1.clone(), w2.clone()).unwrap();
    let tape = Tape::<f64>::new();
    let got = mlp_forward(&tape.leaf(&x), &p.bind(&tape, "m"), Some(&tape.leaf(&alpha)))
        .unwrap()
        .value()
        .to_f64_vec();
    let a = alpha.to_f64_vec();
    let mut hidden = matmul_ref(&x.to_f64_vec(), &w1.to_f64_vec(), 3, 4, 6);
    for (i, v) in hidden.iter_mut().enumerate() {
        *v = gelu_ref(*v * a[i % 6]);
    }
    let want = matmul_ref(&hidden, &w2.to_f64_vec(), 3, 6, 4);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

fn block64(r: &mut rand_chacha::ChaCha8Rng, d: usize, heads: usize, hidden: usize) -> BlockParams<f64> {
    BlockParams {
        norm1: NormParams {
            gain: rand64(r, &[d], 1.0),
            bias: rand64(r, &[d], 1.0),
        },
        attn: attention64(r, d, heads),
        norm2: NormParams {
            gain: rand64(r, &[d], 1.0),
            bias: rand64(r, &[d], 1.0),
        },
        mlp: MlpParams::new(rand64(r, &[d, hidden], 0.5), rand64(r, &[hidden, d], 0.5)).unwrap(),
    }
}

fn run_block(x: &Tensor<f64>, p: &BlockParams<f64>, sa: &Tensor<f64>, sm: &Tensor<f64>, w: &WindowSpec) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let vars = p.bind(&tape, "b");
    block_forward(&tape.leaf(x), &vars, Some(&tape.leaf(sa)), Some(&tape.leaf(sm)), w)
        .unwrap()
        .value()
        .to_f64_vec()
}

#[test]
fn zero_output_projections_make_the_block_an_identity() {
    let mut r = rng(13);
    let mut p = block64(&mut r, 4, 2, 8);
    p.attn.w_o = Tensor::zeros(&[4, 4]).unwrap();
    p.mlp.w2 = Tensor::zeros(&[8, 4]).unwrap();
    let x = rand64(&mut r, &[16, 4], 1.0);
    let w = WindowSpec::new(2, 1, 4, 4).unwrap();
    let out = run_block(&x, &p, &rand64(&mut r, &[2], 1.0), &rand64(&mut r, &[8], 1.0), &w);
    assert_eq!(out, x.to_f64_vec());
}

#[test]
fn block_composes_prenorm_residuals() {
    let mut r = rng(14);
    let p = block64(&mut r, 4, 2, 8);
    let x = rand64(&mut r, &[16, 4], 1.0);
    let (sa, sm) = (rand64(&mut r, &[2], 1.0), rand64(&mut r, &[8], 1.0));
    let w = WindowSpec::new(2, 0, 4, 4).unwrap();
    let ln = |v: &[f64], n: &NormParams<f64>| -> Vec<f64> {
        let (g, b) = (n.gain.to_f64_vec(), n.bias.to_f64_vec());
        v.chunks(4)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / 4.0;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
                (0..4)
                    .map(move |j| (row[j] - mean) / (var + 1e-5).sqrt())
                    .collect::<Vec<_>>()
            })
            .enumerate()
            .map(|(i, v)| v * g[i % 4] + b[i % 4])
            .collect()
    };
    let xv = x.to_f64_vec();
    let h = Tensor::from_f64(&[16, 4], &ln(&xv, &p.norm1)).unwrap();
    let attn = windowed_ref(&h, &p.attn, Some(&sa.to_f64_vec()), &shifted_windows(4, 4, 2, 0), None);
    let x1: Vec<f64> = xv.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let mut hid = matmul_ref(&ln(&x1, &p.norm2), &p.mlp.w1.to_f64_vec(), 16, 4, 8);
    let smv = sm.to_f64_vec();
    for (i, v) in hid.iter_mut().enumerate() {
        *v = gelu_ref(*v * smv[i % 8]);
    }
    let mlp = matmul_ref(&hid, &p.mlp.w2.to_f64_vec(), 16, 8, 4);
    let want: Vec<f64> = x1.iter().zip(&mlp).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&run_block(&x, &p, &sa, &sm, &w), &want) < 1e-12);
}

#[test]
fn patch_embed_matches_pixel_loop() {
    let mut r = rng(15);
    let (b, c, hw, ps, d) = (2, 3, 4, 2, 5);
    let img = rand64(&mut r, &[b, c, hw, hw], 1.0);
    let we = rand64(&mut r, &[c * ps * ps, d], 1.0);
    let tape = Tape::<f64>::new();
    let got = patch_embed(&tape.leaf(&img), ps, &tape.leaf(&we))
        .unwrap()
        .value()
        .to_f64_vec();
    let (iv, wv) = (img.to_f64_vec(), we.to_f64_vec());
    let g = hw / ps;
    let mut want = Vec::new();
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for out in 0..d {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for py in 0..ps {
                            for px in 0..ps {
                                let pix = iv[((bi * c + ch) * hw + gy * ps + py) * hw + gx * ps + px];
                                acc += pix * wv[((ch * ps + py) * ps + px) * d + out];
                            }
                        }
                    }
                    want.push(acc);
                }
            }
        }
    }
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn patch_merge_concatenates_in_documented_order() {
    // grid 2×4, d = 1: token value = its index
    let x = Tensor::from_f64(&[8, 1], &(0..8).map(f64::from).collect::<Vec<_>>()).unwrap();
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let id = Tensor::from_f64(&[4, 4], &eye).unwrap();
    let tape = Tape::<f64>::new();
    let got = patch_merge(&tape.leaf(&x), 2, 4, None, &tape.leaf(&id)).unwrap();
    assert_eq!(got.shape(), vec![2, 4]);
    // top-left, bottom-left, top-right, bottom-right
    assert_eq!(got.value().to_f64_vec(), vec![0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
}

#[test]
fn backbone_shapes_and_batch_independence() {
    let cfg = common::tiny_config();
    let model = attach_scores(Backbone::init(&cfg, 3).unwrap()).unwrap();
    let imgs = common::images(&mut rng(16), &cfg, 3);
    let tape = Tape::<f32>::new();
    let out = model.forward(&tape, &imgs).unwrap();
    assert_eq!(out.logits.shape(), vec![3, cfg.num_classes]);
    for (s, f) in out.features.iter().enumerate() {
        assert_eq!(f.shape(), vec![3 * cfg.stage_tokens(s), cfg.stage_dim(s)]);
    }
    let all = out.logits.value().to_f64_vec();
    assert!(all.iter().all(|v| v.is_finite()));
    let per = cfg.in_channels * cfg.image_size * cfg.image_size;
    for i in 0..3 {
        let one = Tensor::new(
            &[1, cfg.in_channels, cfg.image_size, cfg.image_size],
            imgs.data()[i * per..(i + 1) * per].to_vec(),
        )
        .unwrap();
        let t = Tape::<f32>::new();
        let l = model.forward(&t, &one).unwrap().logits.value().to_f64_vec();
        let k = cfg.num_classes;
        assert!(max_abs_diff(&l, &all[i * k..(i + 1) * k]) < 1e-5);
    }
}

#[test]
fn backbone_rejects_wrong_image_size() {
    let cfg = BackboneConfig::desk();
    let model = Backbone::init(&cfg, 0).unwrap();
    let tape = Tape::<f32>::new();
    let bad = Tensor::zeros(&[1, 3, 16, 16]).unwrap();
    assert!(model.forward(&tape, &bad, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unit_scores_are_an_exact_identity(seed in 0u64..1000, shift in 0usize..2) {
        let mut r = rng(seed);
        let p = attention64(&mut r, 4, 2);
        let x = rand64(&mut r, &[16, 4], 1.0);
        let w = WindowSpec::new(2, shift, 4, 4).unwrap();
        let ones = Tensor::ones(&[2]).unwrap();
        prop_assert_eq!(wmsa(&x, &p, Some(&ones), &w), wmsa(&x, &p, None, &w));
        let b = block64(&mut r, 4, 2, 8);
        let tape = Tape::<f64>::new();
        let vars = b.bind(&tape, "b");
        let plain = block_forward(&tape.leaf(&x), &vars, None, None, &w).unwrap().value();
        prop_assert_eq!(run_block(&x, &b, &ones, &Tensor::ones(&[8]).unwrap(), &w), plain.to_f64_vec());
    }

    #[test]
    fn msa_is_permutation_equivariant(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut r = rng(seed);
        let p = attention64(&mut r, 6, 3);
        let x = rand64(&mut r, &[6, 6], 1.0);
        let alpha = rand64(&mut r, &[2], 1.0);
        let xv = x.to_f64_vec();
        let px: Vec<f64> = perm.iter().flat_map(|&i| xv[i * 6..(i + 1) * 6].to_vec()).collect();
        let base = msa(&x, &p, Some(&alpha));
        let permuted = msa(&Tensor::from_f64(&[6, 6], &px).unwrap(), &p, Some(&alpha));
        let want: Vec<f64> = perm.iter().flat_map(|&i| base[i * 6..(i + 1) * 6].to_vec()).collect();
        prop_assert!(max_abs_diff(&permuted, &want) < 1e-12);
    }

    #[test]
    fn blocks_preserve_shape(seed in 0u64..1000, batch in 1usize..3, shift in 0usize..2) {
        let mut r = rng(seed);
        let b = block64(&mut r, 4, 2, 8);
        let x = rand64(&mut r, &[16 * batch, 4], 1.0);
        let w = WindowSpec::new(2, shift, 4, 4).unwrap();
        let tape = Tape::<f64>::new();
        let vars = b.bind(&tape, "b");
        let y = block_forward(&tape.leaf(&x), &vars, None, None, &w).unwrap();
        prop_assert_eq!(y.shape(), vec![16 * batch, 4]);
    }
}
