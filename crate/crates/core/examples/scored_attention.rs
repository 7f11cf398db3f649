//! Multi-head attention with a score vector on the head dimensions. One
//! score scales the same column of Q, K and V in every head, so zeroing it
//! switches that dimension off everywhere.

use dimprune::nn::attention::{msa_forward, AttentionParams};
use dimprune::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, 0.5).unwrap();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn main() -> dimprune::Result<()> {
    let (n, d, heads) = (6, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = AttentionParams::new(
        random(&mut rng, &[d, d]),
        random(&mut rng, &[d, d]),
        random(&mut rng, &[d, d]),
        random(&mut rng, &[d, d]),
        heads,
        d / heads,
    )?;
    let x = random(&mut rng, &[n, d]);

    let run = |alpha: Option<&[f64]>| -> dimprune::Result<Tensor<f64>> {
        let tape = Tape::new();
        let vars = p.bind(&tape, "attn");
        let scores = alpha.map(|a| tape.leaf(&Tensor::from_f64(&[a.len()], a).unwrap()));
        Ok(msa_forward(&tape.leaf(&x), &vars, scores.as_ref())?.value())
    };

    let plain = run(None)?;
    let ones = run(Some(&[1.0; 4]))?;
    println!("unit scores change nothing: max diff {:.1e}", plain.max_abs_diff(&ones));

    let half = run(Some(&[1.0, 0.0, 1.0, 0.0]))?;
    println!("two of four head dims off:  max diff {:.3}", plain.max_abs_diff(&half));

    // The same function with the two dimensions physically removed.
    let keep = [0usize, 2];
    let cols: Vec<usize> = (0..heads).flat_map(|h| keep.iter().map(move |&i| h * 4 + i)).collect();
    let take_cols = |w: &Tensor<f64>| {
        let data: Vec<f64> = (0..d).flat_map(|r| cols.iter().map(move |&c| w.at2(r, c))).collect();
        Tensor::from_f64(&[d, cols.len()], &data).unwrap()
    };
    let w_o = &p.w_o;
    let rows: Vec<f64> = cols.iter().flat_map(|&r| (0..d).map(move |c| w_o.at2(r, c))).collect();
    let small = AttentionParams::new(
        take_cols(&p.w_q),
        take_cols(&p.w_k),
        take_cols(&p.w_v),
        Tensor::from_f64(&[cols.len(), d], &rows)?,
        heads,
        d / heads,
    )?;
    let tape = Tape::new();
    let out = msa_forward(&tape.leaf(&x), &small.bind(&tape, "attn"), None)?.value();
    println!("removed instead of zeroed:  max diff {:.1e}", half.max_abs_diff(&out));
    Ok(())
}
