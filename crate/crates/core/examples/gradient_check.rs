//! Central-difference check of a scored MLP, including the gradient with
//! respect to the scores.

use dimprune::gradcheck::{check_gradients, GradCheckOptions};
use dimprune::nn::mlp::{mlp_forward, MlpVars};
use dimprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).unwrap().with_grad()
}

fn main() -> dimprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, hidden) = (5, 4, 8);
    let inputs = [
        random(&mut rng, &[n, d]),
        random(&mut rng, &[d, hidden]),
        random(&mut rng, &[hidden, d]),
        random(&mut rng, &[hidden]),
    ];
    let report = check_gradients(
        &inputs,
        |_, v| {
            let vars = MlpVars { w1: v[1], w2: v[2] };
            mlp_forward(&v[0], &vars, Some(&v[3]))?.sum()
        },
        &GradCheckOptions::default(),
    )?;
    for p in &report.probes {
        println!(
            "input {} [{:>2}]  analytic {:+.6}  numeric {:+.6}  rel {:.1e}",
            p.input, p.index, p.analytic, p.numeric, p.rel_error
        );
    }
    println!(
        "max relative error {:.2e}: {}",
        report.max_rel_error,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(())
}
