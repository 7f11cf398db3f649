//! Surgery check on a small random model: the pruned network computes the
//! same logits as the scored one with its dropped scores set to zero.

use dimprune::pruner::{mask_dropped, prune_model};
use dimprune::{attach_scores, Backbone, BackboneConfig, ScoredModel, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dimprune::Result<()> {
    let cfg = BackboneConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = attach_scores(Backbone::init(&cfg, 1)?)?;
    for e in model.scores.iter_mut() {
        for a in e.alpha.data_mut() {
            *a = rng.random_range(-1.5..1.5);
        }
    }
    let n = 2 * cfg.in_channels * cfg.image_size * cfg.image_size;
    let pixels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::<f32>::from_f64(&[2, cfg.in_channels, cfg.image_size, cfg.image_size], &pixels)?;

    for rho in [1.0, 0.75, 0.5, 0.25] {
        let (pruned, report) = prune_model(&model, rho)?;
        let masked = ScoredModel::new(model.backbone.clone(), mask_dropped(&model.scores, rho)?)?;
        let (t1, t2) = (Tape::new(), Tape::new());
        let want = masked.forward(&t1, &images)?.logits.value();
        let got = pruned.forward(&t2, &images, None)?.logits.value();
        println!(
            "rho {rho:<4}  params {:>6} -> {:>6}  max |logit diff| {:.1e}",
            report.params_before,
            report.params_after,
            got.max_abs_diff(&want)
        );
    }
    Ok(())
}
