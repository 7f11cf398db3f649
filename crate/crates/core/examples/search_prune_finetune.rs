//! The whole procedure on the synthetic 4-class task: search with an L1
//! penalty on the scores, prune at ρ = 0.6, fine-tune the smaller model.

use dimprune::checkpoint::ScoredCheckpoint;
use dimprune::cost::measured_cost;
use dimprune::pipeline::{evaluate_split, run_finetune, run_prune, run_search, StageConfig, StageKind};
use dimprune::{attach_scores, Backbone, BackboneConfig};

fn main() -> dimprune::Result<()> {
    let rho = std::env::args().nth(1).map_or(0.6, |s| s.parse().expect("rho"));
    let config = BackboneConfig::desk();
    let search_cfg = StageConfig::desk(StageKind::Search);
    let finetune_cfg = StageConfig::desk(StageKind::Finetune);

    let start = ScoredCheckpoint {
        stage: "init".into(),
        model: attach_scores(Backbone::init(&config, search_cfg.seed)?)?,
        train: None,
        data: Some(search_cfg.data.clone()),
    };
    let (searched, history) = run_search(&search_cfg, start, None)?;
    for m in &history {
        println!(
            "search   epoch {:>2}  loss {:.4}  acc {:.3}  sum|a| {:.2}  near-zero {}",
            m.epoch,
            m.loss,
            m.train_accuracy,
            m.score_l1.unwrap_or(0.0),
            m.scores_near_zero.unwrap_or(0)
        );
    }

    let (pruned, report) = run_prune(&searched, rho)?;
    println!(
        "pruned at rho = {rho}: {} -> {} parameters",
        report.params_before, report.params_after
    );
    let data = &search_cfg.data;
    let before = evaluate_split(&pruned.model, None, data, "train", 64)?;
    println!("right after surgery: train accuracy {:.3}", before.accuracy);

    let (tuned, history) = run_finetune(&finetune_cfg, pruned, None)?;
    for m in &history {
        println!(
            "finetune epoch {:>2}  loss {:.4}  acc {:.3}",
            m.epoch, m.loss, m.train_accuracy
        );
    }

    let full = evaluate_split(
        &searched.model.backbone,
        Some(&searched.model.scores),
        data,
        "train",
        64,
    )?;
    let small = evaluate_split(&tuned.model, None, data, "train", 64)?;
    let held_out = evaluate_split(&tuned.model, None, data, "test", 64)?;
    let (c0, c1) = (measured_cost(&searched.model.backbone)?, measured_cost(&tuned.model)?);
    println!(
        "unpruned: train acc {:.3}, {} params, {} flops",
        full.accuracy, c0.total.params, c0.total.flops
    );
    println!(
        "pruned:   train acc {:.3} (test {:.3}), {} params, {} flops",
        small.accuracy, held_out.accuracy, c1.total.params, c1.total.flops
    );
    Ok(())
}
