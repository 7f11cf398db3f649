//! Writes a scored checkpoint after one search epoch, reads it back, and
//! confirms the bytes and the model are unchanged.

use dimprune::checkpoint::{Checkpoint, ScoredCheckpoint};
use dimprune::data::DataSpec;
use dimprune::pipeline::{run_search, StageConfig, StageKind};
use dimprune::{attach_scores, Backbone, BackboneConfig};

fn main() -> dimprune::Result<()> {
    let cfg = StageConfig {
        epochs: 1,
        data: DataSpec::synthetic(0, 16, 0.1),
        ..StageConfig::desk(StageKind::Search)
    };
    let start = ScoredCheckpoint {
        stage: "init".into(),
        model: attach_scores(Backbone::init(&BackboneConfig::desk(), 0)?)?,
        train: None,
        data: None,
    };
    let (trained, _) = run_search(&cfg, start, None)?;
    let ck = Checkpoint::Scored(trained);
    let path = std::env::temp_dir().join("dimprune_example.ckpt");
    ck.save(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| dimprune::Error::io(&path, e))?;
    println!(
        "{}: {} bytes, magic {:?}",
        path.display(),
        bytes.len(),
        String::from_utf8_lossy(&bytes[..8])
    );

    let back = Checkpoint::load(&path)?;
    println!(
        "stage {:?}, {} parameters",
        back.stage(),
        back.backbone().parameter_count()
    );
    println!("model equal: {}", back == ck);
    println!("bytes equal: {}", back.to_bytes()? == bytes);
    Ok(())
}
