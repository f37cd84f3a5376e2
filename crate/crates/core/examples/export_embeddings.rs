//! Trains briefly, saves a checkpoint, reloads it and exports embeddings as TSV.
//!
//! `cargo run --release --example export_embeddings -- [out_dir]`

use std::path::PathBuf;

use csi_reid::nn::ModelConfig;
use csi_reid::synth::{generate_dataset, SynthConfig};
use csi_reid::train::{calibrate_all, export_embeddings, train, Model, TrainConfig, CHECKPOINT_FILE};

fn main() -> csi_reid::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("csi_export_example"));
    let raw = generate_dataset(&SynthConfig {
        num_identities: 4,
        segments_per_identity: 8,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        epochs: 2,
        max_time: 160,
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            layers: 1,
            d_embed: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let segs = calibrate_all(&raw, cfg.calibration)?;
    train(&cfg, &segs, Some(&dir))?;
    let model = Model::load(&dir.join(CHECKPOINT_FILE))?;
    let tsv = export_embeddings(&model, &segs)?;
    let path = dir.join("embeddings.tsv");
    std::fs::write(&path, &tsv)?;
    for line in tsv.lines().take(3) {
        println!("{}", &line[..line.len().min(100)]);
    }
    println!("{} rows -> {}", tsv.lines().count(), path.display());
    Ok(())
}
