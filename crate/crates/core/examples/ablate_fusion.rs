//! Early, late and lateral fusion trained on the same split.
//!
//! `cargo run --release --example ablate_fusion -- [epochs] [seed]`

use csi_reid::nn::ModelConfig;
use csi_reid::synth::{generate_dataset, SynthConfig};
use csi_reid::train::{calibrate_all, fusion_ablation, AdamConfig, TrainConfig};

fn main() -> csi_reid::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let raw = generate_dataset(&SynthConfig {
        seed,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        epochs,
        max_time: 160,
        train_fraction: 0.625,
        optimizer: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        model: ModelConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            d_embed: 32,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let segments = calibrate_all(&raw, cfg.calibration)?;
    println!("{:<8} {:>7} {:>7} {:>7} {:>7}", "fusion", "mAP", "mINP", "Rank-1", "Rank-5");
    for row in fusion_ablation(&cfg, &segments)? {
        let r = &row.report;
        println!(
            "{:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            format!("{:?}", row.fusion),
            r.map,
            r.minp,
            r.rank(1),
            r.rank(5)
        );
    }
    Ok(())
}
