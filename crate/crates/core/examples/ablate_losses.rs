//! Loss and augmentation ablation on one synthetic dataset.
//!
//! `cargo run --release --example ablate_losses -- [epochs] [seed]`

use csi_reid::nn::ModelConfig;
use csi_reid::synth::{generate_dataset, SynthConfig};
use csi_reid::train::{ablation_config, calibrate_all, row_label, run_experiment, AdamConfig, TrainConfig, LOSS_ABLATION_ROWS};

fn main() -> csi_reid::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let raw = generate_dataset(&SynthConfig {
        seed,
        ..Default::default()
    })?;
    let base = TrainConfig {
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
    let segments = calibrate_all(&raw, base.calibration)?;
    println!("{:<14} {:>7} {:>7} {:>7} {:>10}", "config", "mAP", "mINP", "Rank-1", "final loss");
    for (aug, metric, cls) in LOSS_ABLATION_ROWS {
        let cfg = ablation_config(&base, aug, metric, cls);
        let exp = run_experiment(&cfg, &segments, None)?;
        let r = &exp.report;
        let label = row_label(aug, metric, cls);
        let last = exp.outcome.log.last().map_or(f64::NAN, |l| l.loss);
        println!("{label:<14} {:>7.4} {:>7.4} {:>7.4} {last:>10.4}", r.map, r.minp, r.rank(1));
    }
    Ok(())
}
