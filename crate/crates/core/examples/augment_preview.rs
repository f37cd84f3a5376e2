//! Applies each augmentation to one calibrated segment and reports what changed.
//!
//! `cargo run --release --example augment_preview -- [seed]`

use csi_reid::augment::{augment, inject_noise, random_erase, time_warp, AugmentConfig};
use csi_reid::calibration::{calibrate_segment, CalibratedSegment};
use csi_reid::synth::{generate_dataset, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn summary(name: &str, base: &CalibratedSegment, out: &CalibratedSegment) {
    let changed = base.amplitude.iter().zip(&out.amplitude).filter(|(a, b)| a != b).count();
    let zero_frames = (0..out.time_frames())
        .filter(|&t| out.amp_row(t).iter().all(|&v| v == 0.0))
        .count();
    println!(
        "{name:<8} frames {:>3}  changed amplitude entries {changed:>5}/{}  zeroed frames {zero_frames}",
        out.time_frames(),
        out.amplitude.len()
    );
}

fn main() -> csi_reid::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let raw = generate_dataset(&SynthConfig {
        num_identities: 1,
        segments_per_identity: 1,
        ..Default::default()
    })?;
    let seg = calibrate_segment(&raw[0])?;
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    summary("warp", &seg, &time_warp(&seg, &cfg, &mut rng));
    summary("noise", &seg, &inject_noise(&seg, &cfg, &mut rng));
    summary("erase", &seg, &random_erase(&seg, &cfg, &mut rng));
    summary("pipeline", &seg, &augment(&seg, &cfg, &mut rng));
    Ok(())
}
