//! Removes per-frame timing and phase offsets from corrupted CSI.
//!
//! `cargo run --release --example calibrate_phase`

use csi_reid::calibration::{calibrate_segment, PhaseModelParams};
use csi_reid::synth::{corrupt_phase, generate_clean, SynthConfig};

fn main() -> csi_reid::Result<()> {
    let cfg = SynthConfig {
        num_identities: 1,
        segments_per_identity: 1,
        min_frames: 50,
        max_frames: 50,
        ..Default::default()
    };
    let clean = generate_clean(&cfg)?.remove(0);
    let reference = calibrate_segment(&clean)?;
    println!("{:>8} {:>8} {:>14} {:>14}", "delta", "beta", "raw phase err", "calibrated err");
    for (delta, beta) in [(0.5, 0.0), (-2.0, 1.0), (4.0, -3.0)] {
        let corrupted = corrupt_phase(&clean, &PhaseModelParams::new(delta, beta, 0.0)?, 1);
        let raw_err = clean
            .frames()
            .iter()
            .zip(corrupted.frames())
            .map(|(a, b)| ((b / a).arg() as f64).abs())
            .fold(0.0, f64::max);
        let cal = calibrate_segment(&corrupted)?;
        let cal_err = reference
            .phase
            .iter()
            .zip(&cal.phase)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("{delta:>8.2} {beta:>8.2} {raw_err:>14.4} {cal_err:>14.2e}");
    }
    Ok(())
}
