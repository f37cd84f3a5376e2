//! Generates a synthetic dataset, writes it to disk and reads it back.
//!
//! `cargo run --release --example synth_dataset -- [out.csi] [seed]`

use std::path::PathBuf;

use csi_reid::csi::{read_dataset, write_dataset};
use csi_reid::synth::{generate_dataset, identity_profile, SynthConfig};

fn main() -> csi_reid::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("synth_example.csi"));
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let cfg = SynthConfig {
        seed,
        ..Default::default()
    };
    for i in 0..cfg.num_identities {
        let p = identity_profile(&cfg, i);
        let delays: Vec<String> = p.paths.iter().map(|q| format!("{:.0}ns", q.delay_s * 1e9)).collect();
        println!("{}  gait {:.2} Hz  paths {}", p.person_id, p.gait_freq_hz, delays.join(" "));
    }
    let segs = generate_dataset(&cfg)?;
    write_dataset(&segs, &path)?;
    let (back, manifest) = read_dataset(&path)?;
    assert_eq!(back, segs);
    let frames: usize = segs.iter().map(|s| s.time_frames()).sum();
    println!(
        "{} segments, {} frames, {} channels per frame -> {} ({} manifest entries)",
        segs.len(),
        frames,
        segs[0].channels(),
        path.display(),
        manifest.entries.len()
    );
    Ok(())
}
