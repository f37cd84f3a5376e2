//! Properties of the synthetic multipath generator.

use csi_reid::calibration::{calibrate_segment, CalibratedSegment, PhaseModelParams};
use csi_reid::synth::{corrupt_phase, generate_clean, generate_dataset, identity_profile, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_phase(seg: &CalibratedSegment) -> Vec<f64> {
    let d = seg.channels();
    let t = seg.time_frames();
    let mut m = vec![0.0; d];
    for f in 0..t {
        for (acc, v) in m.iter_mut().zip(seg.phase_row(f)) {
            *acc += v / t as f64;
        }
    }
    m
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Centroids from even-numbered segments, accuracy on odd-numbered ones.
fn nearest_centroid_accuracy(segs: &[CalibratedSegment], identities: usize, per_identity: usize) -> f64 {
    let vecs: Vec<Vec<f64>> = segs.iter().map(mean_phase).collect();
    let d = vecs[0].len();
    let centroids: Vec<Vec<f64>> = (0..identities)
        .map(|i| {
            let mut c = vec![0.0; d];
            let members: Vec<_> = (0..per_identity).step_by(2).map(|s| &vecs[i * per_identity + s]).collect();
            for v in &members {
                for (acc, x) in c.iter_mut().zip(v.iter()) {
                    *acc += x / members.len() as f64;
                }
            }
            c
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for i in 0..identities {
        for s in (1..per_identity).step_by(2) {
            let v = &vecs[i * per_identity + s];
            let guess = (0..identities)
                .min_by(|&a, &b| dist(v, &centroids[a]).total_cmp(&dist(v, &centroids[b])))
                .unwrap();
            correct += usize::from(guess == i);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn default_profiles_are_separable() {
    for (identities, seed) in [(4, 1u64), (8, 2), (8, 3)] {
        let cfg = SynthConfig {
            num_identities: identities,
            segments_per_identity: 20,
            seed,
            ..Default::default()
        };
        let segs: Vec<_> = generate_dataset(&cfg)
            .unwrap()
            .iter()
            .map(|s| calibrate_segment(s).unwrap())
            .collect();
        let acc = nearest_centroid_accuracy(&segs, identities, 20);
        assert!(acc >= 0.9, "{identities} identities, seed {seed}: accuracy {acc}");
    }
}

#[test]
fn fifty_ns_delay_gap_separates_identities() {
    let person = |delay: f64| SynthConfig {
        num_identities: 1,
        segments_per_identity: 12,
        paths_per_identity: 1,
        path_delay_range_ns: (delay, delay),
        seed: 5,
        ..Default::default()
    };
    let calibrated = |cfg: &SynthConfig| -> Vec<Vec<f64>> {
        generate_dataset(cfg)
            .unwrap()
            .iter()
            .flat_map(|s| {
                let c = calibrate_segment(s).unwrap();
                (0..c.time_frames()).step_by(7).map(move |t| c.phase_row(t).to_vec()).collect::<Vec<_>>()
            })
            .collect()
    };
    let a = calibrated(&person(60.0));
    let b = calibrated(&person(110.0));
    let mean_dist = |x: &[Vec<f64>], y: &[Vec<f64>], same: bool| {
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, u) in x.iter().enumerate() {
            for (j, v) in y.iter().enumerate() {
                if same && i == j {
                    continue;
                }
                total += dist(u, v);
                n += 1;
            }
        }
        total / n as f64
    };
    let intra = (mean_dist(&a, &a, true) + mean_dist(&b, &b, true)) / 2.0;
    let inter = mean_dist(&a, &b, false);
    assert!(inter > intra, "inter {inter} vs intra {intra}");
}

#[test]
fn closure_under_random_offsets() {
    let cfg = SynthConfig {
        num_identities: 3,
        segments_per_identity: 4,
        seed: 6,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, seg) in generate_clean(&cfg).unwrap().iter().enumerate() {
        let params = PhaseModelParams::new(rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0), 0.0).unwrap();
        let corrupted = corrupt_phase(seg, &params, i as u64);
        let a = calibrate_segment(seg).unwrap();
        let b = calibrate_segment(&corrupted).unwrap();
        let worst = a.phase.iter().zip(&b.phase).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "segment {i}: {worst}");
        assert_eq!(a.amplitude.len(), b.amplitude.len());
        for (x, y) in a.amplitude.iter().zip(&b.amplitude) {
            assert!((x - y).abs() <= 1e-5 * x.max(1.0));
        }
    }
}

#[test]
fn segment_lengths_cover_the_configured_range() {
    let cfg = SynthConfig {
        num_identities: 2,
        segments_per_identity: 60,
        min_frames: 10,
        max_frames: 14,
        seed: 8,
        ..Default::default()
    };
    let segs = generate_dataset(&cfg).unwrap();
    let mut seen = [false; 5];
    for s in &segs {
        assert!((10..=14).contains(&s.time_frames()));
        seen[s.time_frames() - 10] = true;
    }
    assert!(seen.iter().all(|&x| x));
    let ids: Vec<_> = segs.iter().map(|s| s.person_id.as_str()).collect();
    assert_eq!(ids.first(), Some(&"P000"));
    assert_eq!(ids.last(), Some(&"P001"));
}

#[test]
fn profiles_depend_only_on_seed_and_index() {
    let cfg = SynthConfig::default();
    let more = SynthConfig {
        num_identities: 20,
        ..cfg.clone()
    };
    assert_eq!(identity_profile(&cfg, 3), identity_profile(&more, 3));
    let other = SynthConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    };
    assert_ne!(identity_profile(&cfg, 3), identity_profile(&other, 3));
}
