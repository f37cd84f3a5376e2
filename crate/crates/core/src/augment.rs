//! Training-time perturbations of calibrated segments: piecewise-linear time
//! warping, additive Gaussian noise and zeroing of random time spans.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedSegment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApplyProbabilities {
    pub warp: f64,
    pub noise: f64,
    pub erase: f64,
}

impl Default for ApplyProbabilities {
    fn default() -> Self {
        Self {
            warp: 0.5,
            noise: 0.5,
            erase: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub warp_knots: usize,
    pub warp_strength: f64,
    pub noise_sigma_rel: f64,
    pub erase_max_fraction: f64,
    pub erase_max_spans: usize,
    pub apply_probabilities: ApplyProbabilities,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            warp_knots: 4,
            warp_strength: 0.2,
            noise_sigma_rel: 0.05,
            erase_max_fraction: 0.15,
            erase_max_spans: 2,
            apply_probabilities: ApplyProbabilities::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Same magnitudes, every transform switched off.
    pub fn disabled() -> Self {
        Self {
            apply_probabilities: ApplyProbabilities {
                warp: 0.0,
                noise: 0.0,
                erase: 0.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.apply_probabilities;
        let prob_ok = |v: f64| (0.0..=1.0).contains(&v);
        if self.warp_knots < 2 {
            return Err(Error::Config("warp_knots must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.warp_strength) {
            return Err(Error::Config("warp_strength must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma_rel >= 0.0) || !self.noise_sigma_rel.is_finite() {
            return Err(Error::Config("noise_sigma_rel must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.erase_max_fraction) {
            return Err(Error::Config("erase_max_fraction must lie in [0, 1)".into()));
        }
        if !(prob_ok(p.warp) && prob_ok(p.noise) && prob_ok(p.erase)) {
            return Err(Error::Config("apply probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        let p = &self.apply_probabilities;
        p.warp == 0.0 && p.noise == 0.0 && p.erase == 0.0
    }
}

/// Warped sample positions for `time_frames` outputs given the targets of
/// evenly spaced knots over `[0, T-1]`.
pub fn warp_positions(time_frames: usize, knot_targets: &[f64]) -> Vec<f64> {
    let last = (time_frames - 1) as f64;
    let segments = (knot_targets.len() - 1) as f64;
    let spacing = last / segments;
    (0..time_frames)
        .map(|t| {
            let x = t as f64;
            let j = ((x / spacing).floor() as usize).min(knot_targets.len() - 2);
            let x0 = j as f64 * spacing;
            let frac = (x - x0) / spacing;
            knot_targets[j] + frac * (knot_targets[j + 1] - knot_targets[j])
        })
        .collect()
}

/// Random knot targets: endpoints fixed, interior knots moved by at most
/// `strength / 2` of the knot spacing, which keeps the map strictly increasing.
pub fn random_knot_targets<R: Rng + ?Sized>(
    time_frames: usize,
    knots: usize,
    strength: f64,
    rng: &mut R,
) -> Vec<f64> {
    let last = (time_frames - 1) as f64;
    let spacing = last / (knots - 1) as f64;
    (0..knots)
        .map(|j| {
            let x = j as f64 * spacing;
            if j == 0 || j == knots - 1 {
                x
            } else {
                x + rng.gen_range(-1.0..=1.0) * strength * spacing / 2.0
            }
        })
        .collect()
}

/// Linear interpolation of both planes at the given fractional time positions.
pub fn resample(seg: &CalibratedSegment, positions: &[f64]) -> CalibratedSegment {
    let d = seg.channels();
    let last = seg.time_frames() - 1;
    let mut amp = Vec::with_capacity(positions.len() * d);
    let mut phase = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        let p = p.clamp(0.0, last as f64);
        let lo = (p.floor() as usize).min(last);
        let hi = (lo + 1).min(last);
        let w = p - lo as f64;
        for (plane, out) in [(&seg.amplitude, &mut amp), (&seg.phase, &mut phase)] {
            let a = &plane[lo * d..(lo + 1) * d];
            let b = &plane[hi * d..(hi + 1) * d];
            if w == 0.0 {
                out.extend_from_slice(a);
            } else {
                out.extend(a.iter().zip(b).map(|(x, y)| x + w * (y - x)));
            }
        }
    }
    CalibratedSegment::new(
        seg.source_id.clone(),
        seg.person_id.clone(),
        positions.len(),
        d,
        amp,
        phase,
    )
    .expect("resampling preserves geometry")
}

pub fn time_warp<R: Rng + ?Sized>(
    seg: &CalibratedSegment,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CalibratedSegment {
    let t = seg.time_frames();
    if t < 2 {
        log::warn!("segment {} has {t} frame(s); time warp skipped", seg.source_id);
        return seg.clone();
    }
    if cfg.warp_strength == 0.0 {
        return seg.clone();
    }
    let targets = random_knot_targets(t, cfg.warp_knots, cfg.warp_strength, rng);
    resample(seg, &warp_positions(t, &targets))
}

fn plane_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds zero-mean Gaussian noise to each plane, scaled by that plane's std.
pub fn inject_noise<R: Rng + ?Sized>(
    seg: &CalibratedSegment,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CalibratedSegment {
    let mut out = seg.clone();
    if cfg.noise_sigma_rel == 0.0 {
        return out;
    }
    for plane in [&mut out.amplitude, &mut out.phase] {
        let sigma = cfg.noise_sigma_rel * plane_std(plane);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            plane.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    out
}

/// Draws the erased time spans. Total length never exceeds
/// `floor(erase_max_fraction * T)`.
pub fn erase_spans<R: Rng + ?Sized>(
    time_frames: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let budget = (cfg.erase_max_fraction * time_frames as f64).floor() as usize;
    if cfg.erase_max_spans == 0 || budget == 0 {
        return Vec::new();
    }
    let n_spans = rng.gen_range(1..=cfg.erase_max_spans);
    let mut remaining = budget;
    let mut spans = Vec::with_capacity(n_spans);
    for i in 0..n_spans {
        let len = rng.gen_range(0..=remaining / (n_spans - i));
        remaining -= len;
        let start = rng.gen_range(0..=time_frames - len);
        spans.push(start..start + len);
    }
    spans
}

pub fn random_erase<R: Rng + ?Sized>(
    seg: &CalibratedSegment,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CalibratedSegment {
    let mut out = seg.clone();
    let d = seg.channels();
    for span in erase_spans(seg.time_frames(), cfg, rng) {
        let rows = span.start * d..span.end * d;
        out.amplitude[rows.clone()].iter_mut().for_each(|v| *v = 0.0);
        out.phase[rows].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Applies each transform with its configured probability, in the order
/// warp, noise, erase.
pub fn augment<R: Rng + ?Sized>(
    seg: &CalibratedSegment,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CalibratedSegment {
    let p = cfg.apply_probabilities;
    let mut out = seg.clone();
    if rng.gen_bool(p.warp) {
        out = time_warp(&out, cfg, rng);
    }
    if rng.gen_bool(p.noise) {
        out = inject_noise(&out, cfg, rng);
    }
    if rng.gen_bool(p.erase) {
        out = random_erase(&out, cfg, rng);
    }
    out
}
