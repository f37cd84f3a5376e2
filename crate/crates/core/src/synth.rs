//! Synthetic multipath CSI.
//!
//! Each identity owns a handful of specular reflection paths whose gain,
//! delay and carrier phase are modulated at that identity's gait cadence.
//! A shared line-of-sight path models the static environment. Frames are
//!
//! ```text
//! H_a(k, t) = g_los e^{-j 2 pi f_k tau_los}
//!           + sum_p alpha_p(t) e^{-j (2 pi f_k tau_{p,a}(t) - theta_p(t))}
//! ```
//!
//! with `f_k = k * subcarrier_spacing`, followed by additive complex noise and
//! per-frame timing/phase offsets (`-(2 pi k / N) delta + beta + Z`).

use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::PhaseModelParams;
use crate::csi::{CsiSegment, SubcarrierLayout};
use crate::error::{Error, Result};

/// Ranges for per-frame phase corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseCorruption {
    pub delta_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PhaseCorruption {
    fn default() -> Self {
        Self {
            delta_range: (-2.0, 2.0),
            beta_range: (-PI, PI),
            noise_sigma: 0.02,
        }
    }
}

impl PhaseCorruption {
    pub fn none() -> Self {
        Self {
            delta_range: (0.0, 0.0),
            beta_range: (0.0, 0.0),
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub segments_per_identity: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub sample_rate_hz: f32,
    pub subcarrier_indices: Vec<i16>,
    pub fft_size: u16,
    pub subcarrier_spacing_hz: f64,
    pub antenna_count: u16,
    pub los_gain: f64,
    pub los_delay_ns: f64,
    pub paths_per_identity: usize,
    pub path_gain_range: (f64, f64),
    pub path_delay_range_ns: (f64, f64),
    pub min_delay_separation_ns: f64,
    pub gait_freq_range_hz: (f64, f64),
    /// Relative gain modulation depth at the gait cadence.
    pub gait_gain_depth: f64,
    pub gait_delay_swing_ns: f64,
    pub gait_phase_swing_rad: f64,
    pub segment_delay_jitter_ns: f64,
    pub segment_gain_jitter: f64,
    pub antenna_delay_spread_ns: f64,
    pub amplitude_noise_std: f64,
    pub corruption: PhaseCorruption,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            segments_per_identity: 40,
            min_frames: 60,
            max_frames: 160,
            sample_rate_hz: 100.0,
            subcarrier_indices: (-15..=-1).chain(1..=15).collect(),
            fft_size: 64,
            subcarrier_spacing_hz: 312_500.0,
            antenna_count: 2,
            los_gain: 1.0,
            los_delay_ns: 20.0,
            paths_per_identity: 3,
            path_gain_range: (0.08, 0.2),
            path_delay_range_ns: (30.0, 200.0),
            min_delay_separation_ns: 10.0,
            gait_freq_range_hz: (0.8, 2.0),
            gait_gain_depth: 0.3,
            gait_delay_swing_ns: 1.0,
            gait_phase_swing_rad: 0.5,
            segment_delay_jitter_ns: 2.0,
            segment_gain_jitter: 0.1,
            antenna_delay_spread_ns: 1.0,
            amplitude_noise_std: 0.02,
            corruption: PhaseCorruption::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn layout(&self) -> Result<SubcarrierLayout> {
        SubcarrierLayout::new(self.subcarrier_indices.clone(), self.fft_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.num_identities == 0 || self.segments_per_identity == 0 {
            return Err(Error::Config("need at least one identity and one segment".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config("need 1 <= min_frames <= max_frames".into()));
        }
        if self.antenna_count == 0 || !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("antenna_count and sample rate must be positive".into()));
        }
        let ranges = [
            self.path_gain_range,
            self.path_delay_range_ns,
            self.gait_freq_range_hz,
            self.corruption.delta_range,
            self.corruption.beta_range,
        ];
        if !ranges.into_iter().all(ordered) {
            return Err(Error::Config("every range must be finite with min <= max".into()));
        }
        if self.path_delay_range_ns.0 <= 0.0 || self.path_gain_range.0 <= 0.0 {
            return Err(Error::Config("path delays and gains must be positive".into()));
        }
        let span = self.path_delay_range_ns.1 - self.path_delay_range_ns.0;
        if self.paths_per_identity > 1
            && span < self.min_delay_separation_ns * (self.paths_per_identity - 1) as f64
        {
            return Err(Error::Config("delay range too narrow for the requested separation".into()));
        }
        if self.gait_freq_range_hz.0 < 0.5 || self.gait_freq_range_hz.1 > 2.5 {
            return Err(Error::Config("gait frequency must stay within [0.5, 2.5] Hz".into()));
        }
        if !(self.corruption.noise_sigma >= 0.0) || !(self.amplitude_noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProfile {
    pub gain: f64,
    pub delay_s: f64,
    pub phase_rad: f64,
    /// Phase of the gait modulation for this path.
    pub gait_offset_rad: f64,
    /// Per-antenna delay offsets.
    pub antenna_delay_offsets_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityProfile {
    pub person_id: String,
    pub identity_seed: u64,
    pub gait_freq_hz: f64,
    pub paths: Vec<PathProfile>,
}

/// Distinct, well-mixed seeds for (master, stream, index).
fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

pub fn identity_profile(cfg: &SynthConfig, index: usize) -> IdentityProfile {
    let identity_seed = derive_seed(cfg.seed, 1, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
    let gait_freq_hz = sample_range(&mut rng, cfg.gait_freq_range_hz);
    let mut delays_ns: Vec<f64> = Vec::with_capacity(cfg.paths_per_identity);
    while delays_ns.len() < cfg.paths_per_identity {
        let d = sample_range(&mut rng, cfg.path_delay_range_ns);
        if delays_ns.iter().all(|&x| (x - d).abs() >= cfg.min_delay_separation_ns) {
            delays_ns.push(d);
        }
    }
    delays_ns.sort_by(f64::total_cmp);
    let paths = delays_ns
        .into_iter()
        .map(|d| PathProfile {
            gain: sample_range(&mut rng, cfg.path_gain_range),
            delay_s: d * 1e-9,
            phase_rad: rng.gen_range(0.0..2.0 * PI),
            gait_offset_rad: rng.gen_range(0.0..2.0 * PI),
            antenna_delay_offsets_s: (0..cfg.antenna_count)
                .map(|_| rng.gen_range(-1.0..=1.0) * cfg.antenna_delay_spread_ns * 1e-9)
                .collect(),
        })
        .collect();
    IdentityProfile {
        person_id: format!("P{index:03}"),
        identity_seed,
        gait_freq_hz,
        paths,
    }
}

/// Clean channel of one segment, before noise and phase corruption.
fn render_segment(
    cfg: &SynthConfig,
    layout: &SubcarrierLayout,
    profile: &IdentityProfile,
    segment_index: usize,
) -> Result<CsiSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.identity_seed, 2, segment_index as u64));
    let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
    let gait_phase = rng.gen_range(0.0..2.0 * PI);
    let jitter: Vec<(f64, f64)> = profile
        .paths
        .iter()
        .map(|_| {
            (
                rng.gen_range(-1.0..=1.0) * cfg.segment_delay_jitter_ns * 1e-9,
                1.0 + rng.gen_range(-1.0..=1.0) * cfg.segment_gain_jitter,
            )
        })
        .collect();
    let freqs: Vec<f64> = layout
        .indices()
        .iter()
        .map(|&k| k as f64 * cfg.subcarrier_spacing_hz)
        .collect();
    let n = layout.count();
    let antennas = cfg.antenna_count as usize;
    let noise = (cfg.amplitude_noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.amplitude_noise_std / std::f64::consts::SQRT_2).unwrap());
    let mut data = Vec::with_capacity(frames * antennas * n);
    for t in 0..frames {
        let time = t as f64 / cfg.sample_rate_hz as f64;
        let cadence = 2.0 * PI * profile.gait_freq_hz * time + gait_phase;
        for a in 0..antennas {
            for &f in &freqs {
                let mut h = Complex64::from_polar(cfg.los_gain, -2.0 * PI * f * cfg.los_delay_ns * 1e-9);
                for (p, &(dj, gj)) in profile.paths.iter().zip(&jitter) {
                    let swing = (cadence + p.gait_offset_rad).sin();
                    let gain = p.gain * gj * (1.0 + cfg.gait_gain_depth * swing);
                    let delay = p.delay_s + dj + p.antenna_delay_offsets_s[a] + cfg.gait_delay_swing_ns * 1e-9 * swing;
                    let theta = p.phase_rad + cfg.gait_phase_swing_rad * swing;
                    h += Complex64::from_polar(gain, theta - 2.0 * PI * f * delay);
                }
                if let Some(dist) = &noise {
                    h += Complex64::new(dist.sample(&mut rng), dist.sample(&mut rng));
                }
                data.push(Complex32::new(h.re as f32, h.im as f32));
            }
        }
    }
    CsiSegment::new(
        format!("{}_S{segment_index:03}", profile.person_id),
        profile.person_id.clone(),
        cfg.sample_rate_hz,
        layout.clone(),
        cfg.antenna_count,
        frames,
        data,
    )
}

/// Clean segments (no phase corruption) in identity-major order.
pub fn generate_clean(cfg: &SynthConfig) -> Result<Vec<CsiSegment>> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let mut out = Vec::with_capacity(cfg.num_identities * cfg.segments_per_identity);
    for i in 0..cfg.num_identities {
        let profile = identity_profile(cfg, i);
        for s in 0..cfg.segments_per_identity {
            out.push(render_segment(cfg, &layout, &profile, s)?);
        }
    }
    Ok(out)
}

/// Full generator: clean multipath channel followed by per-frame offsets.
/// Deterministic under `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<CsiSegment>> {
    let clean = generate_clean(cfg)?;
    clean
        .iter()
        .enumerate()
        .map(|(i, seg)| corrupt_phase_random(seg, &cfg.corruption, derive_seed(cfg.seed, 3, i as u64)))
        .collect()
}

fn apply_offsets(
    seg: &mut CsiSegment,
    mut offsets_for_frame: impl FnMut(usize) -> (f64, f64),
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) {
    let k = seg.layout.indices_f64();
    let n = k.len();
    let fft = seg.layout.fft_size() as f64;
    let d = seg.channels();
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).unwrap());
    let frames = seg.time_frames();
    let data = seg.frames_mut();
    for t in 0..frames {
        let (delta, beta) = offsets_for_frame(t);
        for (c, v) in data[t * d..(t + 1) * d].iter_mut().enumerate() {
            let ki = k[c % n];
            let z = noise.as_ref().map_or(0.0, |dist| dist.sample(rng));
            let shift = -(2.0 * PI * ki / fft) * delta + beta + z;
            let rotated = Complex64::new(v.re as f64, v.im as f64) * Complex64::from_polar(1.0, shift);
            *v = Complex32::new(rotated.re as f32, rotated.im as f32);
        }
    }
}

/// Adds `-(2 pi k_i / N) delta + beta + Z_i` to every subcarrier phase of
/// every frame, `Z_i ~ Normal(0, noise_sigma^2)`. Amplitudes are untouched.
pub fn corrupt_phase(seg: &CsiSegment, params: &PhaseModelParams, seed: u64) -> CsiSegment {
    let mut out = seg.clone();
    if params.delta == 0.0 && params.beta == 0.0 && params.noise_sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_offsets(&mut out, |_| (params.delta, params.beta), params.noise_sigma, &mut rng);
    out
}

/// Like [`corrupt_phase`] with `delta` and `beta` drawn independently for
/// every frame.
pub fn corrupt_phase_random(seg: &CsiSegment, corruption: &PhaseCorruption, seed: u64) -> Result<CsiSegment> {
    let mut out = seg.clone();
    let mut offset_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, 0));
    let offsets: Vec<(f64, f64)> = (0..seg.time_frames())
        .map(|_| {
            (
                sample_range(&mut offset_rng, corruption.delta_range),
                sample_range(&mut offset_rng, corruption.beta_range),
            )
        })
        .collect();
    apply_offsets(&mut out, |t| offsets[t], corruption.noise_sigma, &mut noise_rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate_segment;

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 3,
            segments_per_identity: 2,
            min_frames: 10,
            max_frames: 20,
            ..Default::default()
        }
    }

    #[test]
    fn single_static_path_is_linear_phase() {
        let cfg = SynthConfig {
            los_gain: 0.0,
            paths_per_identity: 1,
            gait_gain_depth: 0.0,
            gait_delay_swing_ns: 0.0,
            gait_phase_swing_rad: 0.0,
            amplitude_noise_std: 0.0,
            corruption: PhaseCorruption::none(),
            ..small()
        };
        for seg in generate_dataset(&cfg).unwrap() {
            for t in 1..seg.time_frames() {
                assert_eq!(seg.frame(t), seg.frame(0));
            }
            let cal = calibrate_segment(&seg).unwrap();
            assert!(cal.phase.iter().all(|p| p.abs() < 1e-5), "{:?}", &cal.phase[..4]);
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = small();
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].person_id, "P000");
        assert_eq!(a[5].person_id, "P002");
        assert!(a.iter().all(|s| (10..=20).contains(&s.time_frames())));
        assert!(a.iter().all(|s| s.channels() == 60));
    }

    #[test]
    fn profiles_respect_invariants() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let p = identity_profile(&cfg, i);
            assert!((0.5..=2.5).contains(&p.gait_freq_hz));
            let mut d: Vec<f64> = p.paths.iter().map(|x| x.delay_s).collect();
            assert!(d.iter().all(|&x| x > 0.0));
            d.dedup();
            assert_eq!(d.len(), cfg.paths_per_identity);
        }
    }

    #[test]
    fn zero_corruption_is_identity() {
        let seg = &generate_clean(&small()).unwrap()[0];
        assert_eq!(&corrupt_phase(seg, &PhaseModelParams::default(), 1), seg);
    }

    #[test]
    fn beta_shifts_every_phase() {
        let seg = &generate_clean(&small()).unwrap()[0];
        let out = corrupt_phase(seg, &PhaseModelParams::new(0.0, 1.0, 0.0).unwrap(), 1);
        for (a, b) in seg.frames().iter().zip(out.frames()) {
            let diff = (b.arg() - a.arg()) as f64;
            let wrapped = (diff - 1.0 + PI).rem_euclid(2.0 * PI) - PI;
            assert!(wrapped.abs() < 1e-5);
            assert!((a.norm() - b.norm()).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            min_frames: 30,
            max_frames: 20,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }
}
