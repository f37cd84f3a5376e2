//! Amplitude extraction and phase sanitisation.
//!
//! The measured phase of subcarrier `k_i` carries a timing-offset term linear
//! in `k_i`, a constant offset and noise. After unwrapping along the
//! subcarrier axis, subtracting `a * k_i + b` with
//! `a = (p_n - p_1) / (k_n - k_1)` and `b = mean(p)` removes both offsets when
//! the indices sum to zero.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csi::{
    read_raw, write_raw, CsiSegment, FileGeometry, RawRecord, SubcarrierLayout,
    VERSION_CALIBRATED,
};
use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Offsets of the phase error model: timing offset `delta`, constant offset
/// `beta` and the standard deviation of additive phase noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseModelParams {
    pub delta: f64,
    pub beta: f64,
    pub noise_sigma: f64,
}

impl PhaseModelParams {
    pub fn new(delta: f64, beta: f64, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) || !delta.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!(
                "invalid phase model parameters (delta={delta}, beta={beta}, sigma={noise_sigma})"
            )));
        }
        Ok(Self {
            delta,
            beta,
            noise_sigma,
        })
    }
}

/// Amplitude and calibrated phase planes, both row-major (time, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedSegment {
    pub source_id: String,
    pub person_id: String,
    time_frames: usize,
    channels: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl CalibratedSegment {
    pub fn new(
        source_id: impl Into<String>,
        person_id: impl Into<String>,
        time_frames: usize,
        channels: usize,
        amplitude: Vec<f64>,
        phase: Vec<f64>,
    ) -> Result<Self> {
        let n = time_frames * channels;
        if time_frames == 0 || channels == 0 {
            return Err(Error::Geometry("calibrated segment must be non-empty".into()));
        }
        if amplitude.len() != n || phase.len() != n {
            return Err(Error::Geometry(format!(
                "expected {n} values per plane, got {} amplitude / {} phase",
                amplitude.len(),
                phase.len()
            )));
        }
        if amplitude.iter().chain(&phase).any(|v| !v.is_finite()) {
            return Err(Error::Data("calibrated planes contain non-finite values".into()));
        }
        Ok(Self {
            source_id: source_id.into(),
            person_id: person_id.into(),
            time_frames,
            channels,
            amplitude,
            phase,
        })
    }

    pub fn time_frames(&self) -> usize {
        self.time_frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn amp_at(&self, t: usize, d: usize) -> f64 {
        self.amplitude[t * self.channels + d]
    }

    pub fn phase_at(&self, t: usize, d: usize) -> f64 {
        self.phase[t * self.channels + d]
    }

    pub fn amp_row(&self, t: usize) -> &[f64] {
        &self.amplitude[t * self.channels..(t + 1) * self.channels]
    }

    pub fn phase_row(&self, t: usize) -> &[f64] {
        &self.phase[t * self.channels..(t + 1) * self.channels]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Subtract the mean subcarrier index before fitting, so asymmetric
    /// layouts are accepted.
    pub center_indices: bool,
}

/// Wraps a phase difference into `(-pi, pi]`.
fn wrap_difference(d: f64) -> f64 {
    d - TWO_PI * ((d - PI) / TWO_PI).ceil()
}

/// Removes 2*pi jumps between consecutive samples.
pub fn unwrap_phase(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Data("cannot unwrap an empty phase vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("phase vector contains non-finite values".into()));
    }
    let mut out = Vec::with_capacity(raw.len());
    out.push(raw[0]);
    for w in raw.windows(2) {
        let prev = *out.last().unwrap();
        out.push(prev + wrap_difference(w[1] - w[0]));
    }
    Ok(out)
}

fn fit_with_indices(unwrapped: &[f64], k: &[f64]) -> Result<(f64, f64)> {
    if unwrapped.len() != k.len() || k.len() < 2 {
        return Err(Error::Geometry(format!(
            "phase vector has {} entries but layout has {} subcarriers",
            unwrapped.len(),
            k.len()
        )));
    }
    let span = k[k.len() - 1] - k[0];
    if span == 0.0 {
        return Err(Error::Geometry("first and last subcarrier index coincide".into()));
    }
    let slope = (unwrapped[unwrapped.len() - 1] - unwrapped[0]) / span;
    let intercept = unwrapped.iter().sum::<f64>() / unwrapped.len() as f64;
    Ok((slope, intercept))
}

/// Slope across the full band and mean of the unwrapped phase.
pub fn linear_fit(unwrapped: &[f64], layout: &SubcarrierLayout) -> Result<(f64, f64)> {
    fit_with_indices(unwrapped, &layout.indices_f64())
}

fn calibrate_with_indices(unwrapped: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = fit_with_indices(unwrapped, k)?;
    Ok(unwrapped
        .iter()
        .zip(k)
        .map(|(&p, &ki)| p - a * ki - b)
        .collect())
}

/// `p_i - a * k_i - b`. Requires indices summing to zero.
pub fn calibrate_phase(unwrapped: &[f64], layout: &SubcarrierLayout) -> Result<Vec<f64>> {
    if !layout.symmetric_sum() {
        return Err(Error::Symmetry {
            sum: layout.index_sum(),
        });
    }
    calibrate_with_indices(unwrapped, &layout.indices_f64())
}

/// Noise variance inflation of the calibrated phase at subcarrier position `i`:
/// `1 + 2 k_i^2 / (k_n - k_1)^2 + 1/n`.
pub fn variance_factor(layout: &SubcarrierLayout, i: usize) -> Result<f64> {
    let k = layout.indices();
    if i >= k.len() {
        return Err(Error::Geometry(format!(
            "subcarrier position {i} out of range for {} subcarriers",
            k.len()
        )));
    }
    let span = (k[k.len() - 1] as f64) - (k[0] as f64);
    let ki = k[i] as f64;
    Ok(1.0 + 2.0 * ki * ki / (span * span) + 1.0 / k.len() as f64)
}

/// Effective indices used for fitting under the given options.
pub fn fitting_indices(layout: &SubcarrierLayout, opts: CalibrationOptions) -> Result<Vec<f64>> {
    let mut k = layout.indices_f64();
    if opts.center_indices {
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        k.iter_mut().for_each(|v| *v -= mean);
    } else if !layout.symmetric_sum() {
        return Err(Error::Symmetry {
            sum: layout.index_sum(),
        });
    }
    Ok(k)
}

pub fn calibrate_segment(seg: &CsiSegment) -> Result<CalibratedSegment> {
    calibrate_segment_with(seg, CalibrationOptions::default())
}

/// Per frame and per antenna: unwrap across that antenna's subcarriers, then
/// remove the linear offset.
pub fn calibrate_segment_with(
    seg: &CsiSegment,
    opts: CalibrationOptions,
) -> Result<CalibratedSegment> {
    let k = fitting_indices(&seg.layout, opts)?;
    let n = seg.layout.count();
    let d = seg.channels();
    let t_len = seg.time_frames();
    let mut amplitude = Vec::with_capacity(t_len * d);
    let mut phase = Vec::with_capacity(t_len * d);
    let mut raw = vec![0.0; n];
    for t in 0..t_len {
        let frame = seg.frame(t);
        amplitude.extend(frame.iter().map(|c| (c.re as f64).hypot(c.im as f64)));
        for antenna in frame.chunks_exact(n) {
            for (r, c) in raw.iter_mut().zip(antenna) {
                *r = (c.im as f64).atan2(c.re as f64);
            }
            let unwrapped = unwrap_phase(&raw)?;
            phase.extend(calibrate_with_indices(&unwrapped, &k)?);
        }
    }
    CalibratedSegment::new(
        seg.segment_id.clone(),
        seg.person_id.clone(),
        t_len,
        d,
        amplitude,
        phase,
    )
}

/// Writes calibrated segments as a version-2 dataset: the payload pairs are
/// (amplitude, phase) instead of (re, im).
pub fn write_calibrated_dataset(
    segments: &[CalibratedSegment],
    layout: &SubcarrierLayout,
    antenna_count: u16,
    sample_rate_hz: f32,
    path: &Path,
) -> Result<()> {
    let channels = antenna_count as usize * layout.count();
    let records = segments
        .iter()
        .map(|s| {
            if s.channels != channels {
                return Err(Error::Geometry(format!(
                    "segment {} has {} channels, expected {channels}",
                    s.source_id, s.channels
                )));
            }
            Ok(RawRecord {
                segment_id: s.source_id.clone(),
                person_id: s.person_id.clone(),
                time_frames: s.time_frames,
                payload: s
                    .amplitude
                    .iter()
                    .zip(&s.phase)
                    .flat_map(|(&a, &p)| [a as f32, p as f32])
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let geometry = FileGeometry {
        version: VERSION_CALIBRATED,
        antenna_count,
        sample_rate_hz,
        layout: Some(layout.clone()),
    };
    write_raw(path, &geometry, &records)?;
    Ok(())
}

pub fn read_calibrated_dataset(path: &Path) -> Result<(Vec<CalibratedSegment>, FileGeometry)> {
    let raw = read_raw(path)?;
    if raw.geometry.version != VERSION_CALIBRATED {
        return Err(Error::Format(format!(
            "{} does not hold calibrated data (version {})",
            path.display(),
            raw.geometry.version
        )));
    }
    let channels = raw
        .geometry
        .layout
        .as_ref()
        .map_or(0, |l| l.count() * raw.geometry.antenna_count as usize);
    let segments = raw
        .records
        .into_iter()
        .map(|r| {
            let (amp, phase): (Vec<f64>, Vec<f64>) = r
                .payload
                .chunks_exact(2)
                .map(|p| (p[0] as f64, p[1] as f64))
                .unzip();
            CalibratedSegment::new(r.segment_id, r.person_id, r.time_frames, channels, amp, phase)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((segments, raw.geometry))
}
