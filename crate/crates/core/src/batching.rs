//! Fixed-shape batches for the two streams.
//!
//! The amplitude stream is a sequence of time tokens of width `D`, padded at
//! the end to `max_time` and accompanied by a validity mask. The phase stream
//! is the transpose: `D` channel tokens whose width is the (padded) time axis.
//! Its padding lives inside each token, so no mask is kept for it.

use std::collections::BTreeMap;

use crate::calibration::CalibratedSegment;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_TIME: usize = 500;

/// person_id -> class index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap(BTreeMap<String, usize>);

impl LabelMap {
    /// Class indices in sorted person-id order.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<&str> = ids.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        Self(
            sorted
                .into_iter()
                .enumerate()
                .map(|(i, p)| (p.to_string(), i))
                .collect(),
        )
    }

    pub fn from_segments(segments: &[CalibratedSegment]) -> Self {
        Self::from_ids(segments.iter().map(|s| s.person_id.as_str()))
    }

    pub fn get(&self, person_id: &str) -> Option<usize> {
        self.0.get(person_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// (B, max_time, D)
    pub amp: Tensor,
    /// (B, D, max_time)
    pub phase: Tensor,
    /// (B, max_time); 1 = valid frame, 0 = padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub max_time: usize,
    pub segment_ids: Vec<String>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn channels(&self) -> usize {
        self.amp.shape()[2]
    }
}

/// Pads (or truncates, keeping the head) every segment to `max_time` frames.
pub fn make_batch(
    segments: &[CalibratedSegment],
    max_time: usize,
    labels: &LabelMap,
) -> Result<PaddedBatch> {
    let first = segments.first().ok_or(Error::EmptyBatch)?;
    if max_time == 0 {
        return Err(Error::Config("max_time must be at least 1".into()));
    }
    let d = first.channels();
    if let Some(bad) = segments.iter().find(|s| s.channels() != d) {
        return Err(Error::Geometry(format!(
            "segment {} has {} channels, batch has {d}",
            bad.source_id,
            bad.channels()
        )));
    }
    let b = segments.len();
    let mut amp = vec![0.0; b * max_time * d];
    let mut phase = vec![0.0; b * d * max_time];
    let mut mask = vec![0.0; b * max_time];
    let mut lengths = Vec::with_capacity(b);
    let mut label_ids = Vec::with_capacity(b);
    for (bi, seg) in segments.iter().enumerate() {
        let len = seg.time_frames().min(max_time);
        lengths.push(len);
        label_ids.push(labels.get(&seg.person_id).ok_or_else(|| {
            Error::Config(format!("person {} missing from label map", seg.person_id))
        })?);
        mask[bi * max_time..bi * max_time + len].fill(1.0);
        let amp_base = bi * max_time * d;
        amp[amp_base..amp_base + len * d].copy_from_slice(&seg.amplitude[..len * d]);
        let phase_base = bi * d * max_time;
        for t in 0..len {
            for (c, &v) in seg.phase_row(t).iter().enumerate() {
                phase[phase_base + c * max_time + t] = v;
            }
        }
    }
    Ok(PaddedBatch {
        amp: Tensor::new(&[b, max_time, d], amp)?,
        phase: Tensor::new(&[b, d, max_time], phase)?,
        mask: Tensor::new(&[b, max_time], mask)?,
        lengths,
        labels: label_ids,
        max_time,
        segment_ids: segments.iter().map(|s| s.source_id.clone()).collect(),
    })
}

/// Scales the amplitude plane to unit mean magnitude; the phase plane is
/// already zero-mean per frame after calibration.
pub fn normalize_amplitude(seg: &CalibratedSegment) -> CalibratedSegment {
    let mut out = seg.clone();
    let mean = seg.amplitude.iter().sum::<f64>() / seg.amplitude.len() as f64;
    if mean > 0.0 {
        out.amplitude.iter_mut().for_each(|v| *v /= mean);
    }
    out
}
