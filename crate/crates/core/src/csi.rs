//! CSI domain types, the binary dataset container and identity-disjoint splitting.
//!
//! Antenna and subcarrier dimensions are merged into a single channel axis at
//! ingestion. Channel `d` of a frame is antenna `d / n` and subcarrier `d % n`,
//! where `n` is the layout's subcarrier count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CSI1";
/// Payload holds raw complex samples as interleaved (re, im).
pub const VERSION_COMPLEX: u16 = 1;
/// Payload holds calibrated (amplitude, phase) pairs.
pub const VERSION_CALIBRATED: u16 = 2;

/// Subcarrier indices `k_i` relative to the carrier centre plus the FFT size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubcarrierLayout {
    indices: Vec<i16>,
    fft_size: u16,
}

impl SubcarrierLayout {
    pub fn new(indices: Vec<i16>, fft_size: u16) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::Geometry(format!(
                "layout needs at least 2 subcarriers, got {}",
                indices.len()
            )));
        }
        if fft_size == 0 {
            return Err(Error::Geometry("fft size must be positive".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Geometry(
                "subcarrier indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { indices, fft_size })
    }

    /// Contiguous symmetric layout `-half..=-1, 1..=half` (no DC bin).
    pub fn symmetric_without_dc(half: i16, fft_size: u16) -> Result<Self> {
        let indices = (-half..=-1).chain(1..=half).collect();
        Self::new(indices, fft_size)
    }

    pub fn indices(&self) -> &[i16] {
        &self.indices
    }

    pub fn fft_size(&self) -> u16 {
        self.fft_size
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn index_sum(&self) -> i64 {
        self.indices.iter().map(|&k| k as i64).sum()
    }

    /// True iff the indices sum to zero.
    pub fn symmetric_sum(&self) -> bool {
        self.index_sum() == 0
    }

    pub fn indices_f64(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| k as f64).collect()
    }
}

/// One variable-length recording.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSegment {
    pub segment_id: String,
    pub person_id: String,
    pub sample_rate_hz: f32,
    pub layout: SubcarrierLayout,
    pub antenna_count: u16,
    time_frames: usize,
    /// Row-major (time, channel).
    frames: Vec<Complex32>,
}

impl CsiSegment {
    pub fn new(
        segment_id: impl Into<String>,
        person_id: impl Into<String>,
        sample_rate_hz: f32,
        layout: SubcarrierLayout,
        antenna_count: u16,
        time_frames: usize,
        frames: Vec<Complex32>,
    ) -> Result<Self> {
        if time_frames == 0 {
            return Err(Error::Geometry("segment needs at least one frame".into()));
        }
        if antenna_count == 0 {
            return Err(Error::Geometry("antenna count must be positive".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let channels = antenna_count as usize * layout.count();
        if frames.len() != time_frames * channels {
            return Err(Error::Geometry(format!(
                "expected {} samples ({} frames x {} channels), got {}",
                time_frames * channels,
                time_frames,
                channels,
                frames.len()
            )));
        }
        if let Some(pos) = frames
            .iter()
            .position(|c| !(c.re.is_finite() && c.im.is_finite()))
        {
            return Err(Error::Data(format!(
                "non-finite sample at frame {}, channel {}",
                pos / channels,
                pos % channels
            )));
        }
        Ok(Self {
            segment_id: segment_id.into(),
            person_id: person_id.into(),
            sample_rate_hz,
            layout,
            antenna_count,
            time_frames,
            frames,
        })
    }

    pub fn time_frames(&self) -> usize {
        self.time_frames
    }

    /// Merged antenna x subcarrier channel count `D`.
    pub fn channels(&self) -> usize {
        self.antenna_count as usize * self.layout.count()
    }

    pub fn frames(&self) -> &[Complex32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Complex32] {
        let d = self.channels();
        &self.frames[t * d..(t + 1) * d]
    }

    pub fn at(&self, t: usize, channel: usize) -> Complex32 {
        self.frames[t * self.channels() + channel]
    }

    pub(crate) fn frames_mut(&mut self) -> &mut [Complex32] {
        &mut self.frames
    }

    fn same_geometry(&self, other: &CsiSegment) -> bool {
        self.antenna_count == other.antenna_count
            && self.layout == other.layout
            && self.sample_rate_hz.to_bits() == other.sample_rate_hz.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test-query")]
    TestQuery,
    #[serde(rename = "test-gallery")]
    TestGallery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub segment_id: String,
    pub person_id: String,
    pub file_offset: u64,
    pub time_frames: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<SplitTag>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn person_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.person_id.as_str()).collect()
    }

    pub fn segment_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.segment_id.as_str()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// `data/foo.csi` -> `data/foo.manifest.json`.
pub fn manifest_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Header fields shared by every segment in a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileGeometry {
    pub version: u16,
    pub antenna_count: u16,
    pub sample_rate_hz: f32,
    /// `None` only for files with zero segments written without geometry.
    pub layout: Option<SubcarrierLayout>,
}

/// One segment record as stored: ids, frame count and raw f32 pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub segment_id: String,
    pub person_id: String,
    pub time_frames: usize,
    /// Interleaved pairs, row-major (time, channel); length `2 * T * D`.
    pub payload: Vec<f32>,
}

pub struct RawDataset {
    pub geometry: FileGeometry,
    pub records: Vec<RawRecord>,
    pub manifest: DatasetManifest,
}

pub fn write_raw(
    path: &Path,
    geometry: &FileGeometry,
    records: &[RawRecord],
) -> Result<DatasetManifest> {
    let (count, fft_size, indices): (u16, u16, &[i16]) = match &geometry.layout {
        Some(l) => (l.count() as u16, l.fft_size(), l.indices()),
        None => (0, 0, &[]),
    };
    let channels = geometry.antenna_count as usize * count as usize;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&geometry.version.to_le_bytes());
    buf.extend_from_slice(&geometry.antenna_count.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&fft_size.to_le_bytes());
    buf.extend_from_slice(&geometry.sample_rate_hz.to_le_bytes());
    for k in indices {
        buf.extend_from_slice(&k.to_le_bytes());
    }
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());

    let mut manifest = DatasetManifest::default();
    for rec in records {
        if rec.payload.len() != 2 * rec.time_frames * channels {
            return Err(Error::Geometry(format!(
                "segment {} payload has {} values, expected {}",
                rec.segment_id,
                rec.payload.len(),
                2 * rec.time_frames * channels
            )));
        }
        manifest.entries.push(ManifestEntry {
            segment_id: rec.segment_id.clone(),
            person_id: rec.person_id.clone(),
            file_offset: buf.len() as u64,
            time_frames: rec.time_frames as u32,
        });
        write_str(&mut buf, &rec.segment_id)?;
        write_str(&mut buf, &rec.person_id)?;
        buf.extend_from_slice(&(rec.time_frames as u32).to_le_bytes());
        buf.reserve(rec.payload.len() * 4);
        for v in &rec.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    manifest.save(&manifest_sidecar_path(path))?;
    Ok(manifest)
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Data(format!("identifier too long ({} bytes)", s.len())))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncation {
                offset: self.pos as u64,
                what: format!("{what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{what} at byte {start} is not valid UTF-8")))
    }
}

pub fn read_raw(path: &Path) -> Result<RawDataset> {
    let bytes = fs::read(path)?;
    parse_raw(&bytes)
}

pub fn parse_raw(bytes: &[u8]) -> Result<RawDataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing CSI1 magic bytes".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16("format version")?;
    if version != VERSION_COMPLEX && version != VERSION_CALIBRATED {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let antenna_count = cur.u16("antenna count")?;
    let count = cur.u16("subcarrier count")? as usize;
    let fft_size = cur.u16("fft size")?;
    let sample_rate_hz = cur.f32("sample rate")?;
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        indices.push(i16::from_le_bytes(
            cur.take(2, "subcarrier index")?.try_into().unwrap(),
        ));
    }
    let n_segments = cur.u32("segment count")? as usize;

    let layout = if n_segments == 0 && count == 0 {
        None
    } else {
        if antenna_count == 0 {
            return Err(Error::Format("antenna count is zero".into()));
        }
        Some(SubcarrierLayout::new(indices, fft_size).map_err(|e| Error::Format(e.to_string()))?)
    };
    let channels = antenna_count as usize * count;

    let mut records = Vec::with_capacity(n_segments);
    let mut manifest = DatasetManifest::default();
    for _ in 0..n_segments {
        let offset = cur.pos as u64;
        let segment_id = cur.string("segment id")?;
        let person_id = cur.string("person id")?;
        let time_frames = cur.u32("frame count")? as usize;
        if time_frames == 0 {
            return Err(Error::Format(format!("segment {segment_id} has zero frames")));
        }
        let n_values = 2 * time_frames * channels;
        let payload_start = cur.pos;
        let raw = cur.take(n_values * 4, &format!("payload of segment {segment_id}"))?;
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in segment {segment_id} at byte offset {}",
                payload_start + 4 * i
            )));
        }
        manifest.entries.push(ManifestEntry {
            segment_id: segment_id.clone(),
            person_id: person_id.clone(),
            file_offset: offset,
            time_frames: time_frames as u32,
        });
        records.push(RawRecord {
            segment_id,
            person_id,
            time_frames,
            payload,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last segment",
            bytes.len() - cur.pos
        )));
    }
    Ok(RawDataset {
        geometry: FileGeometry {
            version,
            antenna_count,
            sample_rate_hz,
            layout,
        },
        records,
        manifest,
    })
}

/// Writes raw complex segments plus the `.manifest.json` sidecar.
pub fn write_dataset(segments: &[CsiSegment], path: &Path) -> Result<()> {
    let geometry = match segments.first() {
        None => FileGeometry {
            version: VERSION_COMPLEX,
            antenna_count: 0,
            sample_rate_hz: 0.0,
            layout: None,
        },
        Some(first) => {
            if let Some(bad) = segments.iter().find(|s| !s.same_geometry(first)) {
                return Err(Error::Geometry(format!(
                    "segment {} has antenna_count={} / {} subcarriers, expected {} / {}",
                    bad.segment_id,
                    bad.antenna_count,
                    bad.layout.count(),
                    first.antenna_count,
                    first.layout.count()
                )));
            }
            FileGeometry {
                version: VERSION_COMPLEX,
                antenna_count: first.antenna_count,
                sample_rate_hz: first.sample_rate_hz,
                layout: Some(first.layout.clone()),
            }
        }
    };
    let records: Vec<RawRecord> = segments
        .iter()
        .map(|s| RawRecord {
            segment_id: s.segment_id.clone(),
            person_id: s.person_id.clone(),
            time_frames: s.time_frames,
            payload: s.frames.iter().flat_map(|c| [c.re, c.im]).collect(),
        })
        .collect();
    write_raw(path, &geometry, &records)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<CsiSegment>, DatasetManifest)> {
    let raw = read_raw(path)?;
    if raw.geometry.version != VERSION_COMPLEX {
        return Err(Error::Format(format!(
            "{} holds calibrated (amplitude, phase) data, not complex samples",
            path.display()
        )));
    }
    let Some(layout) = raw.geometry.layout else {
        return Ok((Vec::new(), raw.manifest));
    };
    let segments = raw
        .records
        .into_iter()
        .map(|r| {
            let frames = r
                .payload
                .chunks_exact(2)
                .map(|p| Complex32::new(p[0], p[1]))
                .collect();
            CsiSegment::new(
                r.segment_id,
                r.person_id,
                raw.geometry.sample_rate_hz,
                layout.clone(),
                raw.geometry.antenna_count,
                r.time_frames,
                frames,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((segments, raw.manifest))
}

/// Train / query / gallery manifests produced by [`split_identity_disjoint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl Split {
    /// All test-side entries (query and gallery) in a single list.
    pub fn test_entries(&self) -> Vec<ManifestEntry> {
        let mut all: Vec<_> = self
            .query
            .entries
            .iter()
            .chain(&self.gallery.entries)
            .cloned()
            .collect();
        all.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
        all
    }
}

/// Number of training identities for a given fraction: `round(fraction * n)`,
/// kept within `[1, n - 1]`.
pub fn train_identity_count(n_identities: usize, train_fraction: f64) -> usize {
    ((train_fraction * n_identities as f64).round() as usize).clamp(1, n_identities - 1)
}

/// Partitions identities between train and test, then samples one query per
/// test identity with the rest of its segments going to the gallery.
pub fn split_identity_disjoint(
    entries: &[ManifestEntry],
    train_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let by_person = group_by_person(entries);
    if by_person.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 identities to split, found {}",
            by_person.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut persons: Vec<&str> = by_person.keys().copied().collect();
    persons.shuffle(&mut rng);
    let n_train = train_identity_count(persons.len(), train_fraction);
    let mut train_ids: Vec<&str> = persons[..n_train].to_vec();
    train_ids.sort_unstable();

    let train = DatasetManifest {
        split_tag: Some(SplitTag::Train),
        entries: train_ids
            .iter()
            .flat_map(|p| by_person[p].iter().map(|e| (*e).clone()))
            .collect(),
    };
    let test: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| !train_ids.contains(&e.person_id.as_str()))
        .cloned()
        .collect();
    let (query, gallery) = sample_query_round(&test, rng_next_seed(&mut rng));
    Ok(Split {
        train,
        query,
        gallery,
    })
}

fn rng_next_seed(rng: &mut ChaCha8Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}

fn group_by_person(entries: &[ManifestEntry]) -> BTreeMap<&str, Vec<&ManifestEntry>> {
    let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.person_id.as_str()).or_default().push(e);
    }
    map
}

/// One query/gallery sampling round over test entries: a random segment per
/// identity becomes the query, the rest form the gallery. Identities with a
/// single segment go to the gallery only.
pub fn sample_query_round(test: &[ManifestEntry], seed: u64) -> (DatasetManifest, DatasetManifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = DatasetManifest {
        split_tag: Some(SplitTag::TestQuery),
        entries: Vec::new(),
    };
    let mut gallery = DatasetManifest {
        split_tag: Some(SplitTag::TestGallery),
        entries: Vec::new(),
    };
    for (person, segs) in group_by_person(test) {
        if segs.len() < 2 {
            log::warn!("test identity {person} has a single segment; placed in gallery only");
            gallery.entries.push(segs[0].clone());
            continue;
        }
        let q = rand::Rng::gen_range(&mut rng, 0..segs.len());
        for (i, e) in segs.into_iter().enumerate() {
            if i == q {
                query.entries.push(e.clone());
            } else {
                gallery.entries.push(e.clone());
            }
        }
    }
    (query, gallery)
}
