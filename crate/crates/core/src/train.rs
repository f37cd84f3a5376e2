//! Training loop, evaluation protocol and the ablation drivers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::autodiff::Graph;
use crate::batching::{make_batch, normalize_amplitude, LabelMap, PaddedBatch, DEFAULT_MAX_TIME};
use crate::calibration::{
    calibrate_segment_with, read_calibrated_dataset, CalibratedSegment, CalibrationOptions,
};
use crate::checkpoint::Checkpoint;
use crate::csi::{
    read_dataset, sample_query_round, split_identity_disjoint, CsiSegment, DatasetManifest,
    ManifestEntry, Split, DATASET_MAGIC, VERSION_CALIBRATED, VERSION_COMPLEX,
};
use crate::error::{Error, Result};
use crate::losses::{combined_objective, ClsLoss, LossConfig, MetricLoss, ObjectiveInputs};
use crate::metrics::{
    average_reports, evaluate_rankings, rank_gallery, EvalReport, Item, DEFAULT_RANKS,
};
use crate::nn::{forward, init_params, Fusion, Mode, ModelConfig, Params};
use crate::tensor::Tensor;

pub const CENTERS_PARAM: &str = "loss.centers";
pub const CHECKPOINT_FILE: &str = "checkpoint.csim";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    #[default]
    Text,
    Jsonl,
}

/// Identity-balanced sampling: `p` identities with `m` segments each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub p: usize,
    pub m: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 4, m: 4 }
    }
}

/// Adam with decoupled weight decay on matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            cosine_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerConfig,
    pub optimizer: AdamConfig,
    #[serde(flatten)]
    pub loss: LossConfig,
    pub augmentation: AugmentConfig,
    pub max_time: usize,
    /// `channels`, `num_classes` and `max_time` are taken from the data and
    /// from `max_time` above.
    pub model: ModelConfig,
    pub calibration: CalibrationOptions,
    /// Fraction of identities used for training in identity-disjoint splits.
    pub train_fraction: f64,
    pub eval_rounds: usize,
    pub eval_batch_size: usize,
    /// Defaults to `ceil(train segments / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub log_format: LogFormat,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            sampler: SamplerConfig::default(),
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentConfig::default(),
            max_time: DEFAULT_MAX_TIME,
            model: ModelConfig::default(),
            calibration: CalibrationOptions::default(),
            train_fraction: 0.55,
            eval_rounds: 10,
            eval_batch_size: 32,
            steps_per_epoch: None,
            seed: 0,
            log_format: LogFormat::Text,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.sampler.p == 0 || self.sampler.m == 0 || self.batch_size != self.sampler.p * self.sampler.m {
            return Err(Error::Config(format!(
                "batch_size {} must equal P x M = {} x {}",
                self.batch_size, self.sampler.p, self.sampler.m
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.max_time == 0 || self.eval_rounds == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("max_time, eval_rounds and eval_batch_size must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.loss.validate()?;
        self.augmentation.validate()
    }

    /// Model geometry for data with `channels` channels and `num_classes`
    /// training identities.
    pub fn model_config(&self, channels: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            channels,
            num_classes,
            max_time: self.max_time,
            ..self.model.clone()
        }
    }
}

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training identities in class-index order.
    pub classes: Vec<String>,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    pub classification: f64,
    pub metric: f64,
    pub wall_time_s: f64,
    /// Segments per second over the epoch.
    pub throughput: f64,
}

impl TrainLogRecord {
    pub fn render(&self, format: LogFormat) -> String {
        match format {
            LogFormat::Jsonl => serde_json::to_string(self).expect("log record serializes"),
            LogFormat::Text => format!(
                "epoch {} step {} loss {:.6} (cls {:.6}, metric {:.6}) {:.2}s {:.1} seg/s",
                self.epoch, self.step, self.loss, self.classification, self.metric, self.wall_time_s, self.throughput
            ),
        }
    }
}

pub struct IdentitySampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    m: usize,
}

impl IdentitySampler {
    /// Groups segment indices by identity. Fewer than `p` identities is a
    /// configuration error.
    pub fn new(person_ids: &[&str], p: usize, m: usize) -> Result<Self> {
        let mut by_person: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, pid) in person_ids.iter().enumerate() {
            by_person.entry(pid).or_default().push(i);
        }
        if by_person.len() < p {
            return Err(Error::Config(format!(
                "sampler needs {p} identities, dataset has {}",
                by_person.len()
            )));
        }
        let short: Vec<&str> = by_person.iter().filter(|(_, v)| v.len() < m).map(|(k, _)| *k).collect();
        if !short.is_empty() {
            log::warn!("identities with fewer than {m} segments are sampled with replacement: {short:?}");
        }
        Ok(Self {
            groups: by_person.into_values().collect(),
            p,
            m,
        })
    }

    /// `p` distinct identities, `m` segment indices each, identity-major.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.p * self.m);
        for group in self.groups.choose_multiple(rng, self.p) {
            if group.len() >= self.m {
                out.extend(group.choose_multiple(rng, self.m).copied());
            } else {
                out.extend((0..self.m).map(|_| group[rng.gen_range(0..group.len())]));
            }
        }
        out
    }
}

struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

/// Amplitude normalised to unit mean, as seen by the model.
pub fn prepare(segments: &[CalibratedSegment]) -> Vec<CalibratedSegment> {
    segments.iter().map(normalize_amplitude).collect()
}

pub fn calibrate_all(segments: &[CsiSegment], opts: CalibrationOptions) -> Result<Vec<CalibratedSegment>> {
    segments.iter().map(|s| calibrate_segment_with(s, opts)).collect()
}

/// Reads a dataset file of either kind; complex data is calibrated on load.
pub fn load_calibrated(path: &Path, opts: CalibrationOptions) -> Result<Vec<CalibratedSegment>> {
    let mut header = [0u8; 6];
    File::open(path)?.read_exact(&mut header).map_err(|_| Error::Truncation {
        offset: 0,
        what: "dataset header".into(),
    })?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a CSI dataset", path.display())));
    }
    match u16::from_le_bytes([header[4], header[5]]) {
        VERSION_COMPLEX => calibrate_all(&read_dataset(path)?.0, opts),
        VERSION_CALIBRATED => Ok(read_calibrated_dataset(path)?.0),
        v => Err(Error::Format(format!("unsupported dataset version {v}"))),
    }
}

/// Manifest entries (without file offsets) for in-memory segments.
pub fn entries_of(segments: &[CalibratedSegment]) -> Vec<ManifestEntry> {
    segments
        .iter()
        .map(|s| ManifestEntry {
            segment_id: s.source_id.clone(),
            person_id: s.person_id.clone(),
            file_offset: 0,
            time_frames: s.time_frames() as u32,
        })
        .collect()
}

/// Segments listed in `manifest`, in manifest order.
pub fn select(segments: &[CalibratedSegment], manifest: &DatasetManifest) -> Result<Vec<CalibratedSegment>> {
    let by_id: BTreeMap<&str, &CalibratedSegment> =
        segments.iter().map(|s| (s.source_id.as_str(), s)).collect();
    manifest
        .entries
        .iter()
        .map(|e| {
            by_id
                .get(e.segment_id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::Data(format!("segment {} not in dataset", e.segment_id)))
        })
        .collect()
}

/// Pads to the longest segment of the batch, capped at `max_time`.
fn batch_of(segments: &[CalibratedSegment], max_time: usize, labels: &LabelMap) -> Result<PaddedBatch> {
    let longest = segments.iter().map(|s| s.time_frames()).max().unwrap_or(1);
    make_batch(segments, longest.min(max_time), labels)
}

struct StepResult {
    loss: f64,
    classification: f64,
    metric: f64,
    grads: BTreeMap<String, Tensor>,
}

fn train_step(
    params: &Params,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &PaddedBatch,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = forward(&mut g, &bound, model, batch, Mode::Train(rng))?;
    let inputs = ObjectiveInputs {
        logits: out.logits,
        embedding: out.embedding,
        class_weights: bound.var("class.w")?,
        centers: bound.var(CENTERS_PARAM).ok(),
        labels: &batch.labels,
    };
    let terms = combined_objective(&mut g, &inputs, loss)?;
    let total = g.value(terms.total).item();
    let classification = g.value(terms.classification).item();
    let metric = g.value(terms.metric).item();
    if !total.is_finite() {
        return Ok(StepResult {
            loss: total,
            classification,
            metric,
            grads: BTreeMap::new(),
        });
    }
    g.backward(terms.total)?;
    let grads = bound
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t)))
        .collect();
    Ok(StepResult {
        loss: total,
        classification,
        metric,
        grads,
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub meta: CheckpointMeta,
    pub log: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    pub fn model(&self) -> Model {
        Model {
            meta: self.meta.clone(),
            params: self.checkpoint.params.clone(),
        }
    }
}

/// Trains on already calibrated segments. With `out_dir`, the checkpoint is
/// rewritten after every epoch and log records are appended as JSON lines.
pub fn train(cfg: &TrainConfig, segments: &[CalibratedSegment], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = segments
        .first()
        .ok_or_else(|| Error::InsufficientData("no training segments".into()))?;
    let segments = prepare(segments);
    let labels = LabelMap::from_segments(&segments);
    let mut classes: Vec<String> = segments.iter().map(|s| s.person_id.clone()).collect();
    classes.sort();
    classes.dedup();
    let model = cfg.model_config(first.channels(), classes.len());
    model.validate()?;
    let ids: Vec<&str> = segments.iter().map(|s| s.person_id.as_str()).collect();
    let sampler = IdentitySampler::new(&ids, cfg.sampler.p, cfg.sampler.m)?;

    let mut params = init_params(&model, derive_seed(cfg.seed, 0))?;
    if cfg.loss.metric_loss == MetricLoss::Softtriple {
        let centers = cfg.loss.softtriple.init_centers(classes.len(), model.d_embed, derive_seed(cfg.seed, 1));
        params.insert(CENTERS_PARAM, centers);
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ cfg.augmentation.seed, 3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
    let mut adam = Adam::new(cfg.optimizer);
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| segments.len().div_ceil(cfg.batch_size).max(1));
    let total_steps = (steps * cfg.epochs) as f64;
    let augmenting = !cfg.augmentation.is_disabled();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        File::create(dir.join(TRAIN_LOG_FILE))?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut checkpoint = None;
    let mut meta = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut sum, mut sum_cls, mut sum_metric) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let picked: Vec<CalibratedSegment> = sampler
                .sample(&mut sample_rng)
                .into_iter()
                .map(|i| {
                    if augmenting {
                        augment(&segments[i], &cfg.augmentation, &mut aug_rng)
                    } else {
                        segments[i].clone()
                    }
                })
                .collect();
            let batch = batch_of(&picked, model.max_time, &labels)?;
            let r = match train_step(&params, &model, &cfg.loss, &batch, &mut dropout_rng) {
                // overflowed activations surface as zero or infinite norms
                Err(Error::Normalization(what)) => {
                    return Err(Error::Numeric(format!(
                        "degenerate embedding ({what}) at epoch {epoch}, step {step}; batch segments {:?}",
                        batch.segment_ids
                    )))
                }
                other => other?,
            };
            if !r.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, step {step}; batch segments {:?}",
                    r.loss, batch.segment_ids
                )));
            }
            let lr = if cfg.optimizer.cosine_decay {
                0.5 * cfg.optimizer.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                cfg.optimizer.lr
            };
            adam.step(&mut params, &r.grads, lr);
            if let Some((name, _)) = params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "parameter {name} became non-finite at epoch {epoch}, step {step}; batch segments {:?}",
                    batch.segment_ids
                )));
            }
            step += 1;
            sum += r.loss;
            sum_cls += r.classification;
            sum_metric += r.metric;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let record = TrainLogRecord {
            epoch,
            step,
            loss: sum / steps as f64,
            classification: sum_cls / steps as f64,
            metric: sum_metric / steps as f64,
            wall_time_s: elapsed,
            throughput: (steps * cfg.batch_size) as f64 / elapsed.max(1e-9),
        };
        log::info!("{}", record.render(cfg.log_format));
        let m = CheckpointMeta {
            model: model.clone(),
            train: cfg.clone(),
            classes: classes.clone(),
            epoch,
        };
        let ck = Checkpoint::new(&m, params.clone())?;
        if let Some(dir) = out_dir {
            ck.save(&dir.join(CHECKPOINT_FILE))?;
            let mut f = OpenOptions::new().append(true).open(dir.join(TRAIN_LOG_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        log.push(record);
        checkpoint = Some(ck);
        meta = Some(m);
    }
    Ok(TrainOutcome {
        checkpoint: checkpoint.expect("at least one epoch"),
        meta: meta.expect("at least one epoch"),
        log,
    })
}

/// A trained model ready for embedding.
#[derive(Debug, Clone)]
pub struct Model {
    pub meta: CheckpointMeta,
    pub params: Params,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            meta: ck.hyperparameters()?,
            params: ck.params.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fresh, untrained weights.
    pub fn random(cfg: &TrainConfig, channels: usize, classes: Vec<String>, seed: u64) -> Result<Self> {
        let model = cfg.model_config(channels, classes.len());
        Ok(Self {
            params: init_params(&model, seed)?,
            meta: CheckpointMeta {
                model,
                train: cfg.clone(),
                classes,
                epoch: 0,
            },
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.meta, self.params.clone())
    }

    /// Eval-mode embeddings, one row per segment.
    pub fn embed_segments(&self, segments: &[CalibratedSegment]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.meta.model;
        if let Some(bad) = segments.iter().find(|s| s.channels() != cfg.channels) {
            return Err(Error::Config(format!(
                "segment {} has {} channels, checkpoint expects {}",
                bad.source_id,
                bad.channels(),
                cfg.channels
            )));
        }
        let segments = prepare(segments);
        let mut out = Vec::with_capacity(segments.len());
        for chunk in segments.chunks(self.meta.train.eval_batch_size.max(1)) {
            let labels = LabelMap::from_segments(chunk);
            let batch = batch_of(chunk, cfg.max_time, &labels)?;
            let emb = crate::nn::embed(&self.params, cfg, &batch)?;
            let d = emb.shape()[1];
            out.extend(emb.data().chunks_exact(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

fn items_of(segments: &[CalibratedSegment]) -> Vec<Item> {
    segments
        .iter()
        .map(|s| Item {
            segment_id: s.source_id.clone(),
            person_id: s.person_id.clone(),
        })
        .collect()
}

/// One query/gallery round.
pub fn evaluate(model: &Model, query: &[CalibratedSegment], gallery: &[CalibratedSegment]) -> Result<EvalReport> {
    let q = model.embed_segments(query)?;
    let g = model.embed_segments(gallery)?;
    let rankings = rank_gallery(&q, &g, &items_of(query), &items_of(gallery))?;
    let mut report = evaluate_rankings(&rankings, &DEFAULT_RANKS, 0)?;
    report.config = serde_json::to_value(&model.meta.model)?;
    Ok(report)
}

/// `rounds` independent query/gallery samplings of the test segments,
/// averaged. Embeddings are computed once.
pub fn evaluate_rounds(model: &Model, test: &[CalibratedSegment], rounds: usize, seed: u64) -> Result<EvalReport> {
    if rounds == 0 {
        return Err(Error::Config("need at least one evaluation round".into()));
    }
    let embeddings = model.embed_segments(test)?;
    let index: BTreeMap<&str, usize> = test.iter().enumerate().map(|(i, s)| (s.source_id.as_str(), i)).collect();
    let entries = entries_of(test);
    let items = items_of(test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let (query, gallery) = sample_query_round(&entries, rng.gen());
        let pick = |m: &DatasetManifest| -> (Vec<Vec<f64>>, Vec<Item>) {
            m.entries
                .iter()
                .map(|e| {
                    let i = index[e.segment_id.as_str()];
                    (embeddings[i].clone(), items[i].clone())
                })
                .unzip()
        };
        let (qe, qi) = pick(&query);
        let (ge, gi) = pick(&gallery);
        let rankings = rank_gallery(&qe, &ge, &qi, &gi)?;
        reports.push(evaluate_rankings(&rankings, &DEFAULT_RANKS, round)?);
    }
    let mut report = average_reports(&reports)?;
    report.config = serde_json::json!({
        "model": model.meta.model,
        "rounds": rounds,
        "seed": seed,
    });
    Ok(report)
}

/// `id\tlabel\tv1..vd` lines, one per segment.
pub fn export_embeddings(model: &Model, segments: &[CalibratedSegment]) -> Result<String> {
    let emb = model.embed_segments(segments)?;
    let mut s = String::new();
    for (seg, v) in segments.iter().zip(&emb) {
        s.push_str(&seg.source_id);
        s.push('\t');
        s.push_str(&seg.person_id);
        for x in v {
            s.push('\t');
            s.push_str(&x.to_string());
        }
        s.push('\n');
    }
    Ok(s)
}

/// Training plus evaluation on an identity-disjoint split.
pub struct Experiment {
    pub split: Split,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

pub fn split_segments(
    segments: &[CalibratedSegment],
    train_fraction: f64,
    seed: u64,
) -> Result<(Split, Vec<CalibratedSegment>, Vec<CalibratedSegment>)> {
    let split = split_identity_disjoint(&entries_of(segments), train_fraction, seed)?;
    let train_segs = select(segments, &split.train)?;
    let test_segs = select(
        segments,
        &DatasetManifest {
            split_tag: None,
            entries: split.test_entries(),
        },
    )?;
    Ok((split, train_segs, test_segs))
}

pub fn run_experiment(cfg: &TrainConfig, segments: &[CalibratedSegment], out_dir: Option<&Path>) -> Result<Experiment> {
    let (split, train_segs, test_segs) = split_segments(segments, cfg.train_fraction, cfg.seed)?;
    let outcome = train(cfg, &train_segs, out_dir)?;
    let report = evaluate_rounds(&outcome.model(), &test_segs, cfg.eval_rounds, cfg.seed)?;
    Ok(Experiment { split, outcome, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub augmentation: bool,
    pub metric_loss: MetricLoss,
    pub cls_loss: ClsLoss,
    pub report: EvalReport,
}

/// Loss/augmentation combinations, in table order.
pub const LOSS_ABLATION_ROWS: [(bool, MetricLoss, ClsLoss); 6] = [
    (false, MetricLoss::Triplet, ClsLoss::CrossEntropy),
    (true, MetricLoss::Triplet, ClsLoss::CrossEntropy),
    (true, MetricLoss::Softtriple, ClsLoss::CrossEntropy),
    (true, MetricLoss::Triplet, ClsLoss::Lmcl),
    (false, MetricLoss::Softtriple, ClsLoss::Lmcl),
    (true, MetricLoss::Softtriple, ClsLoss::Lmcl),
];

/// `base` with augmentation and losses set for one ablation row. Rows
/// without augmentation use zero apply probabilities.
pub fn ablation_config(base: &TrainConfig, augmentation: bool, metric: MetricLoss, cls: ClsLoss) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.loss.metric_loss = metric;
    cfg.loss.cls_loss = cls;
    if !augmentation {
        cfg.augmentation = AugmentConfig {
            seed: base.augmentation.seed,
            ..AugmentConfig::disabled()
        };
    }
    cfg
}

/// Table label such as `Aug Sof. LMCL`.
pub fn row_label(augmentation: bool, metric: MetricLoss, cls: ClsLoss) -> String {
    format!(
        "{} {} {}",
        if augmentation { "Aug" } else { "-" },
        match metric {
            MetricLoss::Triplet => "Tri.",
            MetricLoss::Softtriple => "Sof.",
        },
        match cls {
            ClsLoss::CrossEntropy => "Cro.",
            ClsLoss::Lmcl => "LMCL",
        }
    )
}

/// Trains and evaluates every loss ablation row on the same split.
pub fn ablation_matrix(base: &TrainConfig, segments: &[CalibratedSegment]) -> Result<Vec<AblationRow>> {
    LOSS_ABLATION_ROWS
        .iter()
        .map(|&(aug, metric, cls)| {
            let cfg = ablation_config(base, aug, metric, cls);
            let exp = run_experiment(&cfg, segments, None)?;
            let label = row_label(aug, metric, cls);
            log::info!("{label}: mAP {:.4} mINP {:.4} Rank-1 {:.4}", exp.report.map, exp.report.minp, exp.report.rank(1));
            Ok(AblationRow {
                label,
                augmentation: aug,
                metric_loss: metric,
                cls_loss: cls,
                report: exp.report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub fusion: Fusion,
    pub report: EvalReport,
}

pub const FUSION_VARIANTS: [Fusion; 3] = [Fusion::Early, Fusion::Late, Fusion::Lateral];

pub fn fusion_ablation(base: &TrainConfig, segments: &[CalibratedSegment]) -> Result<Vec<FusionRow>> {
    FUSION_VARIANTS
        .iter()
        .map(|&fusion| {
            let mut cfg = base.clone();
            cfg.model.fusion = fusion;
            let exp = run_experiment(&cfg, segments, None)?;
            log::info!("{fusion:?}: mAP {:.4} mINP {:.4} Rank-1 {:.4}", exp.report.map, exp.report.minp, exp.report.rank(1));
            Ok(FusionRow {
                fusion,
                report: exp.report,
            })
        })
        .collect()
}

/// Writes `split.json` holding the three manifests.
pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    let v = serde_json::json!({
        "train": split.train,
        "query": split.query,
        "gallery": split.gallery,
    });
    fs::write(path, serde_json::to_vec_pretty(&v)?)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Split> {
    #[derive(Deserialize)]
    struct Raw {
        train: DatasetManifest,
        query: DatasetManifest,
        gallery: DatasetManifest,
    }
    let raw: Raw = serde_json::from_slice(&fs::read(path)?)?;
    Ok(Split {
        train: raw.train,
        query: raw.query,
        gallery: raw.gallery,
    })
}
