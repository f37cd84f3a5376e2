//! Two-stream transformer encoder.
//!
//! The amplitude stream sees time tokens (width `D`) under a padding mask; the
//! phase stream sees channel tokens (width = padded time axis). After each
//! pair of encoder blocks a lateral connection pools the amplitude features
//! over valid time steps, projects them and adds the result to every phase
//! token. The fused phase output is mean-pooled and mapped to the embedding;
//! the class head scores the embedding against one direction per class.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batching::PaddedBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Amplitude -> phase lateral connection after every block pair.
    #[default]
    Lateral,
    /// Amplitude and phase tokens concatenated into one sequence before the first block.
    Early,
    /// Independent streams; the two pooled embeddings are averaged.
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Merged antenna x subcarrier channel count `D` (= phase sequence length).
    pub channels: usize,
    pub max_time: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub d_embed: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub fusion: Fusion,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 936,
            max_time: 500,
            d_model: 128,
            heads: 4,
            d_ff: 256,
            layers: 4,
            d_embed: 128,
            num_classes: 11,
            dropout: 0.1,
            fusion: Fusion::Lateral,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("max_time", self.max_time),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("d_embed", self.d_embed),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.0
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Loads every tensor into `graph`, trainable or constant.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(n, t)| {
                    let v = if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant(t.clone())
                    };
                    (n.clone(), v)
                })
                .collect(),
        )
    }
}

/// Parameter name -> graph variable.
#[derive(Debug, Clone, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

const BLOCK_TENSORS: [&str; 16] = [
    "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "ff1.w",
    "ff1.b", "ff2.w", "ff2.b",
];

fn linear<R: Rng + ?Sized>(p: &mut Params, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    p.insert(format!("{prefix}.b"), Tensor::uniform(&[fan_out], bound, rng));
}

fn encoder_block<R: Rng + ?Sized>(p: &mut Params, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d_model;
    let bound = 1.0 / (d as f64).sqrt();
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{prefix}.{ln}.g"), Tensor::full(&[d], 1.0));
        p.insert(format!("{prefix}.{ln}.b"), Tensor::zeros(&[d]));
    }
    for proj in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.w{proj}"), Tensor::uniform(&[d, d], bound, rng));
        p.insert(format!("{prefix}.b{proj}"), Tensor::uniform(&[d], bound, rng));
    }
    linear(p, &format!("{prefix}.ff1"), d, cfg.d_ff, rng);
    linear(p, &format!("{prefix}.ff2"), cfg.d_ff, d, rng);
}

/// Fresh parameters: weights and biases uniform in `+-1/sqrt(fan_in)`,
/// position embeddings normal with std 0.02, layer norms at identity.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::default();
    let d = cfg.d_model;
    linear(&mut p, "amp.in", cfg.channels, d, &mut rng);
    linear(&mut p, "phase.in", cfg.max_time, d, &mut rng);
    p.insert("amp.pos", Tensor::normal(&[cfg.max_time, d], 0.02, &mut rng));
    p.insert("phase.pos", Tensor::normal(&[cfg.channels, d], 0.02, &mut rng));
    for i in 0..cfg.layers {
        encoder_block(&mut p, &format!("amp.block{i}"), cfg, &mut rng);
        if cfg.fusion != Fusion::Early {
            encoder_block(&mut p, &format!("phase.block{i}"), cfg, &mut rng);
        }
        if cfg.fusion == Fusion::Lateral {
            linear(&mut p, &format!("lateral{i}"), d, d, &mut rng);
        }
    }
    linear(&mut p, "embed", d, cfg.d_embed, &mut rng);
    let bound = 1.0 / (cfg.d_embed as f64).sqrt();
    p.insert(
        "class.w",
        Tensor::uniform(&[cfg.num_classes, cfg.d_embed], bound, &mut rng),
    );
    Ok(p)
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let shape = g.shape(x).to_vec();
                let mask = Tensor::from_fn(&shape, |_| {
                    if rng.gen_bool(keep) {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Variables of one encoder block inside a graph.
pub struct BlockVars {
    vars: BTreeMap<&'static str, Var>,
}

impl BlockVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for name in BLOCK_TENSORS {
            vars.insert(name, bound.var(&format!("{prefix}.{name}"))?);
        }
        Ok(Self { vars })
    }

    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `(B, T, d) -> (B, h, T, d/h)`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Multi-head self-attention with padding keys excluded. `mask` is `(B, T)`
/// with 1 for valid positions, or `None` when every position is valid.
/// Returns the projected output `(B, T, d)` and the attention weights
/// `(B, h, T, T)`.
pub fn masked_self_attention(
    g: &mut Graph,
    x: Var,
    mask: Option<&Tensor>,
    block: &BlockVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::shape("masked_self_attention", &s, &[heads]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if let Some(m) = mask {
        if m.shape() != [b, t] {
            return Err(Error::shape("masked_self_attention", &s, m.shape()));
        }
        if let Some(row) = (0..b).find(|&r| m.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::DegenerateMask { row });
        }
    }
    let q = affine(g, x, block.get("wq"), block.get("bq"))?;
    let k = affine(g, x, block.get("wk"), block.get("bk"))?;
    let v = affine(g, x, block.get("wv"), block.get("bv"))?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    if let Some(m) = mask {
        let key_mask = m.clone().reshape(&[b, 1, 1, t])?;
        scores = g.masked_fill(scores, &key_mask, f64::NEG_INFINITY)?;
    }
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let out = affine(g, ctx, block.get("wo"), block.get("bo"))?;
    Ok((out, attn))
}

/// Pre-norm encoder block: `x + attn(LN(x))`, then `x + FFN(LN(x))`.
fn encoder_forward(
    g: &mut Graph,
    x: Var,
    mask: Option<&Tensor>,
    block: &BlockVars,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Var> {
    let eps = cfg.layer_norm_eps;
    let h = g.layer_norm(x, block.get("ln1.g"), block.get("ln1.b"), eps)?;
    let (a, _) = masked_self_attention(g, h, mask, block, cfg.heads)?;
    let a = mode.dropout(g, a, cfg.dropout)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, block.get("ln2.g"), block.get("ln2.b"), eps)?;
    let f = affine(g, h, block.get("ff1.w"), block.get("ff1.b"))?;
    let f = g.gelu(f);
    let f = affine(g, f, block.get("ff2.w"), block.get("ff2.b"))?;
    let f = mode.dropout(g, f, cfg.dropout)?;
    g.add(x, f)
}

/// Adds the projected, mask-aware time average of the amplitude features to
/// every phase token.
pub fn lateral_connect(
    g: &mut Graph,
    amp_feats: Var,
    mask: &Tensor,
    phase_feats: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    let pooled = g.masked_mean(amp_feats, mask)?;
    let projected = affine(g, pooled, proj_w, proj_b)?;
    let s = g.shape(projected).to_vec();
    let projected = g.reshape(projected, &[s[0], 1, s[1]])?;
    g.add(phase_feats, projected)
}

pub struct ForwardOutput {
    /// (B, d_embed)
    pub embedding: Var,
    /// (B, num_classes): embedding scored against the class-head rows.
    pub logits: Var,
}

struct Inputs {
    amp: Var,
    phase: Var,
}

fn embed_inputs(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
) -> Result<Inputs> {
    let t_pad = batch.amp.shape()[1];
    let d = batch.amp.shape()[2];
    if d != cfg.channels || t_pad > cfg.max_time || batch.phase.shape()[2] != t_pad {
        return Err(Error::shape(
            "forward",
            batch.amp.shape(),
            &[cfg.max_time, cfg.channels],
        ));
    }
    let amp_in = g.constant(batch.amp.clone());
    let phase_in = g.constant(batch.phase.clone());

    let amp = affine(g, amp_in, bound.var("amp.in.w")?, bound.var("amp.in.b")?)?;
    let amp_pos = g.slice(bound.var("amp.pos")?, 0, 0, t_pad)?;
    let amp = g.add(amp, amp_pos)?;

    // Tokens shorter than max_time read only the matching weight rows, which
    // equals zero-padding them to full width.
    let w = g.slice(bound.var("phase.in.w")?, 0, 0, t_pad)?;
    let phase = affine(g, phase_in, w, bound.var("phase.in.b")?)?;
    let phase = g.add(phase, bound.var("phase.pos")?)?;
    Ok(Inputs { amp, phase })
}

fn head(g: &mut Graph, bound: &Bound, pooled: Var) -> Result<Var> {
    affine(g, pooled, bound.var("embed.w")?, bound.var("embed.b")?)
}

fn class_logits(g: &mut Graph, bound: &Bound, embedding: Var) -> Result<Var> {
    let wt = g.transpose(bound.var("class.w")?)?;
    g.matmul(embedding, wt)
}

fn forward_impl(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    mode: &mut Mode,
    lateral: bool,
) -> Result<ForwardOutput> {
    let Inputs { mut amp, mut phase } = embed_inputs(g, bound, cfg, batch)?;
    let mask = &batch.mask;
    let embedding = match cfg.fusion {
        Fusion::Lateral => {
            for i in 0..cfg.layers {
                let ab = BlockVars::from_bound(bound, &format!("amp.block{i}"))?;
                let pb = BlockVars::from_bound(bound, &format!("phase.block{i}"))?;
                amp = encoder_forward(g, amp, Some(mask), &ab, cfg, mode)?;
                phase = encoder_forward(g, phase, None, &pb, cfg, mode)?;
                if lateral {
                    let w = bound.var(&format!("lateral{i}.w"))?;
                    let b = bound.var(&format!("lateral{i}.b"))?;
                    phase = lateral_connect(g, amp, mask, phase, w, b)?;
                }
            }
            let pooled = g.mean_axis(phase, 1)?;
            head(g, bound, pooled)?
        }
        Fusion::Early => {
            let s = g.shape(phase)[1];
            let b = batch.batch_size();
            let t = mask.shape()[1];
            let mut joint_mask = Vec::with_capacity(b * (t + s));
            for r in 0..b {
                joint_mask.extend_from_slice(mask.row(r));
                joint_mask.extend(std::iter::repeat(1.0).take(s));
            }
            let joint_mask = Tensor::new(&[b, t + s], joint_mask)?;
            let mut x = g.concat(amp, phase, 1)?;
            for i in 0..cfg.layers {
                let blk = BlockVars::from_bound(bound, &format!("amp.block{i}"))?;
                x = encoder_forward(g, x, Some(&joint_mask), &blk, cfg, mode)?;
            }
            let pooled = g.masked_mean(x, &joint_mask)?;
            head(g, bound, pooled)?
        }
        Fusion::Late => {
            for i in 0..cfg.layers {
                let ab = BlockVars::from_bound(bound, &format!("amp.block{i}"))?;
                let pb = BlockVars::from_bound(bound, &format!("phase.block{i}"))?;
                amp = encoder_forward(g, amp, Some(mask), &ab, cfg, mode)?;
                phase = encoder_forward(g, phase, None, &pb, cfg, mode)?;
            }
            let amp_pool = g.masked_mean(amp, mask)?;
            let phase_pool = g.mean_axis(phase, 1)?;
            let ea = head(g, bound, amp_pool)?;
            let ep = head(g, bound, phase_pool)?;
            let sum = g.add(ea, ep)?;
            g.scale(sum, 0.5)
        }
    };
    let logits = class_logits(g, bound, embedding)?;
    Ok(ForwardOutput { embedding, logits })
}

pub fn forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    mut mode: Mode,
) -> Result<ForwardOutput> {
    forward_impl(g, bound, cfg, batch, &mut mode, true)
}

/// Lateral-fusion model with the lateral additions skipped: the phase stream
/// on its own.
pub fn forward_phase_only(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    mut mode: Mode,
) -> Result<ForwardOutput> {
    if cfg.fusion != Fusion::Lateral {
        return Err(Error::Config("phase-only forward needs the lateral model".into()));
    }
    forward_impl(g, bound, cfg, batch, &mut mode, false)
}

/// Eval-mode embeddings for a batch, as a `(B, d_embed)` tensor.
pub fn embed(params: &Params, cfg: &ModelConfig, batch: &PaddedBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = forward(&mut g, &bound, cfg, batch, Mode::Eval)?;
    Ok(g.value(out.embedding).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{make_batch, LabelMap};
    use crate::calibration::CalibratedSegment;

    fn tiny(fusion: Fusion) -> ModelConfig {
        ModelConfig {
            channels: 5,
            max_time: 12,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 2,
            d_embed: 6,
            num_classes: 3,
            dropout: 0.0,
            fusion,
            layer_norm_eps: 1e-5,
        }
    }

    fn segs(n: usize, seed: u64) -> Vec<CalibratedSegment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = rng.gen_range(3..9);
                let amp = (0..t * 5).map(|_| rng.gen_range(0.0..2.0)).collect();
                let ph = (0..t * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                CalibratedSegment::new(format!("s{i}"), format!("p{}", i % 3), t, 5, amp, ph).unwrap()
            })
            .collect()
    }

    #[test]
    fn output_shapes() {
        for fusion in [Fusion::Lateral, Fusion::Early, Fusion::Late] {
            let cfg = tiny(fusion);
            let p = init_params(&cfg, 1).unwrap();
            let s = segs(4, 2);
            let batch = make_batch(&s, 12, &LabelMap::from_segments(&s)).unwrap();
            let mut g = Graph::new();
            let bound = p.bind(&mut g, false);
            let out = forward(&mut g, &bound, &cfg, &batch, Mode::Eval).unwrap();
            assert_eq!(g.shape(out.embedding), &[4, 6]);
            assert_eq!(g.shape(out.logits), &[4, 3]);
        }
    }

    #[test]
    fn late_fusion_has_no_lateral_parameters() {
        let p = init_params(&tiny(Fusion::Late), 1).unwrap();
        assert_eq!(p.count_with_prefix("lateral"), 0);
        let p = init_params(&tiny(Fusion::Lateral), 1).unwrap();
        assert!(p.count_with_prefix("lateral") > 0);
    }

    #[test]
    fn geometry_mismatch_is_shape_error() {
        let cfg = tiny(Fusion::Lateral);
        let p = init_params(&cfg, 1).unwrap();
        let s = segs(2, 3);
        let batch = make_batch(&s, 20, &LabelMap::from_segments(&s)).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        assert!(matches!(
            forward(&mut g, &bound, &cfg, &batch, Mode::Eval),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(Fusion::Lateral);
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
