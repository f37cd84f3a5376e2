//! Training objectives built on the autodiff graph: large-margin cosine loss,
//! SoftTriple (as printed and in its relaxed-similarity form), softmax
//! cross-entropy and batch-hard triplet loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmclConfig {
    pub s: f64,
    pub m: f64,
}

impl Default for LmclConfig {
    fn default() -> Self {
        Self { s: 30.0, m: 0.35 }
    }
}

impl LmclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!(
                "lmcl needs s > 0 and 0 <= m < 1 (got s={}, m={})",
                self.s, self.m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SoftTripleVariant {
    /// `log[(1 + sum_all exp(-sigma (d - delta))) / (exp(lambda) + sum_neg exp(-sigma d))]`.
    #[default]
    Printed,
    /// Relaxed-similarity softmax with margin `delta`, scale `lambda` and
    /// center temperature `gamma`.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftTripleConfig {
    #[serde(rename = "K")]
    pub centers_per_class: usize,
    pub sigma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub variant: SoftTripleVariant,
}

impl Default for SoftTripleConfig {
    fn default() -> Self {
        Self {
            centers_per_class: 2,
            sigma: 20.0,
            delta: 0.01,
            lambda: 20.0,
            gamma: 0.1,
            variant: SoftTripleVariant::Printed,
        }
    }
}

impl SoftTripleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.centers_per_class == 0 || !(self.sigma > 0.0) || !(self.delta >= 0.0) {
            return Err(Error::Config(
                "softtriple needs K >= 1, sigma > 0 and delta >= 0".into(),
            ));
        }
        if self.variant == SoftTripleVariant::Original && !(self.gamma > 0.0) {
            return Err(Error::Config("softtriple gamma must be positive".into()));
        }
        Ok(())
    }

    /// Learnable centers `(C, K, d_embed)`, uniform in `+-1/sqrt(d_embed)`.
    pub fn init_centers(&self, num_classes: usize, d_embed: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(
            &[num_classes, self.centers_per_class, d_embed],
            1.0 / (d_embed as f64).sqrt(),
            &mut rng,
        )
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch || batch == 0 {
        return Err(Error::shape("labels", &[labels.len()], &[batch]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn matrix_dims(g: &Graph, v: Var, what: &'static str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(what, s, &[0, 0])),
    }
}

/// Cosine similarities between L2-normalised rows: `(B, d) x (C, d) -> (B, C)`.
pub fn cosine_logits(g: &mut Graph, features: Var, class_weights: Var) -> Result<Var> {
    let (_, d) = matrix_dims(g, features, "cosine_logits")?;
    let (_, dw) = matrix_dims(g, class_weights, "cosine_logits")?;
    if d != dw {
        return Err(Error::shape("cosine_logits", g.shape(features), g.shape(class_weights)));
    }
    let f = g.l2_normalize(features)?;
    let w = g.l2_normalize(class_weights)?;
    let wt = g.transpose(w)?;
    g.matmul(f, wt)
}

/// Mean over the batch of `-log softmax(s * (cos - m * onehot))[y]`.
pub fn lmcl_loss(
    g: &mut Graph,
    features: Var,
    class_weights: Var,
    labels: &[usize],
    cfg: &LmclConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (b, _) = matrix_dims(g, features, "lmcl_loss")?;
    let (c, _) = matrix_dims(g, class_weights, "lmcl_loss")?;
    check_labels(labels, b, c)?;
    let cos = cosine_logits(g, features, class_weights)?;
    let mut margin = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        margin.data_mut()[i * c + y] = cfg.m;
    }
    let margin = g.constant(margin);
    let shifted = g.sub(cos, margin)?;
    let logits = g.scale(shifted, cfg.s);
    g.cross_entropy(logits, labels)
}

/// Squared distance between normalised features and normalised centers,
/// `2 - 2 cos`, shaped `(B, C*K)`.
fn center_distances(g: &mut Graph, features: Var, centers: Var) -> Result<(Var, usize, usize)> {
    let (_, d) = matrix_dims(g, features, "softtriple_loss")?;
    let cs = g.shape(centers).to_vec();
    if cs.len() != 3 || cs[2] != d {
        return Err(Error::shape("softtriple_loss", g.shape(features), &cs));
    }
    let (c, k) = (cs[0], cs[1]);
    let flat = g.reshape(centers, &[c * k, d])?;
    let cos = cosine_logits(g, features, flat)?;
    let neg2 = g.scale(cos, -2.0);
    Ok((g.add_scalar(neg2, 2.0), c, k))
}

pub fn softtriple_loss(
    g: &mut Graph,
    features: Var,
    centers: Var,
    labels: &[usize],
    cfg: &SoftTripleConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (b, _) = matrix_dims(g, features, "softtriple_loss")?;
    let (dist, c, k) = center_distances(g, features, centers)?;
    if k != cfg.centers_per_class {
        return Err(Error::Config(format!(
            "centers tensor has K={k}, config says K={}",
            cfg.centers_per_class
        )));
    }
    check_labels(labels, b, c)?;
    match cfg.variant {
        SoftTripleVariant::Printed => {
            let shifted = g.add_scalar(dist, -cfg.delta);
            let num_terms = g.scale(shifted, -cfg.sigma);
            let num = g.logsumexp_with_const(num_terms, &vec![true; b * c * k], 0.0)?;
            let den_terms = g.scale(dist, -cfg.sigma);
            let negatives: Vec<bool> = labels
                .iter()
                .flat_map(|&y| (0..c * k).map(move |j| j / k != y))
                .collect();
            let den = g.logsumexp_with_const(den_terms, &negatives, cfg.lambda)?;
            let per_sample = g.sub(num, den)?;
            Ok(g.mean_all(per_sample))
        }
        SoftTripleVariant::Original => {
            // sim = 1 - d/2 = cos
            let half = g.scale(dist, -0.5);
            let sim = g.add_scalar(half, 1.0);
            let sim = g.reshape(sim, &[b, c, k])?;
            let tempered = g.scale(sim, 1.0 / cfg.gamma);
            let assign = g.softmax(tempered);
            let weighted = g.mul(assign, sim)?;
            let relaxed = g.sum_axis(weighted, 2)?;
            let mut margin = Tensor::zeros(&[b, c]);
            for (i, &y) in labels.iter().enumerate() {
                margin.data_mut()[i * c + y] = cfg.delta;
            }
            let margin = g.constant(margin);
            let shifted = g.sub(relaxed, margin)?;
            let logits = g.scale(shifted, cfg.lambda);
            g.cross_entropy(logits, labels)
        }
    }
}

pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Hardest positive / negative per anchor, as flat indices into the `B x B`
/// distance matrix. Anchors without a positive or a negative are skipped.
pub fn mine_batch_hard(dist: &Tensor, labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let b = labels.len();
    let mut out = Vec::new();
    for i in 0..b {
        let row = dist.row(i);
        let pos = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x)));
        let neg = (0..b)
            .filter(|&j| labels[j] != labels[i])
            .min_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
        if let (Some(p), Some(n)) = (pos, neg) {
            out.push((i, p, n));
        }
    }
    out
}

/// Euclidean distances between L2-normalised rows, `(B, B)`.
pub fn pairwise_distances(g: &mut Graph, embeddings: Var) -> Result<Var> {
    let e = g.l2_normalize(embeddings)?;
    let et = g.transpose(e)?;
    let gram = g.matmul(e, et)?;
    let neg2 = g.scale(gram, -2.0);
    let sq = g.add_scalar(neg2, 2.0);
    let sq = g.clamp_min(sq, 1e-12);
    Ok(g.sqrt(sq))
}

/// Batch-hard triplet loss `mean(max(0, d(a,p) - d(a,n) + margin))`.
pub fn triplet_loss(g: &mut Graph, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (b, _) = matrix_dims(g, embeddings, "triplet_loss")?;
    check_labels(labels, b, usize::MAX)?;
    let dist = pairwise_distances(g, embeddings)?;
    let triplets = mine_batch_hard(g.value(dist), labels);
    if triplets.is_empty() {
        log::warn!("batch of {b} has no valid (anchor, positive, negative) triplet");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pos: Vec<usize> = triplets.iter().map(|&(i, p, _)| i * b + p).collect();
    let neg: Vec<usize> = triplets.iter().map(|&(i, _, n)| i * b + n).collect();
    let dp = g.gather(dist, &pos)?;
    let dn = g.gather(dist, &neg)?;
    let diff = g.sub(dp, dn)?;
    let hinge = g.add_scalar(diff, margin);
    let hinge = g.relu(hinge);
    Ok(g.mean_all(hinge))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClsLoss {
    #[serde(alias = "ce")]
    CrossEntropy,
    #[default]
    Lmcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricLoss {
    Triplet,
    #[default]
    Softtriple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub cls_loss: ClsLoss,
    pub metric_loss: MetricLoss,
    pub lmcl: LmclConfig,
    pub softtriple: SoftTripleConfig,
    pub triplet_margin: f64,
    /// (classification, metric)
    pub weights: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_loss: ClsLoss::Lmcl,
            metric_loss: MetricLoss::Softtriple,
            lmcl: LmclConfig::default(),
            softtriple: SoftTripleConfig::default(),
            triplet_margin: 0.3,
            weights: (1.0, 1.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weights.0 >= 0.0 && self.weights.1 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.lmcl.validate()?;
        self.softtriple.validate()
    }
}

/// Graph inputs of the combined objective.
pub struct ObjectiveInputs<'a> {
    pub logits: Var,
    pub embedding: Var,
    pub class_weights: Var,
    /// Required when the metric loss is SoftTriple.
    pub centers: Option<Var>,
    pub labels: &'a [usize],
}

pub struct ObjectiveTerms {
    pub total: Var,
    pub classification: Var,
    pub metric: Var,
}

/// `w1 * classification + w2 * metric`.
pub fn combined_objective(g: &mut Graph, x: &ObjectiveInputs, cfg: &LossConfig) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let classification = match cfg.cls_loss {
        ClsLoss::CrossEntropy => cross_entropy_loss(g, x.logits, x.labels)?,
        ClsLoss::Lmcl => lmcl_loss(g, x.embedding, x.class_weights, x.labels, &cfg.lmcl)?,
    };
    let metric = match cfg.metric_loss {
        MetricLoss::Triplet => triplet_loss(g, x.embedding, x.labels, cfg.triplet_margin)?,
        MetricLoss::Softtriple => {
            let centers = x
                .centers
                .ok_or_else(|| Error::Config("softtriple loss needs center parameters".into()))?;
            softtriple_loss(g, x.embedding, centers, x.labels, &cfg.softtriple)?
        }
    };
    let a = g.scale(classification, cfg.weights.0);
    let b = g.scale(metric, cfg.weights.1);
    let total = g.add(a, b)?;
    Ok(ObjectiveTerms {
        total,
        classification,
        metric,
    })
}

/// Loss value and the gradients with respect to each input tensor.
#[derive(Debug, Clone)]
pub struct LossWithGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates `build` on fresh trainable leaves for `inputs` and backpropagates.
pub fn evaluate_with_grads(
    inputs: &[Tensor],
    build: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<LossWithGrads> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(LossWithGrads {
        loss: g.value(loss).item(),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn lmcl(f: &Tensor, w: &Tensor, y: &[usize], cfg: LmclConfig) -> f64 {
        evaluate_with_grads(&[f.clone(), w.clone()], |g, v| lmcl_loss(g, v[0], v[1], y, &cfg))
            .unwrap()
            .loss
    }

    #[test]
    fn lmcl_worked_value() {
        let f = t(&[1, 2], &[1.0, 0.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let loss = lmcl(&f, &w, &[0], LmclConfig { s: 1.0, m: 0.0 });
        let e = std::f64::consts::E;
        assert!((loss + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn lmcl_scale_invariance_and_margin_monotonicity() {
        let f = t(&[2, 3], &[0.3, -1.0, 2.0, 1.5, 0.2, -0.7]);
        let w = t(&[3, 3], &[1.0, 0.1, 0.0, -0.2, 1.0, 0.4, 0.3, 0.3, -1.0]);
        let y = [2, 0];
        let base = lmcl(&f, &w, &y, LmclConfig::default());
        let mut scaled = f.clone();
        scaled.data_mut()[..3].iter_mut().for_each(|v| *v *= 7.5);
        assert!((lmcl(&scaled, &w, &y, LmclConfig::default()) - base).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.2, 0.35, 0.5, 0.9] {
            let l = lmcl(&f, &w, &y, LmclConfig { s: 30.0, m });
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn lmcl_rejects_zero_rows() {
        let f = t(&[1, 2], &[0.0, 0.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let r = evaluate_with_grads(&[f, w], |g, v| lmcl_loss(g, v[0], v[1], &[0], &LmclConfig::default()));
        assert!(matches!(r, Err(Error::Normalization(_))));
    }

    #[test]
    fn softtriple_worked_values() {
        let cfg = SoftTripleConfig {
            centers_per_class: 1,
            sigma: 1.0,
            delta: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let f = t(&[1, 2], &[1.0, 0.0]);
        let centers = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let r = evaluate_with_grads(&[f.clone(), centers], |g, v| softtriple_loss(g, v[0], v[1], &[0], &cfg)).unwrap();
        let expected = ((1.0 + 1.0 + (-2.0f64).exp()) / (1.0 + (-2.0f64).exp())).ln();
        assert!((r.loss - expected).abs() < 1e-12);
        // log(2.1353 / 1.1353) = 0.63170; the four-digit figure 0.6318 rounds up.
        assert!((r.loss - 0.6318).abs() < 2e-4);

        // single class, single center: no negatives
        let cfg1 = SoftTripleConfig {
            sigma: 3.0,
            delta: 0.1,
            lambda: 0.5,
            ..cfg
        };
        let f = t(&[1, 2], &[0.6, 0.8]);
        let c = t(&[1, 1, 2], &[1.0, 0.0]);
        let d = 2.0 - 2.0 * 0.6;
        let r = evaluate_with_grads(&[f, c], |g, v| softtriple_loss(g, v[0], v[1], &[0], &cfg1)).unwrap();
        let expected = ((1.0 + (-3.0 * (d - 0.1f64)).exp()) / 0.5f64.exp()).ln();
        assert!((r.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let r = evaluate_with_grads(&[t(&[1, 2], &[0.0, 0.0])], |g, v| cross_entropy_loss(g, v[0], &[1])).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.grads[0].data(), &[0.5, -0.5]);
        let r = evaluate_with_grads(&[t(&[1, 2], &[10.0, -10.0])], |g, v| cross_entropy_loss(g, v[0], &[0])).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((r.loss - expected).abs() < 1e-20);
        assert!((r.loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn triplet_edge_cases() {
        let same = t(&[4, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let r = evaluate_with_grads(&[same], |g, v| triplet_loss(g, v[0], &[0, 0, 1, 1], 0.3)).unwrap();
        assert!((r.loss - 0.3).abs() < 1e-12);

        // positives coincide, negatives orthogonal (distance sqrt(2) > margin)
        let sep = t(&[4, 2], &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]);
        let r = evaluate_with_grads(&[sep], |g, v| triplet_loss(g, v[0], &[0, 0, 1, 1], 0.3)).unwrap();
        assert_eq!(r.loss, 0.0);

        let lonely = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let r = evaluate_with_grads(&[lonely], |g, v| triplet_loss(g, v[0], &[0, 1], 0.3)).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn combined_weights_select_terms() {
        let emb = t(&[4, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.1, 0.9, -0.2, 0.3, 0.0, 0.4, -0.8]);
        let w = t(&[2, 3], &[1.0, 0.5, -0.2, -0.3, 0.8, 0.1]);
        let centers = SoftTripleConfig::default().init_centers(2, 3, 1);
        let labels = [0, 1, 0, 1];
        let run = |weights: (f64, f64)| {
            let cfg = LossConfig {
                weights,
                ..Default::default()
            };
            let mut g = Graph::new();
            let e = g.param(emb.clone());
            let cw = g.param(w.clone());
            let c = g.param(centers.clone());
            let logits = {
                let wt = g.transpose(cw).unwrap();
                g.matmul(e, wt).unwrap()
            };
            let x = ObjectiveInputs {
                logits,
                embedding: e,
                class_weights: cw,
                centers: Some(c),
                labels: &labels,
            };
            let terms = combined_objective(&mut g, &x, &cfg).unwrap();
            (
                g.value(terms.total).item(),
                g.value(terms.classification).item(),
                g.value(terms.metric).item(),
            )
        };
        let (t10, c, _) = run((1.0, 0.0));
        assert_eq!(t10, c);
        let (t01, _, m) = run((0.0, 1.0));
        assert_eq!(t01, m);
        let (t11, c, m) = run((1.0, 1.0));
        assert_eq!(t11, c + m);
    }
}
