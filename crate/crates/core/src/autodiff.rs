//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! analytic gradients into every node that (transitively) depends on a leaf
//! created with `requires_grad`.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_map, broadcast_shape, contiguous_strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute {
        a: Var,
        /// Source flat index of each output element.
        gather: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    MaskedFill {
        a: Var,
        keep: Vec<bool>,
    },
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
        t: usize,
        d: usize,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
    },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin {
        a: Var,
        min: f64,
    },
    LogSumExp {
        a: Var,
        include: Vec<bool>,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumAll(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Slice {
        a: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len_out: usize,
        inner: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover the (m x k), (k x n) and (m x n) extents
    // described by the given strides; callers pass exact sub-slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, if the node took part in a backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"))
    }

    fn binary_maps(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, sa, sb))?;
        let map_a = (sa != out.as_slice()).then(|| broadcast_map(sa, &out));
        let map_b = (sb != out.as_slice()).then(|| broadcast_map(sb, &out));
        Ok((out, map_a, map_b))
    }

    fn zip_values(
        &self,
        a: Var,
        b: Var,
        out: &[usize],
        map_a: &Option<Vec<usize>>,
        map_b: &Option<Vec<usize>>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n: usize = out.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = map_a.as_ref().map_or_else(|| da[i], |m| da[m[i]]);
                let y = map_b.as_ref().map_or_else(|| db[i], |m| db[m[i]]);
                f(x, y)
            })
            .collect();
        Tensor::new(out, data).expect("broadcast shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary_maps("add", a, b)?;
        let v = self.zip_values(a, b, &out, &map_a, &map_b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b, map_a, map_b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary_maps("sub", a, b)?;
        let v = self.zip_values(a, b, &out, &map_a, &map_b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b, map_a, map_b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, map_a, map_b) = self.binary_maps("mul", a, b)?;
        let v = self.zip_values(a, b, &out, &map_a, &map_b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b, map_a, map_b }, &[a, b]))
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `(..., m, k) x (k, n)` with a shared right operand, or
    /// `(..., m, k) x (..., k, n)` with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..batch {
                let bs = if shared_b { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &db[bs..bs + k * n],
                    (n, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a, b],
        ))
    }

    /// Reorders axes; `axes[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", &sa, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let in_strides = contiguous_strides(&sa);
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let n: usize = sa.iter().product();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; sa.len()];
        let mut flat = 0usize;
        for _ in 0..n {
            gather.push(flat);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                flat += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                flat -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let src = self.value(a).data();
        let v = Tensor::new(&out_shape, gather.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(v, Op::Permute { a, gather }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let w = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let v = Tensor::new(t.shape(), data).unwrap();
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Layer normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let w = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / w;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(&sx, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Replaces entries where the broadcast `mask` is zero with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, mask.shape()) {
            Some(s) if s == sa => {}
            _ => return Err(Error::shape("masked_fill", &sa, mask.shape())),
        }
        let map = broadcast_map(mask.shape(), &sa);
        let keep: Vec<bool> = map.iter().map(|&i| mask.data()[i] != 0.0).collect();
        let src = self.value(a).data();
        let data = src
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        let v = Tensor::new(&sa, data)?;
        Ok(self.push(v, Op::MaskedFill { a, keep }, &[a]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape("sum_axis", &sa, &[axis]));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::SumAxis { a, outer, len, inner }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Mean over the valid time positions of `x: (B, T, d)` given a 0/1 `mask: (B, T)`.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || mask.shape() != &sx[..2] {
            return Err(Error::shape("masked_mean", &sx, mask.shape()));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mut weights = vec![0.0; b * t];
        for r in 0..b {
            let m = &mask.data()[r * t..(r + 1) * t];
            let count = m.iter().filter(|&&v| v != 0.0).count();
            if count == 0 {
                return Err(Error::DegenerateMask { row: r });
            }
            for (j, &v) in m.iter().enumerate() {
                if v != 0.0 {
                    weights[r * t + j] = 1.0 / count as f64;
                }
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..t {
                let w = weights[r * t + j];
                if w != 0.0 {
                    let row = &src[(r * t + j) * d..(r * t + j + 1) * d];
                    for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                        *o += w * v;
                    }
                }
            }
        }
        let v = Tensor::new(&[b, d], out)?;
        Ok(self.push(v, Op::MaskedMean { x, weights, t, d }, &[x]))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / w.max(1));
        for (r, row) in data.chunks_mut(w).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Normalization(format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::L2Normalize { a, norms }, &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let v = self.map_unary(a, |x| x.max(min));
        self.push(v, Op::ClampMin { a, min }, &[a])
    }

    /// `log(exp(c) + sum of exp(x) over included entries)` along the last
    /// axis. `include` has the same shape as `a`.
    pub fn logsumexp_with_const(&mut self, a: Var, include: &[bool], c: f64) -> Result<Var> {
        let t = self.value(a);
        if include.len() != t.numel() || t.rank() == 0 {
            return Err(Error::shape("logsumexp", t.shape(), &[include.len()]));
        }
        let w = *t.shape().last().unwrap();
        let out: Vec<f64> = t
            .data()
            .chunks(w)
            .zip(include.chunks(w))
            .map(|(row, inc)| {
                let max = row
                    .iter()
                    .zip(inc)
                    .filter(|(_, &i)| i)
                    .map(|(&v, _)| v)
                    .fold(c, f64::max);
                let sum = (c - max).exp()
                    + row
                        .iter()
                        .zip(inc)
                        .filter(|(_, &i)| i)
                        .map(|(&v, _)| (v - max).exp())
                        .sum::<f64>();
                max + sum.ln()
            })
            .collect();
        let shape = &t.shape()[..t.rank() - 1];
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::LogSumExp {
                a,
                include: include.to_vec(),
            },
            &[a],
        ))
    }

    /// Picks flat elements of `a` into a 1-D tensor.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::shape("gather", t.shape(), &[bad]));
        }
        let v = Tensor::new(&[index.len()], index.iter().map(|&i| t.data()[i]).collect())?;
        Ok(self.push(
            v,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// Mean softmax cross-entropy of `logits: (B, C)` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let (arg, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            // ln(1 + rest) keeps full precision when the label holds the maximum.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            loss += rest.ln_1p() + (max - row[y]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let v = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && (0..sa.len()).all(|i| i == axis || sa[i] == sb[i]);
        if !compatible {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner_a: usize = sa[axis..].iter().product();
        let inner_b: usize = sb[axis..].iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * inner_a..(o + 1) * inner_a]);
            out.extend_from_slice(&db[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            },
            &[a, b],
        ))
    }

    /// `a[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape("slice", &sa, &[axis, start, len]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let len_in = sa[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Slice {
                a,
                outer,
                len_in,
                start,
                len_out: len,
                inner,
            },
            &[a],
        ))
    }

    /// Backpropagates from a single-element node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; n]);
        f(grad, &node.value);
    }

    fn accumulate_mapped(&mut self, v: Var, map: &Option<Vec<usize>>, contrib: impl Fn(usize) -> f64, n_out: usize) {
        self.accumulate(v, |ga, _| match map {
            None => ga.iter_mut().enumerate().for_each(|(i, x)| *x += contrib(i)),
            Some(m) => (0..n_out).for_each(|i| ga[m[i]] += contrib(i)),
        });
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out = self.nodes[i].value.data().to_vec();
        match op {
            Op::Leaf => {}
            Op::Add { a, b, map_a, map_b } => {
                self.accumulate_mapped(*a, map_a, |j| g[j], g.len());
                self.accumulate_mapped(*b, map_b, |j| g[j], g.len());
            }
            Op::Sub { a, b, map_a, map_b } => {
                self.accumulate_mapped(*a, map_a, |j| g[j], g.len());
                self.accumulate_mapped(*b, map_b, |j| -g[j], g.len());
            }
            Op::Mul { a, b, map_a, map_b } => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                let at = |m: &Option<Vec<usize>>, v: &[f64], j: usize| m.as_ref().map_or_else(|| v[j], |m| v[m[j]]);
                self.accumulate_mapped(*a, map_a, |j| g[j] * at(map_b, &vb, j), g.len());
                self.accumulate_mapped(*b, map_b, |j| g[j] * at(map_a, &va, j), g.len());
            }
            Op::Scale(a, c) => self.accumulate(*a, |ga, _| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(*a, |ga, _| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
            }),
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                self.accumulate(a, |ga, _| {
                    for bi in 0..batch {
                        let bs = if shared_b { 0 } else { bi * k * n };
                        // dA = dC B^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &vb[bs..bs + k * n],
                            (1, n),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.accumulate(b, |gb, _| {
                    for bi in 0..batch {
                        let bs = if shared_b { 0 } else { bi * k * n };
                        // dB = A^T dC
                        gemm(
                            k,
                            m,
                            n,
                            &va[bi * m * k..(bi + 1) * m * k],
                            (1, k),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &mut gb[bs..bs + k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Permute { a, gather } => self.accumulate(*a, |ga, _| {
                for (j, &src) in gather.iter().enumerate() {
                    ga[src] += g[j];
                }
            }),
            Op::Softmax(a) => self.accumulate(*a, |ga, v| {
                let w = *v.shape().last().unwrap_or(&1);
                for ((gr, yr), dr) in g.chunks(w).zip(out.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..w {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = rstd.len().max(1);
                let w = xhat.len() / w;
                let gv = self.value(*gain).data().to_vec();
                self.accumulate(*gain, |gg, _| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(*bias, |gb, _| {
                    for gr in g.chunks(w) {
                        for j in 0..w {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.accumulate(*x, |gx, _| {
                    for (r, ((gr, hr), dr)) in g
                        .chunks(w)
                        .zip(xhat.chunks(w))
                        .zip(gx.chunks_mut(w))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / w as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            dr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(a) => self.accumulate(*a, |ga, v| {
                for ((d, &x), &gy) in ga.iter_mut().zip(v.data()).zip(g) {
                    let inner = GELU_C * (x + GELU_A * x * x * x);
                    let th = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += gy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner);
                }
            }),
            Op::Relu(a) => self.accumulate(*a, |ga, v| {
                for ((d, &x), &gy) in ga.iter_mut().zip(v.data()).zip(g) {
                    if x > 0.0 {
                        *d += gy;
                    }
                }
            }),
            Op::MaskedFill { a, keep } => self.accumulate(*a, |ga, _| {
                for ((d, &k), &gy) in ga.iter_mut().zip(keep).zip(g) {
                    if k {
                        *d += gy;
                    }
                }
            }),
            &Op::SumAxis { a, outer, len, inner } => self.accumulate(a, |ga, _| {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for j in 0..inner {
                            ga[base + j] += g[o * inner + j];
                        }
                    }
                }
            }),
            Op::MaskedMean { x, weights, t, d } => self.accumulate(*x, |gx, _| {
                for (bt, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        let r = bt / t;
                        for j in 0..*d {
                            gx[bt * d + j] += w * g[r * d + j];
                        }
                    }
                }
            }),
            Op::L2Normalize { a, norms } => self.accumulate(*a, |ga, _| {
                let w = out.len() / norms.len();
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &out[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..w {
                        ga[r * w + j] += (gr[j] - y[j] * dot) / nrm;
                    }
                }
            }),
            Op::Exp(a) => self.accumulate(*a, |ga, _| {
                for ((d, &y), &gy) in ga.iter_mut().zip(&out).zip(g) {
                    *d += gy * y;
                }
            }),
            Op::Log(a) => self.accumulate(*a, |ga, v| {
                for ((d, &x), &gy) in ga.iter_mut().zip(v.data()).zip(g) {
                    *d += gy / x;
                }
            }),
            Op::Sqrt(a) => self.accumulate(*a, |ga, _| {
                for ((d, &y), &gy) in ga.iter_mut().zip(&out).zip(g) {
                    *d += gy * 0.5 / y;
                }
            }),
            Op::ClampMin { a, min } => self.accumulate(*a, |ga, v| {
                for ((d, &x), &gy) in ga.iter_mut().zip(v.data()).zip(g) {
                    if x > *min {
                        *d += gy;
                    }
                }
            }),
            Op::LogSumExp { a, include } => self.accumulate(*a, |ga, v| {
                let w = include.len() / out.len();
                for (r, &lse) in out.iter().enumerate() {
                    for j in r * w..(r + 1) * w {
                        if include[j] {
                            ga[j] += g[r] * (v.data()[j] - lse).exp();
                        }
                    }
                }
            }),
            Op::Gather { a, index } => self.accumulate(*a, |ga, _| {
                for (j, &src) in index.iter().enumerate() {
                    ga[src] += g[j];
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => self.accumulate(*logits, |gl, _| {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }),
            Op::SumAll(a) => self.accumulate(*a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            } => {
                let stride = inner_a + inner_b;
                self.accumulate(a, |ga, _| {
                    for o in 0..outer {
                        for j in 0..inner_a {
                            ga[o * inner_a + j] += g[o * stride + j];
                        }
                    }
                });
                self.accumulate(b, |gb, _| {
                    for o in 0..outer {
                        for j in 0..inner_b {
                            gb[o * inner_b + j] += g[o * stride + inner_a + j];
                        }
                    }
                });
            }
            &Op::Slice {
                a,
                outer,
                len_in,
                start,
                len_out,
                inner,
            } => self.accumulate(a, |ga, _| {
                for o in 0..outer {
                    let dst = (o * len_in + start) * inner;
                    let src = o * len_out * inner;
                    for j in 0..len_out * inner {
                        ga[dst + j] += g[src + j];
                    }
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_contract() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let bad = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.matmul(a, bad).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2, 4]"));
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares_is_two_x() {
        let mut g = Graph::new();
        let xs = [0.5, -1.25, 3.0, 0.0];
        let x = g.param(t(&[4], &xs));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.data().iter().zip(xs) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let s = g.softmax(a);
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_fill_negative_infinity_zeros_softmax_weights() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 3], &[0.3, 0.1, 0.2]));
        let mask = t(&[1, 3], &[1.0, 0.0, 1.0]);
        let f = g.masked_fill(a, &mask, f64::NEG_INFINITY).unwrap();
        let s = g.softmax(f);
        assert_eq!(g.value(s).data()[1], 0.0);
    }

    #[test]
    fn zero_norm_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(g.l2_normalize(a), Err(Error::Normalization(_))));
    }

    #[test]
    fn degenerate_mask_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 3]));
        let mask = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(g.masked_mean(x, &mask), Err(Error::DegenerateMask { row: 1 })));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let v = g.value(p).clone();
        let src = g.value(a).clone();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(v.get(&[k, i, j]), src.get(&[i, j, k]));
                }
            }
        }
    }
}
