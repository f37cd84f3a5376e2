//! Shared helpers for the integration tests: finite-difference gradient
//! checks and the scaled-down training configuration.

#![allow(dead_code)]

use csi_reid::autodiff::{Graph, Var};
use csi_reid::losses::{
    evaluate_with_grads, lmcl_loss, softtriple_loss, LmclConfig, SoftTripleConfig, SoftTripleVariant,
};
use csi_reid::nn::ModelConfig;
use csi_reid::synth::SynthConfig;
use csi_reid::train::{AdamConfig, TrainConfig};
use csi_reid::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

/// `||a - n|| / max(||a||, ||n||)` over one input tensor, with a floor that
/// keeps all-zero gradients from dividing by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of the scalar produced by `build`.
pub fn numeric_gradients(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_EPS;
            let plus = eval(&work);
            work[i].data_mut()[j] = x - FD_EPS;
            let minus = eval(&work);
            work[i].data_mut()[j] = x;
            grad.push((plus - minus) / (2.0 * FD_EPS));
        }
        out.push(grad);
    }
    out
}

/// Largest relative error over all inputs.
pub fn check_gradients(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let analytic = evaluate_with_grads(inputs, |g, v| build(g, v)).expect("analytic gradients");
    let numeric = numeric_gradients(inputs, build);
    analytic
        .grads
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n))
        .fold(0.0, f64::max)
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes to the checked gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for kinks at the origin.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn mask(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; b * t];
    for r in 0..b {
        let len = rng.gen_range(1..=t);
        data[r * t..r * t + len].fill(1.0);
    }
    Tensor::new(&[b, t], data).unwrap()
}

type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// One random instance of the named operation or loss.
pub fn instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let seed: u64 = rng.gen();
    let p = move |g: &mut Graph, v: Var| project(g, v, seed);
    match op {
        "add" | "sub" | "mul" => {
            let out = dims(rng, 3);
            let b: Vec<usize> = out.iter().map(|&d| if rng.gen_bool(0.4) { 1 } else { d }).collect();
            let b = b[rng.gen_range(0..=2)..].to_vec();
            let inputs = vec![rand_tensor(rng, &out, -2.0, 2.0), rand_tensor(rng, &b, -2.0, 2.0)];
            let op = op.to_string();
            (
                inputs,
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    p(g, y)
                }),
            )
        }
        "scale" | "add_scalar" => {
            let c: f64 = rng.gen_range(-3.0..3.0);
            let scale = op == "scale";
            (
                vec![{ let s = dims(rng, 2); rand_tensor(rng, &s, -2.0, 2.0) }],
                Box::new(move |g, v| {
                    let y = if scale { g.scale(v[0], c) } else { g.add_scalar(v[0], c) };
                    p(g, y)
                }),
            )
        }
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let rank = rng.gen_range(0..=2);
            let lead = dims(rng, rank);
            let shared = rng.gen_bool(0.5);
            let mut sa = lead.clone();
            sa.extend([m, k]);
            let mut sb = if shared { vec![] } else { lead };
            sb.extend([k, n]);
            (
                vec![rand_tensor(rng, &sa, -1.0, 1.0), rand_tensor(rng, &sb, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    p(g, y)
                }),
            )
        }
        "permute" => {
            let s = dims(rng, 4);
            let mut axes = vec![0, 1, 2, 3];
            use rand::seq::SliceRandom;
            axes.shuffle(rng);
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.permute(v[0], &axes)?;
                    p(g, y)
                }),
            )
        }
        "transpose" | "reshape" => {
            let s = dims(rng, 3);
            let transpose = op == "transpose";
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = if transpose {
                        g.transpose(v[0])?
                    } else {
                        g.reshape(v[0], &[s[0] * s[1], s[2]])?
                    };
                    p(g, y)
                }),
            )
        }
        "softmax" | "gelu" | "exp" | "l2_normalize" => {
            let s = dims(rng, 3);
            let op = op.to_string();
            (
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "softmax" => g.softmax(v[0]),
                        "gelu" => g.gelu(v[0]),
                        "exp" => g.exp(v[0]),
                        _ => g.l2_normalize(v[0])?,
                    };
                    p(g, y)
                }),
            )
        }
        "relu" => (
            vec![{ let s = dims(rng, 2); rand_away_from_zero(rng, &s) }],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                p(g, y)
            }),
        ),
        "log" | "sqrt" => {
            let log = op == "log";
            (
                vec![{ let s = dims(rng, 2); rand_tensor(rng, &s, 0.2, 3.0) }],
                Box::new(move |g, v| {
                    let y = if log { g.log(v[0]) } else { g.sqrt(v[0]) };
                    p(g, y)
                }),
            )
        }
        "clamp_min" => (
            vec![{ let s = dims(rng, 2); rand_away_from_zero(rng, &s) }],
            Box::new(move |g, v| {
                let y = g.clamp_min(v[0], 0.0);
                p(g, y)
            }),
        ),
        "layer_norm" => {
            let mut s = dims(rng, 2);
            s.push(rng.gen_range(2..=5));
            let d = s[2];
            (
                vec![
                    rand_tensor(rng, &s, -2.0, 2.0),
                    rand_tensor(rng, &[d], 0.5, 1.5),
                    rand_tensor(rng, &[d], -0.5, 0.5),
                ],
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    p(g, y)
                }),
            )
        }
        "masked_fill" => {
            let (b, t) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
            let m = mask(rng, b, t).reshape(&[b, 1, t]).unwrap();
            (
                vec![rand_tensor(rng, &[b, 2, t], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.masked_fill(v[0], &m, -3.0)?;
                    p(g, y)
                }),
            )
        }
        "sum_axis" | "mean_axis" => {
            let s = dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let sum = op == "sum_axis";
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = if sum { g.sum_axis(v[0], axis)? } else { g.mean_axis(v[0], axis)? };
                    p(g, y)
                }),
            )
        }
        "masked_mean" => {
            let (b, t, d) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=3));
            let m = mask(rng, b, t);
            (
                vec![rand_tensor(rng, &[b, t, d], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.masked_mean(v[0], &m)?;
                    p(g, y)
                }),
            )
        }
        "logsumexp_with_const" => {
            let s = dims(rng, 2);
            let include: Vec<bool> = (0..s.iter().product()).map(|_| rng.gen_bool(0.7)).collect();
            let c: f64 = rng.gen_range(-1.0..2.0);
            (
                vec![rand_tensor(rng, &s, -2.0, 2.0)],
                Box::new(move |g, v| {
                    let y = g.logsumexp_with_const(v[0], &include, c)?;
                    p(g, y)
                }),
            )
        }
        "gather" => {
            let s = dims(rng, 2);
            let n: usize = s.iter().product();
            let idx: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..n)).collect();
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.gather(v[0], &idx)?;
                    p(g, y)
                }),
            )
        }
        "cross_entropy" => {
            let (b, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            (
                vec![rand_tensor(rng, &[b, c], -3.0, 3.0)],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            )
        }
        "sum_all" | "mean_all" => {
            let sum = op == "sum_all";
            (
                vec![{ let s = dims(rng, 3); rand_tensor(rng, &s, -1.0, 1.0) }],
                Box::new(move |g, v| {
                    let y = g.mul(v[0], v[0])?;
                    Ok(if sum { g.sum_all(y) } else { g.mean_all(y) })
                }),
            )
        }
        "concat" => {
            let s = dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = rng.gen_range(1..=3);
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s2, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.concat(v[0], v[1], axis)?;
                    p(g, y)
                }),
            )
        }
        "slice" => {
            let s: Vec<usize> = dims(rng, 3).into_iter().map(|d| d + 1).collect();
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            (
                vec![rand_tensor(rng, &s, -1.0, 1.0)],
                Box::new(move |g, v| {
                    let y = g.slice(v[0], axis, start, len)?;
                    p(g, y)
                }),
            )
        }
        "lmcl" => {
            let (b, c, d) = (rng.gen_range(1..=4), rng.gen_range(2..=4), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let cfg = LmclConfig {
                s: rng.gen_range(1.0..30.0),
                m: rng.gen_range(0.0..0.5),
            };
            (
                vec![rand_away_from_zero(rng, &[b, d]), rand_away_from_zero(rng, &[c, d])],
                Box::new(move |g, v| lmcl_loss(g, v[0], v[1], &labels, &cfg)),
            )
        }
        "softtriple" | "softtriple_original" => {
            let (b, c, k, d) = (
                rng.gen_range(1..=4),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(2..=5),
            );
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            // The printed form saturates at -lambda once exp(lambda) dominates
            // its denominator; small lambda keeps the gradient above
            // finite-difference noise.
            let printed = op == "softtriple";
            let cfg = SoftTripleConfig {
                centers_per_class: k,
                sigma: if printed { rng.gen_range(0.5..5.0) } else { rng.gen_range(1.0..20.0) },
                delta: rng.gen_range(0.0..0.1),
                lambda: if printed { rng.gen_range(0.0..2.0) } else { rng.gen_range(1.0..20.0) },
                gamma: rng.gen_range(0.1..1.0),
                variant: if printed {
                    SoftTripleVariant::Printed
                } else {
                    SoftTripleVariant::Original
                },
            };
            (
                vec![rand_away_from_zero(rng, &[b, d]), rand_away_from_zero(rng, &[c, k, d])],
                Box::new(move |g, v| softtriple_loss(g, v[0], v[1], &labels, &cfg)),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 32] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "permute",
    "transpose",
    "reshape",
    "softmax",
    "gelu",
    "exp",
    "l2_normalize",
    "relu",
    "log",
    "sqrt",
    "clamp_min",
    "layer_norm",
    "masked_fill",
    "sum_axis",
    "mean_axis",
    "masked_mean",
    "logsumexp_with_const",
    "gather",
    "cross_entropy",
    "sum_all",
    "mean_all",
    "concat",
    "slice",
    "lmcl",
    "softtriple",
    "softtriple_original",
];

/// Worst relative error of `op` over `INSTANCES` random instances.
pub fn worst_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES)
        .map(|_| {
            let (inputs, build) = instance(op, &mut rng);
            check_gradients(&inputs, build.as_ref())
        })
        .fold(0.0, f64::max)
}

/// Synthetic benchmark used by the end-to-end and ablation checks.
pub fn bench_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_identities: 8,
        segments_per_identity: 40,
        seed,
        ..Default::default()
    }
}

/// Scaled-down model and schedule for single-core CPU runs.
pub fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        max_time: 160,
        train_fraction: 0.625,
        optimizer: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        model: ModelConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            d_embed: 32,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}
