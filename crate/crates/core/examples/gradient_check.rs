//! Compares reverse-mode gradients of a loss with central differences.
//!
//! `cargo run --release --example gradient_check`

use csi_reid::autodiff::{Graph, Var};
use csi_reid::losses::{evaluate_with_grads, lmcl_loss, softtriple_loss, LmclConfig, SoftTripleConfig, SoftTripleVariant};
use csi_reid::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn max_relative_error(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    const EPS: f64 = 1e-5;
    let analytic = evaluate_with_grads(inputs, |g, v| build(g, v))?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.grads.iter().enumerate() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + EPS;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - EPS;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * EPS);
            diff += (grad.data()[j] - numeric).powi(2);
            norm += numeric.powi(2);
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-8));
    }
    Ok(worst)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let features = Tensor::from_fn(&[4, 6], |_| rng.gen_range(-1.0..1.0));
    let classes = Tensor::from_fn(&[3, 6], |_| rng.gen_range(-1.0..1.0));
    let centers = Tensor::from_fn(&[3, 2, 6], |_| rng.gen_range(-1.0..1.0));
    let labels = [0, 1, 2, 1];

    let lmcl = LmclConfig::default();
    let err = max_relative_error(&[features.clone(), classes], &|g, v| lmcl_loss(g, v[0], v[1], &labels, &lmcl))?;
    println!("lmcl (s={}, m={}): {err:.2e}", lmcl.s, lmcl.m);
    for variant in [SoftTripleVariant::Printed, SoftTripleVariant::Original] {
        let cfg = SoftTripleConfig {
            lambda: 2.0,
            sigma: 5.0,
            variant,
            ..Default::default()
        };
        let err = max_relative_error(&[features.clone(), centers.clone()], &|g, v| {
            softtriple_loss(g, v[0], v[1], &labels, &cfg)
        })?;
        println!("softtriple {variant:?}: {err:.2e}");
    }
    Ok(())
}
