//! Independent scalar oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use cacon::io::config::RunConfig;
use cacon::model::ModelConfig;
use cacon::numerics::{Tape, Tensor, Var};
use cacon::par::Execution;
use cacon::synthdata::SynthSpec;
use rand::Rng;

pub fn random_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Contrastive loss by direct summation of exponentials, no shifting.
/// `views` equal blocks of `rows / views` rows; row `r` is positive with
/// every other row congruent to it modulo the block size.
pub fn brute_anchor_loss(z: &[Vec<f64>], views: usize, r: usize, tau: f64) -> f64 {
    let m = z.len();
    let b = m / views;
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..m {
        if c == r {
            continue;
        }
        let e = (cos(&z[r], &z[c]) / tau).exp();
        den += e;
        if c % b == r % b {
            num += e;
        }
    }
    -(num / den).ln()
}

pub fn brute_batch_loss(z: &[Vec<f64>], views: usize, tau: f64) -> f64 {
    (0..z.len()).map(|r| brute_anchor_loss(z, views, r, tau)).sum::<f64>() / z.len() as f64
}

/// Exhaustive adversarial triplet oracle: enumerates every candidate
/// positive and negative, keeping the first extreme encountered.
pub fn brute_adversarial(classes: &[Vec<Vec<f64>>], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let mut total = 0.0;
    for (t, class) in classes.iter().enumerate() {
        for (s, a) in class.iter().enumerate() {
            let mut best_p: Option<(f64, &Vec<f64>)> = None;
            for (q, p) in class.iter().enumerate() {
                if q == s {
                    continue;
                }
                let dp = d(a, p);
                if best_p.is_none() || dp > best_p.unwrap().0 {
                    best_p = Some((dp, p));
                }
            }
            let mut best_n: Option<(f64, &Vec<f64>)> = None;
            for (u, other) in classes.iter().enumerate() {
                if u == t {
                    continue;
                }
                for n in other {
                    let dn = d(a, n);
                    if best_n.is_none() || dn < best_n.unwrap().0 {
                        best_n = Some((dn, n));
                    }
                }
            }
            let (dp, p) = best_p.unwrap();
            let (dn, n) = best_n.unwrap();
            total += f64::max(0.0, margin + dp - dn) + d(n, p) - dn;
        }
    }
    total
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error between tape gradients and central differences
/// for a scalar graph built by `build` over the leaves `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + step;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - step;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

/// Small, fast configuration for pipeline and CLI tests.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synth = SynthSpec {
        n_subjects: 12,
        images_per_subject: 6,
        image_side: 8,
        latent_dim: 8,
        field_grid: 3,
        ..SynthSpec::default()
    };
    cfg.model = ModelConfig {
        encoder_hidden: vec![32],
        d_h: 16,
        d_z: 8,
    };
    cfg.pipeline.pretrain_epochs = 2;
    cfg.pipeline.pretrain_batch = 16;
    cfg.pipeline.finetune_epochs = 5;
    cfg.pipeline.finetune_batch = 16;
    cfg.pipeline.verification_pairs = 50;
    cfg.optim.pretrain.warmup_epochs = 1;
    cfg.pipeline.execution = Execution::Parallel;
    cfg
}
