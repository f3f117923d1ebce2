//! Finite-difference fixtures for every differentiable op and the full
//! pretraining loss graph.
#![allow(dead_code)]

use cacon::loss::{batch_loss_on_tape, Temperature, Views};
use cacon::model::{ContrastiveModel, ModelConfig};
use cacon::numerics::{Tape, Tensor, Var};
use cacon::seed;
use rand::Rng;

use super::{grad_check, random_tensor, rel_err};

pub const STEP: f64 = 1e-5;

fn weighted_sum(tape: &mut Tape<f64>, v: Var, w: &Tensor<f64>) -> Var {
    let wv = tape.constant(w.clone());
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p)
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// One random instance of each op, reduced to a scalar through random
/// weights. Returns `(op name, worst relative error)`.
pub fn op_instance_errors(instance: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seed::rng(instance, &[seed::tag("grad-ops")]);
    let mut out = Vec::new();
    let a34 = random_tensor(&mut rng, &[3, 4]);
    let b34 = random_tensor(&mut rng, &[3, 4]);
    let b42 = random_tensor(&mut rng, &[4, 2]);
    let row4 = random_tensor(&mut rng, &[4]);
    let w34 = random_tensor(&mut rng, &[3, 4]);
    let w32 = random_tensor(&mut rng, &[3, 2]);
    let w43 = random_tensor(&mut rng, &[4, 3]);
    let w3 = random_tensor(&mut rng, &[3]);

    out.push((
        "matmul",
        grad_check(&[a34.clone(), b42.clone()], STEP, |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, m, &w32)
        }),
    ));
    out.push((
        "transpose",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let m = t.transpose(v[0]).unwrap();
            weighted_sum(t, m, &w43)
        }),
    ));
    out.push((
        "add",
        grad_check(&[a34.clone(), b34.clone()], STEP, |t, v| {
            let m = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "sub",
        grad_check(&[a34.clone(), b34.clone()], STEP, |t, v| {
            let m = t.sub(v[0], v[1]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "mul",
        grad_check(&[a34.clone(), b34.clone()], STEP, |t, v| {
            let m = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "add_row",
        grad_check(&[a34.clone(), row4.clone()], STEP, |t, v| {
            let m = t.add_row(v[0], v[1]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    let c: f64 = rng.random_range(-2.0..2.0);
    out.push((
        "scale",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let m = t.scale(v[0], c);
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "relu",
        grad_check(&[away_from_zero(a34.clone())], STEP, |t, v| {
            let m = t.relu(v[0]);
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "exp",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let m = t.exp(v[0]);
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "log",
        grad_check(&[a34.map(|x| 1.25 + x * 0.75)], STEP, |t, v| {
            let m = t.log(v[0]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    out.push((
        "l2_normalize_rows",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let m = t.l2_normalize_rows(v[0]).unwrap();
            weighted_sum(t, m, &w34)
        }),
    ));
    let mut mask: Vec<bool> = (0..12).map(|_| rng.random_bool(0.5)).collect();
    for r in 0..3 {
        mask[r * 4 + rng.random_range(0..4)] = true;
    }
    out.push((
        "masked_logsumexp_rows",
        grad_check(&[a34.map(|x| 3.0 * x)], STEP, |t, v| {
            let m = t.masked_logsumexp_rows(v[0], mask.clone()).unwrap();
            weighted_sum(t, m, &w3)
        }),
    ));
    out.push((
        "sum",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let e = t.exp(v[0]);
            t.sum(e)
        }),
    ));
    out.push((
        "mean",
        grad_check(std::slice::from_ref(&a34), STEP, |t, v| {
            let e = t.exp(v[0]);
            t.mean(e)
        }),
    ));
    out
}

/// Worst relative error over every parameter coordinate of a toy
/// encoder/head trained with the contrastive loss (`views` blocks of `batch`).
pub fn full_graph_error(instance: u64, views: Views, batch: usize) -> f64 {
    let mut rng = seed::rng(instance, &[seed::tag("grad-model")]);
    let cfg = ModelConfig {
        encoder_hidden: vec![6],
        d_h: 5,
        d_z: 4,
    };
    let mut model = ContrastiveModel::<f64>::init(8, &cfg, &mut rng).unwrap();
    // keep pre-activations away from the ReLU kink with non-zero biases
    for p in model.params.iter_mut() {
        if p.value.dims().len() == 1 {
            for b in p.value.data_mut() {
                *b = rng.random_range(0.05..0.3);
            }
        }
    }
    let rows = batch * views.count();
    let x = random_tensor(&mut rng, &[rows, 8]);
    let tau = Temperature::new(0.5).unwrap();

    let loss_of = |m: &ContrastiveModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = m.encode_on_tape(&mut tape, &bound, xv).unwrap();
        let z = m.project_on_tape(&mut tape, &bound, h).unwrap();
        let l = batch_loss_on_tape(&mut tape, z, views, tau).unwrap();
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let h = model.encode_on_tape(&mut tape, &bound, xv).unwrap();
    let z = model.project_on_tape(&mut tape, &bound, h).unwrap();
    let l = batch_loss_on_tape(&mut tape, z, views, tau).unwrap();
    let mut grads = tape.backward(l).unwrap();
    let g = model.params.grads(&bound, &mut grads);

    let mut worst: f64 = 0.0;
    let n_params = model.params.len();
    for k in 0..n_params {
        let len = model.params.iter().nth(k).unwrap().value.len();
        for i in 0..len {
            let orig = model.params.iter().nth(k).unwrap().value.data()[i];
            model.params.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig + STEP;
            let up = loss_of(&model);
            model.params.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig - STEP;
            let down = loss_of(&model);
            model.params.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(g.get(k).data()[i], fd));
        }
    }
    worst
}
