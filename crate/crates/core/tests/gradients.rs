mod common;

use cacon::loss::Views;
use cacon::numerics::{Tape, Tensor};
use cacon::seed;
use common::grad::{full_graph_error, op_instance_errors};
use common::random_tensor;

#[test]
fn every_op_matches_central_differences() {
    for instance in 0..20 {
        for (op, err) in op_instance_errors(instance) {
            assert!(err < 1e-4, "{op} instance {instance}: relative error {err:e}");
        }
    }
}

#[test]
fn triplet_loss_graph_matches_central_differences() {
    for instance in 0..5 {
        let err = full_graph_error(instance, Views::Triplet, 3);
        assert!(err < 1e-3, "instance {instance}: {err:e}");
    }
}

#[test]
fn pair_loss_graph_matches_central_differences() {
    let err = full_graph_error(7, Views::Pair, 4);
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn matmul_sum_gradient_example() {
    let mut rng = seed::rng(11, &[]);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let err = common::grad_check(&[a, b], 1e-3, |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        t.sum(m)
    });
    assert!(err < 1e-4);
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = seed::rng(3, &[]);
    let x = random_tensor(&mut rng, &[2, 3]);
    let w1 = random_tensor(&mut rng, &[2, 3]);
    let w2 = random_tensor(&mut rng, &[2, 3]);
    let (a, b) = (0.7, -1.3);

    let grad = |ca: f64, cb: f64| -> Tensor<f64> {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let e = t.exp(xv);
        let c1 = t.constant(w1.clone());
        let f = t.mul(e, c1).unwrap();
        let f = t.sum(f);
        let r = t.relu(xv);
        let c2 = t.constant(w2.clone());
        let g = t.mul(r, c2).unwrap();
        let g = t.sum(g);
        let fa = t.scale(f, ca);
        let gb = t.scale(g, cb);
        let root = t.add(fa, gb).unwrap();
        t.backward(root).unwrap().wrt(xv)
    };
    let combined = grad(a, b);
    let gf = grad(1.0, 0.0);
    let gg = grad(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = seed::rng(5, &[]);
        let x = random_tensor(&mut rng, &[4, 3]);
        let mut t = Tape::new();
        let xv = t.param(x);
        let n = t.l2_normalize_rows(xv).unwrap();
        let nt = t.transpose(n).unwrap();
        let s = t.matmul(n, nt).unwrap();
        let l = t.masked_logsumexp_rows(s, vec![true; 16]).unwrap();
        let root = t.mean(l);
        t.backward(root).unwrap().wrt(xv).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
