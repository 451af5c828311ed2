use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{gradcheck, random_tensor, rel_err, FD_STEP};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::new();
    let i2 = g.input(Tensor::eye(2));
    let m = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.input(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let m2 = g.input(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = g.matmul(p, m2).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 2], 1.0);
    // gradient of sum(A·B)
    let err = gradcheck(
        &[a, b],
        |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c)
        },
        1e-3,
    );
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn matmul_nt_and_bmm_gradients() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[5, 4], 1.0);
    let err = gradcheck(&[a, b], |g, v| g.matmul_nt(v[0], v[1]).unwrap(), 1e-3);
    assert!(err < 1e-6, "{err}");

    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[2, 4, 5], 1.0);
    let err = gradcheck(&[a, b], |g, v| g.bmm(v[0], v[1]).unwrap(), 1e-3);
    assert!(err < 1e-6, "{err}");

    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[2, 6, 4], 1.0);
    let err = gradcheck(&[a, b], |g, v| g.bmm_nt(v[0], v[1]).unwrap(), 1e-3);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn sigmoid_and_tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![0.0]));
    let s = g.sigmoid(x).unwrap();
    let t = g.tanh(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(g.value(t).data()[0], 0.0);

    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(x).unwrap().data()[0];
    let f = |v: f64| 1.0 / (1.0 + (-v).exp());
    let fd = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
    assert!((analytic - 0.25).abs() < 1e-8);
    assert!((fd - 0.25).abs() < 1e-8);
}

#[test]
fn unary_gradients() {
    let mut r = rng(3);
    for op in [
        UnaryOp::Neg,
        UnaryOp::Tanh,
        UnaryOp::Gelu,
        UnaryOp::Sigmoid,
        UnaryOp::Exp,
        UnaryOp::Square,
    ] {
        let x = random_tensor(&mut r, &[3, 5], 2.0);
        let err = gradcheck(&[x], |g, v| g.unary(op, v[0]).unwrap(), 1e-3);
        assert!(err < 1e-6, "{op:?}: {err}");
    }
    // relu and log away from their kink / boundary
    let x = Tensor::vector(vec![-1.5, -0.3, 0.2, 0.9, 2.0]);
    let err = gradcheck(&[x], |g, v| g.relu(v[0]).unwrap(), 1e-3);
    assert!(err < 1e-6, "relu: {err}");
    let x = Tensor::vector(vec![0.1, 0.5, 1.0, 3.0]);
    let err = gradcheck(&[x], |g, v| g.log(v[0]).unwrap(), 1e-3);
    assert!(err < 1e-6, "log: {err}");
}

#[test]
fn binary_gradients_with_scalar_broadcast() {
    let mut r = rng(4);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
        let a = random_tensor(&mut r, &[4, 3], 1.0);
        let b = random_tensor(&mut r, &[4, 3], 1.0);
        let s = random_tensor(&mut r, &[1], 1.0);
        let err = gradcheck(&[a.clone(), b], |g, v| g.binary(op, v[0], v[1]).unwrap(), 1e-3);
        assert!(err < 1e-6, "{op:?} same: {err}");
        let err = gradcheck(&[s.clone(), a.clone()], |g, v| g.binary(op, v[0], v[1]).unwrap(), 1e-3);
        assert!(err < 1e-6, "{op:?} left scalar: {err}");
        let err = gradcheck(&[a, s], |g, v| g.binary(op, v[0], v[1]).unwrap(), 1e-3);
        assert!(err < 1e-6, "{op:?} right scalar: {err}");
    }
}

#[test]
fn bias_affine_and_shape_op_gradients() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[4], 1.0);
    let err = gradcheck(&[x.clone(), b], |g, v| g.add_bias(v[0], v[1]).unwrap(), 1e-3);
    assert!(err < 1e-6, "add_bias {err}");
    let err = gradcheck(&[x.clone()], |g, v| g.affine(v[0], -2.5, 0.75), 1e-3);
    assert!(err < 1e-6, "affine {err}");
    let err = gradcheck(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap(), 1e-3);
    assert!(err < 1e-6, "permute {err}");
    let err = gradcheck(&[x.clone()], |g, v| g.reshape(v[0], vec![6, 4]).unwrap(), 1e-3);
    assert!(err < 1e-6, "reshape {err}");
    let err = gradcheck(&[x.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap(), 1e-3);
    assert!(err < 1e-6, "narrow {err}");
    for axis in 0..3 {
        let err = gradcheck(&[x.clone()], |g, v| g.sum_axis(v[0], axis).unwrap(), 1e-3);
        assert!(err < 1e-6, "sum_axis {axis}: {err}");
    }
    let y = random_tensor(&mut r, &[2, 5, 4], 1.0);
    let err = gradcheck(&[x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap(), 1e-3);
    assert!(err < 1e-6, "concat {err}");
    let err = gradcheck(&[x], |g, v| g.mean(v[0]).unwrap(), 1e-3);
    assert!(err < 1e-6, "mean {err}");
}

#[test]
fn permute_matches_index_arithmetic() {
    let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let p = g.permute(v, &[1, 2, 0]).unwrap();
    let out = g.value(p);
    assert_eq!(out.shape(), &[3, 4, 2]);
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(out.at(&[j, k, i]), x.at(&[i, j, k]));
            }
        }
    }
}

#[test]
fn broadcast_and_domain_errors() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.add(a, b), Err(crate::Error::Dimension(_))));
    let c = g.input(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(c), Err(crate::Error::Domain(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.input(Tensor::vector(vec![1000.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
}

#[test]
fn softmax_random_vector_sums_to_one_and_gradient() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[7], 3.0);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let s = g.softmax(v, 0).unwrap();
    assert!((g.value(s).sum() - 1.0).abs() < 1e-12);
    let err = gradcheck(&[x], |g, v| g.softmax(v[0], 0).unwrap(), 1e-3);
    assert!(err < 1e-6, "{err}");
    let x2 = random_tensor(&mut r, &[3, 4, 2], 2.0);
    for axis in 0..3 {
        let err = gradcheck(&[x2.clone()], |g, v| g.softmax(v[0], axis).unwrap(), 1e-3);
        assert!(err < 1e-6, "axis {axis}: {err}");
    }
}

#[test]
fn softmax_negative_infinity_gets_zero_weight() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, f64::NEG_INFINITY, -0.2]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert_eq!(d[1], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::new();
    let gain = g.input(Tensor::full(vec![4], 1.0));
    let bias = g.input(Tensor::zeros(vec![4]));
    let x = g.input(Tensor::full(vec![1, 4], 3.5));
    let y = g.layernorm(x, gain, bias, LN_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.input(Tensor::full(vec![2], 1.0));
    let bias = g.input(Tensor::zeros(vec![2]));
    let x = g.input(Tensor::vector(vec![1.0, -1.0]));
    let y = g.layernorm(x, gain, bias, LN_EPS).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
    assert!(d[0] < 1.0);
}

#[test]
fn layernorm_gradient() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[2, 8], 2.0);
    let gain = random_tensor(&mut r, &[8], 1.5);
    let bias = random_tensor(&mut r, &[8], 1.0);
    let err = gradcheck(
        &[x, gain, bias],
        |g, v| g.layernorm(v[0], v[1], v[2], LN_EPS).unwrap(),
        1e-3,
    );
    assert!(err < 1e-5, "{err}");
}

/// Direct scalar loop over masked rows.
fn ce_oracle(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
    let v = logits.shape()[1];
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..targets.len() {
        if !mask[r] {
            continue;
        }
        let mut z = 0.0;
        for j in 0..v {
            z += logits.at(&[r, j]).exp();
        }
        total += -(logits.at(&[r, targets[r]]).exp() / z).ln();
        count += 1;
    }
    total / count as f64
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(vec![1, 4]));
    let loss = g.cross_entropy_logits(l, &[2], &[true]).unwrap();
    assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let l = g.input(Tensor::from_rows(&[vec![20.0, 0.0, 0.0, 0.0]]).unwrap());
    let loss = g.cross_entropy_logits(l, &[0], &[true]).unwrap();
    assert!(g.value(loss).item().unwrap() < 1e-8);

    let mut r = rng(8);
    let logits = random_tensor(&mut r, &[5, 11], 3.0);
    let targets = [3, 0, 10, 7, 7];
    let mask = [true, false, true, true, false];
    let l = g.input(logits.clone());
    let loss = g.cross_entropy_logits(l, &targets, &mask).unwrap();
    let want = ce_oracle(&logits, &targets, &mask);
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-10);

    let err = gradcheck(
        &[logits],
        |g, v| g.cross_entropy_logits(v[0], &targets, &mask).unwrap(),
        1e-3,
    );
    assert!(err < 1e-6, "{err}");

    let l = g.input(Tensor::zeros(vec![2, 3]));
    assert!(g.cross_entropy_logits(l, &[0, 1], &[false, false]).is_err());
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let p = g.input(Tensor::vector(vec![0.5, 0.5]));
    let loss = g.bce_loss(p, &[1.0, 0.0]).unwrap();
    assert!((g.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);

    let p = g.input(Tensor::vector(vec![1.0 - 1e-7]));
    let loss = g.bce_loss(p, &[1.0]).unwrap();
    assert!((g.value(loss).item().unwrap() - 1e-7).abs() < 1e-12);

    let mut r = rng(9);
    let probs: Vec<f64> = (0..16).map(|_| r.gen_range(0.01..0.99)).collect();
    let labels: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mut want = 0.0;
    for i in 0..16 {
        want -= labels[i] * probs[i].ln() + (1.0 - labels[i]) * (1.0 - probs[i]).ln();
    }
    want /= 16.0;
    let p = g.input(Tensor::vector(probs.clone()));
    let loss = g.bce_loss(p, &labels).unwrap();
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);

    let err = gradcheck(
        &[Tensor::vector(probs)],
        |g, v| g.bce_loss(v[0], &labels).unwrap(),
        1e-3,
    );
    assert!(err < 1e-6, "{err}");

    let p = g.input(Tensor::vector(vec![0.5, 0.5]));
    assert!(g.bce_loss(p, &[1.0]).is_err());
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let p = g.param(&store, id);
    let p_again = g.param(&store, id);
    assert_eq!(p, p_again);
    let twice = g.add(p, p_again).unwrap();
    let loss = g.sum(twice);
    let grads = g.backward(loss).unwrap();
    store.accumulate(&g, &grads);
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 2.0, 2.0]);

    let err = g.backward(twice).unwrap_err();
    assert!(matches!(err, crate::Error::Graph(_)));
}

#[test]
fn gather_gradient_lands_on_looked_up_rows() {
    let table = Tensor::new(vec![5, 3], (0..15).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let t = g.variable(table.clone());
    let rows = g.gather(t, &[3, 1, 3]).unwrap();
    assert_eq!(g.value(rows).row(0), table.row(3));
    assert_eq!(g.value(rows).row(1), table.row(1));
    let loss = g.sum(rows);
    let grads = g.backward(loss).unwrap();
    let d = grads.get(t).unwrap();
    assert_eq!(d.row(0), &[0.0; 3]);
    assert_eq!(d.row(1), &[1.0; 3]);
    assert_eq!(d.row(3), &[2.0; 3]);
    assert!(g.gather(t, &[5]).is_err());
}

#[test]
fn clip_grad_norm_rescales() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![0.0, 0.0])).unwrap();
    store.get_mut(id).grad = Some(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(store.clip_grad_norm(1.0), 5.0);
    let g = store.get(id).grad.as_ref().unwrap().data().to_vec();
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.input(t);
        let s = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = &g.value(s).data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates_branch_gradients(k in 1usize..6, x in -2.0f64..2.0) {
        // loss = Σ_i c_i·tanh(x); each branch contributes c_i·(1 - tanh²x).
        let mut g = Graph::new();
        let v = g.variable(Tensor::vector(vec![x]));
        let t = g.tanh(v).unwrap();
        let mut branches = Vec::new();
        for i in 0..k {
            branches.push(g.scale(t, i as f64 + 1.0));
        }
        let mut acc = branches[0];
        for &b in &branches[1..] {
            acc = g.add(acc, b).unwrap();
        }
        let loss = g.sum(acc);
        let grads = g.backward(loss).unwrap();
        let want: f64 = (1..=k).map(|c| c as f64 * (1.0 - x.tanh().powi(2))).sum();
        prop_assert!(rel_err(grads.get(v).unwrap().data()[0], want, 1e-12) < 1e-12);
    }

    #[test]
    fn adamw_zero_lr_keeps_values(vals in prop::collection::vec(-5.0f64..5.0, 1..10), grad in -3.0f64..3.0) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vals.clone())).unwrap();
        store.get_mut(id).grad = Some(Tensor::full(vec![vals.len()], grad));
        AdamW::default().step(&mut store, &[ParamGroup::new(vec![id], 0.0)]).unwrap();
        prop_assert_eq!(store.value(id).data(), &vals[..]);
    }
}

use rand::Rng;
