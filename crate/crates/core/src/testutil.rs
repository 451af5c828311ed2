//! Test-only oracles: central finite differences over the public graph API.

use crate::numeric::{Graph, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a-b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights
/// so that every output entry is exercised.
fn scalarize(g: &mut Graph, out: Var) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.618 + 0.3).sin()).collect()).unwrap();
    let w = g.input(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Max relative error between analytic and central-difference gradients of
/// `build` with respect to each input tensor.
pub fn gradcheck(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    floor: f64,
) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = scalarize(&mut g, out);
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = scalarize(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd, floor));
        }
    }
    worst
}

/// Max relative error between analytic parameter gradients of the scalar
/// built by `build` and central differences, over `probe` entries
/// `(parameter, flat index)`.
pub fn store_gradcheck(
    store: &crate::numeric::ParamStore,
    probe: &[(crate::numeric::ParamId, usize)],
    build: impl Fn(&mut Graph, &crate::numeric::ParamStore) -> Var,
    floor: f64,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let mut analytic = store.clone();
    analytic.zero_grad();
    analytic.accumulate(&g, &grads);
    let eval = |s: &crate::numeric::ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for &(id, i) in probe {
        let a = analytic.get(id).grad.as_ref().map_or(0.0, |t| t.data()[i]);
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[i] += FD_STEP;
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[i] -= FD_STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(a, fd, floor));
    }
    worst
}

/// Up to `n` random `(parameter, index)` pairs drawn from `ids`.
pub fn random_probe(
    store: &crate::numeric::ParamStore,
    ids: &[crate::numeric::ParamId],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(crate::numeric::ParamId, usize)> {
    (0..n)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.value(id).len()))
        })
        .collect()
}
