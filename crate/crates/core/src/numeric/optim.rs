//! AdamW with decoupled weight decay and per-group learning rates.

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Parameters updated with one learning rate.
#[derive(Clone, Debug, Default)]
pub struct ParamGroup {
    pub params: Vec<ParamId>,
    pub lr: f64,
}

impl ParamGroup {
    pub fn new(params: Vec<ParamId>, lr: f64) -> Self {
        ParamGroup { params, lr }
    }
}

impl AdamW {
    /// One update of every parameter in `groups`, then clears all gradients.
    ///
    /// Every listed parameter must carry a gradient.
    pub fn step(&self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for group in groups {
            for &id in &group.params {
                if store.get(id).grad.is_none() {
                    return Err(Error::MissingGradient(store.name(id).to_string()));
                }
            }
        }
        for group in groups {
            for &id in &group.params {
                self.update(store, id, group.lr);
            }
        }
        store.zero_grad();
        Ok(())
    }

    fn update(&self, store: &mut ParamStore, id: ParamId, lr: f64) {
        let p = store.get_mut(id);
        let grad = p.grad.take().expect("checked by step");
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let value = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] = value[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn one_param(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![value])).unwrap();
        store.get_mut(id).grad = Some(Tensor::vector(vec![grad]));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let (mut store, id) = one_param(1.0, 1.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &[ParamGroup::new(vec![id], 0.1)]).unwrap();
        let p = store.value(id).data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let (mut store, id) = one_param(0.7, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &[ParamGroup::new(vec![id], 0.1)]).unwrap();
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn zero_lr_updates_moments_only() {
        let (mut store, id) = one_param(0.7, 2.0);
        AdamW::default()
            .step(&mut store, &[ParamGroup::new(vec![id], 0.0)])
            .unwrap();
        let p = store.get(id);
        assert_eq!(p.value.data()[0], 0.7);
        assert!((p.m.data()[0] - 0.2).abs() < 1e-12);
        assert!((p.v.data()[0] - 0.004).abs() < 1e-12);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn decoupled_decay_shrinks_value() {
        let (mut store, id) = one_param(2.0, 0.0);
        let opt = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        opt.step(&mut store, &[ParamGroup::new(vec![id], 0.1)]).unwrap();
        assert!((store.value(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("encoder.layer0.wq", Tensor::vector(vec![1.0])).unwrap();
        let err = AdamW::default()
            .step(&mut store, &[ParamGroup::new(vec![id], 0.1)])
            .unwrap_err();
        assert!(err.to_string().contains("encoder.layer0.wq"));
    }
}
