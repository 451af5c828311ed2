//! Small parameterised building blocks shared by the models.

use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var, LN_EPS};
use crate::rng::{xavier_uniform, StreamRng};

/// `x·W + b` with `W: [fan_in, fan_out]` (Xavier-uniform) and zero `b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
        Ok(Linear {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// `x: [n, fan_in]` → `[n, fan_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.fan_in {
            return Err(Error::dim(format!(
                "linear layer expects [n, {}], got {:?}",
                self.fan_in,
                g.shape(x)
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Learned gain (ones) and bias (zeros) over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.g"), Tensor::full(vec![dim], 1.0))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias, LN_EPS)
    }
}
