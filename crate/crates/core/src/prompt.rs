//! Grid of independent projection networks turning the CTR representation
//! `q` into per-layer soft prompts.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::StreamRng;

pub const PREFIX: &str = "prompt.";

#[derive(Clone, Copy, Debug)]
struct Cell {
    fc1: Linear,
    fc2: Linear,
}

/// `p[l][k] = W2_{l,k}·tanh(W1_{l,k}·q + b1) + b2` for every layer `l` and
/// slot `k`. Without layerwise prompting only the first layer has cells.
#[derive(Clone, Debug)]
pub struct PromptGenerator {
    layers: usize,
    k: usize,
    hidden: usize,
    q_dim: usize,
    cells: Vec<Vec<Cell>>,
}

impl PromptGenerator {
    pub fn new(
        store: &mut ParamStore,
        q_dim: usize,
        hidden: usize,
        layers: usize,
        k: usize,
        layerwise: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if q_dim == 0 || hidden == 0 {
            return Err(Error::Config("prompt generator sizes must be positive".into()));
        }
        let active = if layerwise { layers } else { layers.min(1) };
        let mut cells = Vec::with_capacity(active);
        for l in 0..active {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let n = format!("{PREFIX}{l}.{j}");
                row.push(Cell {
                    fc1: Linear::new(store, &format!("{n}.fc1"), q_dim, hidden, rng)?,
                    fc2: Linear::new(store, &format!("{n}.fc2"), hidden, hidden, rng)?,
                });
            }
            cells.push(row);
        }
        Ok(PromptGenerator {
            layers,
            k,
            hidden,
            q_dim,
            cells,
        })
    }

    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }

    pub fn q_dim(&self) -> usize {
        self.q_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layerwise(&self) -> bool {
        self.cells.len() == self.layers
    }

    /// Parameter ids of cell `(l, k)`.
    pub fn cell_param_ids(&self, l: usize, k: usize) -> Vec<ParamId> {
        let c = &self.cells[l][k];
        [c.fc1.ids(), c.fc2.ids()].concat()
    }

    /// One entry per encoder layer: `Some([B, K, H])` where prompts exist.
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, q: Var) -> Result<Vec<Option<Var>>> {
        let s = g.shape(q).to_vec();
        if s.len() != 2 || s[1] != self.q_dim {
            return Err(Error::dim(format!(
                "prompt generator expects [B, {}], got {s:?}",
                self.q_dim
            )));
        }
        let b = s[0];
        let mut out = vec![None; self.layers];
        if self.k == 0 {
            return Ok(out);
        }
        for (l, row) in self.cells.iter().enumerate() {
            let mut slots = Vec::with_capacity(self.k);
            for cell in row {
                let h = cell.fc1.forward(g, store, q)?;
                let h = g.tanh(h)?;
                slots.push(cell.fc2.forward(g, store, h)?);
            }
            let flat = g.concat(&slots, 1)?;
            out[l] = Some(g.reshape(flat, vec![b, self.k, self.hidden])?);
        }
        Ok(out)
    }

    /// Constant zero prompts with the same layout as [`generate`](Self::generate).
    pub fn zeros(&self, g: &mut Graph, b: usize) -> Vec<Option<Var>> {
        (0..self.layers)
            .map(|l| {
                (l < self.cells.len() && self.k > 0)
                    .then(|| g.input(Tensor::zeros(vec![b, self.k, self.hidden])))
            })
            .collect()
    }
}
