//! ID-based CTR models: per-field embeddings, a feature-interaction layer
//! producing the representation `q`, and a prediction head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::IdFeatures;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{normal, xavier_uniform, StreamRng};

pub const PREFIX: &str = "ctr.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Dnn,
    Dcnv2,
    Autoint,
    Fm,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(Backbone::Dnn),
            "dcnv2" => Ok(Backbone::Dcnv2),
            "autoint" => Ok(Backbone::Autoint),
            "fm" => Ok(Backbone::Fm),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (expected dnn, dcnv2, autoint or fm)"
            ))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Dnn => "dnn",
            Backbone::Dcnv2 => "dcnv2",
            Backbone::Autoint => "autoint",
            Backbone::Fm => "fm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    /// Hidden layers of the deep branch; also the number of cross or
    /// attention layers.
    pub layers: usize,
    pub hidden: usize,
    pub attention_size: usize,
    /// DCNv2 only: use the deep branch alone as `q` instead of
    /// `[cross ; deep]`.
    pub dcn_deep_only: bool,
    pub embed_std: f64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        CtrConfig {
            backbone: Backbone::Dcnv2,
            embed_dim: 32,
            layers: 3,
            hidden: 256,
            attention_size: 32,
            dcn_deep_only: false,
            embed_std: 0.1,
        }
    }
}

fn q_dim_for(c: &CtrConfig, fields: usize) -> usize {
    let flat = fields * c.embed_dim;
    let deep_out = if c.layers == 0 { flat } else { c.hidden };
    match c.backbone {
        Backbone::Dnn => deep_out,
        Backbone::Dcnv2 if c.dcn_deep_only => deep_out,
        Backbone::Dcnv2 => flat + deep_out,
        Backbone::Autoint => {
            let width = if c.layers == 0 { c.embed_dim } else { c.attention_size };
            fields * width
        }
        Backbone::Fm => 1,
    }
}

#[derive(Clone, Copy, Debug)]
struct AttentionLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wres: ParamId,
    d_in: usize,
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Linear(Linear),
    /// FM: `q + b`.
    Bias(ParamId),
}

/// Embedding table, interaction layer and prediction head.
#[derive(Clone, Debug)]
pub struct CtrModel {
    config: CtrConfig,
    cardinalities: Vec<usize>,
    embeddings: Vec<ParamId>,
    first_order: Vec<ParamId>,
    deep: Vec<Linear>,
    cross: Vec<Linear>,
    attention: Vec<AttentionLayer>,
    head: Head,
}

impl CtrModel {
    pub fn new(
        store: &mut ParamStore,
        config: &CtrConfig,
        cardinalities: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if cardinalities.is_empty() || cardinalities.contains(&0) {
            return Err(Error::invalid("CTR model needs at least one non-empty field"));
        }
        if config.embed_dim == 0 || config.hidden == 0 || config.attention_size == 0 {
            return Err(Error::Config("CTR sizes must be positive".into()));
        }
        let d = config.embed_dim;
        let f = cardinalities.len();
        let flat = f * d;
        let mut embeddings = Vec::with_capacity(f);
        for (j, &card) in cardinalities.iter().enumerate() {
            let table = normal(rng, vec![card, d], config.embed_std);
            embeddings.push(store.add(format!("{PREFIX}embedding.{j}"), table)?);
        }

        let mut deep = Vec::new();
        let mut cross = Vec::new();
        let mut attention = Vec::new();
        let mut first_order = Vec::new();
        let needs_deep = matches!(config.backbone, Backbone::Dnn | Backbone::Dcnv2);
        if needs_deep {
            let mut fan_in = flat;
            for l in 0..config.layers {
                deep.push(Linear::new(store, &format!("{PREFIX}deep.{l}"), fan_in, config.hidden, rng)?);
                fan_in = config.hidden;
            }
        }
        match config.backbone {
            Backbone::Dcnv2 => {
                for l in 0..config.layers {
                    cross.push(Linear::new(store, &format!("{PREFIX}cross.{l}"), flat, flat, rng)?);
                }
            }
            Backbone::Autoint => {
                let mut d_in = d;
                let a = config.attention_size;
                for l in 0..config.layers {
                    let mut mat = |name: &str| {
                        store.add(format!("{PREFIX}autoint.{l}.{name}"), xavier_uniform(rng, d_in, a))
                    };
                    attention.push(AttentionLayer {
                        wq: mat("wq")?,
                        wk: mat("wk")?,
                        wv: mat("wv")?,
                        wres: mat("wres")?,
                        d_in,
                    });
                    d_in = a;
                }
            }
            Backbone::Fm => {
                for (j, &card) in cardinalities.iter().enumerate() {
                    first_order.push(
                        store.add(format!("{PREFIX}fm.first_order.{j}"), Tensor::zeros(vec![card, 1]))?,
                    );
                }
            }
            Backbone::Dnn => {}
        }

        let head = if config.backbone == Backbone::Fm {
            Head::Bias(store.add(format!("{PREFIX}head.b"), Tensor::zeros(vec![1]))?)
        } else {
            let q_dim = q_dim_for(config, f);
            Head::Linear(Linear::new(store, &format!("{PREFIX}head"), q_dim, 1, rng)?)
        };
        Ok(CtrModel {
            config: config.clone(),
            cardinalities: cardinalities.to_vec(),
            embeddings,
            first_order,
            deep,
            cross,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &CtrConfig {
        &self.config
    }

    pub fn num_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn q_dim(&self) -> usize {
        q_dim_for(&self.config, self.num_fields())
    }

    /// Every parameter of the CTR model (embeddings, interaction, head).
    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }

    fn check_ids(&self, ids: &[IdFeatures]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for x in ids {
            if x.indices.len() != self.num_fields() {
                return Err(Error::dim(format!(
                    "sample has {} fields, model {}",
                    x.indices.len(),
                    self.num_fields()
                )));
            }
        }
        Ok(())
    }

    /// `E: [B, F, d]`, one gathered row per field.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[IdFeatures]) -> Result<Var> {
        self.check_ids(ids)?;
        let flat = self.embed_flat(g, store, ids)?;
        g.reshape(flat, vec![ids.len(), self.num_fields(), self.config.embed_dim])
    }

    fn per_field(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &[ParamId],
        ids: &[IdFeatures],
    ) -> Result<Var> {
        let mut cols = Vec::with_capacity(tables.len());
        for (j, &table) in tables.iter().enumerate() {
            let idx: Vec<usize> = ids.iter().map(|x| x.indices[j]).collect();
            let t = g.param(store, table);
            cols.push(g.gather(t, &idx)?);
        }
        g.concat(&cols, 1)
    }

    fn embed_flat(&self, g: &mut Graph, store: &ParamStore, ids: &[IdFeatures]) -> Result<Var> {
        self.per_field(g, store, &self.embeddings, ids)
    }

    fn deep_branch(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.deep {
            let y = layer.forward(g, store, x)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }

    /// `x_{l+1} = x_0 ⊙ (x_l W_l + b_l) + x_l`.
    fn cross_branch(&self, g: &mut Graph, store: &ParamStore, x0: Var) -> Result<Var> {
        let mut x = x0;
        for layer in &self.cross {
            let lin = layer.forward(g, store, x)?;
            let gated = g.mul(x0, lin)?;
            x = g.add(gated, x)?;
        }
        Ok(x)
    }

    /// Single-head self-attention over fields with a projected residual.
    fn attention_branch(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        let (b, f) = (g.shape(e)[0], g.shape(e)[1]);
        let mut x = e;
        for layer in &self.attention {
            let flat = g.reshape(x, vec![b * f, layer.d_in])?;
            let a = self.config.attention_size;
            let proj = |g: &mut Graph, w: ParamId| -> Result<Var> {
                let w = g.param(store, w);
                let y = g.matmul(flat, w)?;
                g.reshape(y, vec![b, f, a])
            };
            let q = proj(g, layer.wq)?;
            let k = proj(g, layer.wk)?;
            let v = proj(g, layer.wv)?;
            let res = proj(g, layer.wres)?;
            let scores = g.bmm_nt(q, k)?;
            let att = g.softmax(scores, 2)?;
            let ctx = g.bmm(att, v)?;
            let sum = g.add(ctx, res)?;
            x = g.relu(sum)?;
        }
        let width = g.shape(x)[2];
        g.reshape(x, vec![b, f * width])
    }

    /// `0.5·Σ_d[(Σ_j v_jd)² − Σ_j v_jd²] + Σ_j w_j`, shape `[B, 1]`.
    fn fm_term(&self, g: &mut Graph, store: &ParamStore, e: Var, ids: &[IdFeatures]) -> Result<Var> {
        let b = ids.len();
        let s = g.sum_axis(e, 1)?;
        let s2 = g.square(s)?;
        let e2 = g.square(e)?;
        let sq = g.sum_axis(e2, 1)?;
        let diff = g.sub(s2, sq)?;
        let pair = g.sum_axis(diff, 1)?;
        let pair = g.scale(pair, 0.5);
        let lin = self.per_field(g, store, &self.first_order, ids)?;
        let lin = g.sum_axis(lin, 1)?;
        let total = g.add(pair, lin)?;
        g.reshape(total, vec![b, 1])
    }

    /// The representation `q: [B, q_dim]` fed to both the head and the
    /// prompt generator.
    pub fn represent(&self, g: &mut Graph, store: &ParamStore, ids: &[IdFeatures]) -> Result<Var> {
        self.check_ids(ids)?;
        let b = ids.len();
        let flat = self.embed_flat(g, store, ids)?;
        let shaped = |g: &mut Graph| g.reshape(flat, vec![b, self.num_fields(), self.config.embed_dim]);
        match self.config.backbone {
            Backbone::Dnn => self.deep_branch(g, store, flat),
            Backbone::Dcnv2 => {
                let deep = self.deep_branch(g, store, flat)?;
                if self.config.dcn_deep_only {
                    return Ok(deep);
                }
                let cross = self.cross_branch(g, store, flat)?;
                g.concat(&[cross, deep], 1)
            }
            Backbone::Autoint => {
                let e = shaped(g)?;
                self.attention_branch(g, store, e)
            }
            Backbone::Fm => {
                let e = shaped(g)?;
                self.fm_term(g, store, e, ids)
            }
        }
    }

    /// Scalar logit per sample, `[B]`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, q: Var) -> Result<Var> {
        let b = g.shape(q)[0];
        let out = match self.head {
            Head::Linear(lin) => lin.forward(g, store, q)?,
            Head::Bias(bias) => {
                let bias = g.param(store, bias);
                g.add_bias(q, bias)?
            }
        };
        g.reshape(out, vec![b])
    }

    /// `(q, logit)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[IdFeatures]) -> Result<(Var, Var)> {
        let q = self.represent(g, store, ids)?;
        let logit = self.predict(g, store, q)?;
        Ok((q, logit))
    }
}

#[cfg(test)]
mod tests;
