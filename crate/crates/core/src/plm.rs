//! Miniature pre-LN transformer encoder that accepts per-layer prefix
//! prompts as extra attention keys and values, with a tied MLM head and a
//! pooling + prediction head.

use serde::{Deserialize, Serialize};

use crate::data::TextFeatures;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{normal, StreamRng};

pub const PREFIX: &str = "plm.";
/// The pooling/prediction head trains with the CTR-side learning rate.
pub const HEAD_PREFIX: &str = "plm_head.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub z_max: usize,
    /// Prompts per layer.
    pub k: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ff: 256,
            z_max: crate::data::DEFAULT_Z_MAX,
            k: 5,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 || self.z_max == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Token ids of a batch cut to the longest real sequence in it.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub b: usize,
    pub z: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
}

impl TextBatch {
    pub fn new<'a>(texts: impl IntoIterator<Item = &'a TextFeatures>) -> Result<Self> {
        let texts: Vec<&TextFeatures> = texts.into_iter().collect();
        if texts.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        if let Some(i) = texts.iter().position(|t| t.len == 0) {
            return Err(Error::invalid(format!("text {i} has no real tokens")));
        }
        let z = texts.iter().map(|t| t.len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(texts.len() * z);
        let mut mask = Vec::with_capacity(texts.len() * z);
        for t in &texts {
            for p in 0..z {
                ids.push(t.ids.get(p).copied().unwrap_or(crate::data::PAD));
                mask.push(p < t.len);
            }
        }
        Ok(TextBatch {
            b: texts.len(),
            z,
            ids,
            mask,
            lens: texts.iter().map(|t| t.len).collect(),
        })
    }

    /// Same batch with every sequence padded to `z` positions.
    pub fn padded_to(&self, z: usize) -> TextBatch {
        assert!(z >= self.z);
        let mut ids = Vec::with_capacity(self.b * z);
        let mut mask = Vec::with_capacity(self.b * z);
        for i in 0..self.b {
            for p in 0..z {
                if p < self.z {
                    ids.push(self.ids[i * self.z + p]);
                    mask.push(self.mask[i * self.z + p]);
                } else {
                    ids.push(crate::data::PAD);
                    mask.push(false);
                }
            }
        }
        TextBatch {
            b: self.b,
            z,
            ids,
            mask,
            lens: self.lens.clone(),
        }
    }

    fn has_padding(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Output of [`PrefixEncoder::encode`].
#[derive(Debug)]
pub struct Encoding {
    /// Final token states, `[B·Z, H]`.
    pub hidden: Var,
    pub b: usize,
    pub z: usize,
    /// Per layer, `[B·heads, Z, K_l + Z]` attention weights (token queries
    /// over prompt keys then token keys); empty unless recording.
    pub attention: Vec<Tensor>,
    /// Prompt count seen at each layer.
    pub prompt_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PrefixEncoder {
    config: EncoderConfig,
    vocab_size: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    mlm_bias: ParamId,
    head1: Linear,
    head2: Linear,
}

impl PrefixEncoder {
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::data::NUM_RESERVED {
            return Err(Error::invalid("vocabulary holds only reserved tokens"));
        }
        let h = config.hidden;
        let tok_emb = store.add(format!("{PREFIX}tok_emb"), normal(rng, vec![vocab_size, h], 0.02))?;
        let pos_emb = store.add(format!("{PREFIX}pos_emb"), normal(rng, vec![config.z_max, h], 0.02))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("{PREFIX}layer{l}.{s}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &n("ln1"), h)?,
                wq: Linear::new(store, &n("wq"), h, h, rng)?,
                wk: Linear::new(store, &n("wk"), h, h, rng)?,
                wv: Linear::new(store, &n("wv"), h, h, rng)?,
                wo: Linear::new(store, &n("wo"), h, h, rng)?,
                ln2: LayerNorm::new(store, &n("ln2"), h)?,
                ff1: Linear::new(store, &n("ff1"), h, config.ff, rng)?,
                ff2: Linear::new(store, &n("ff2"), config.ff, h, rng)?,
            });
        }
        let ln_f = LayerNorm::new(store, &format!("{PREFIX}ln_f"), h)?;
        let mlm_bias = store.add(format!("{PREFIX}mlm.bias"), Tensor::zeros(vec![vocab_size]))?;
        let head1 = Linear::new(store, &format!("{HEAD_PREFIX}fc1"), h, h, rng)?;
        let head2 = Linear::new(store, &format!("{HEAD_PREFIX}fc2"), h, 1, rng)?;
        Ok(PrefixEncoder {
            config: config.clone(),
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            mlm_bias,
            head1,
            head2,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Encoder body and MLM bias (the PLM learning-rate group).
    pub fn body_param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(PREFIX).collect()
    }

    pub fn head_param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(HEAD_PREFIX).collect()
    }

    /// Splits `[B·n, H]` into heads: `[B·heads, n, dh]`.
    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, n: usize) -> Result<Var> {
        let (nh, dh) = (self.config.heads, self.config.head_dim());
        let x = g.reshape(x, vec![b, n, nh, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, vec![b * nh, n, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, b: usize, n: usize) -> Result<Var> {
        let (nh, dh) = (self.config.heads, self.config.head_dim());
        let x = g.reshape(x, vec![b, nh, n, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, vec![b * n, nh * dh])
    }

    /// Token embeddings plus learned positions, `[B·Z, H]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &TextBatch) -> Result<Var> {
        if batch.z > self.config.z_max {
            return Err(Error::dim(format!(
                "sequence length {} exceeds z_max {}",
                batch.z, self.config.z_max
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::dim(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let t = g.gather(tok, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.b).flat_map(|_| 0..batch.z).collect();
        let p = g.gather(pos, &positions)?;
        g.add(t, p)
    }

    /// Runs the encoder. `prompts` is empty (no prefix anywhere) or holds one
    /// entry per layer: `Some([B, K_l, H])` prepends `K_l` prompt keys and
    /// values at that layer. Prompts emit no queries and get no FFN; only
    /// token outputs continue to the next layer.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &TextBatch,
        prompts: &[Option<Var>],
        record: bool,
    ) -> Result<Encoding> {
        let (b, z, h) = (batch.b, batch.z, self.config.hidden);
        if !prompts.is_empty() && prompts.len() != self.config.layers {
            return Err(Error::dim(format!(
                "{} prompt layers for a {}-layer encoder",
                prompts.len(),
                self.config.layers
            )));
        }
        if batch.lens.iter().any(|&l| l == 0) {
            return Err(Error::invalid("sequence without real tokens"));
        }
        let mut x = self.embed(g, store, batch)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut attention = Vec::new();
        let mut prompt_counts = Vec::with_capacity(self.config.layers);
        for (l, blk) in self.blocks.iter().enumerate() {
            let prompt = match prompts.get(l).copied().flatten() {
                Some(p) => {
                    let s = g.shape(p);
                    if s.len() != 3 || s[0] != b || s[2] != h {
                        return Err(Error::dim(format!(
                            "layer {l} prompts {s:?}, expected [{b}, K, {h}]"
                        )));
                    }
                    if s[1] == 0 {
                        None
                    } else {
                        Some((p, s[1]))
                    }
                }
                None => None,
            };
            let k = prompt.map_or(0, |(_, k)| k);
            prompt_counts.push(k);

            let hn = blk.ln1.forward(g, store, x)?;
            let q = blk.wq.forward(g, store, hn)?;
            let q = self.split_heads(g, q, b, z)?;
            let kt = blk.wk.forward(g, store, hn)?;
            let mut keys = self.split_heads(g, kt, b, z)?;
            let vt = blk.wv.forward(g, store, hn)?;
            let mut values = self.split_heads(g, vt, b, z)?;
            if let Some((p, k)) = prompt {
                let pf = g.reshape(p, vec![b * k, h])?;
                let pn = blk.ln1.forward(g, store, pf)?;
                let kp = blk.wk.forward(g, store, pn)?;
                let kp = self.split_heads(g, kp, b, k)?;
                let vp = blk.wv.forward(g, store, pn)?;
                let vp = self.split_heads(g, vp, b, k)?;
                keys = g.concat(&[kp, keys], 1)?;
                values = g.concat(&[vp, values], 1)?;
            }
            let scores = g.bmm_nt(q, keys)?;
            let mut scores = g.scale(scores, scale);
            if batch.has_padding() {
                let m = self.key_mask(batch, k);
                let m = g.input(m);
                scores = g.add(scores, m)?;
            }
            let att = g.softmax(scores, 2)?;
            if record {
                attention.push(g.value(att).clone());
            }
            let ctx = g.bmm(att, values)?;
            let ctx = self.merge_heads(g, ctx, b, z)?;
            let out = blk.wo.forward(g, store, ctx)?;
            x = g.add(x, out)?;

            let hn = blk.ln2.forward(g, store, x)?;
            let f = blk.ff1.forward(g, store, hn)?;
            let f = g.gelu(f)?;
            let f = blk.ff2.forward(g, store, f)?;
            x = g.add(x, f)?;
        }
        let hidden = self.ln_f.forward(g, store, x)?;
        Ok(Encoding {
            hidden,
            b,
            z,
            attention,
            prompt_counts,
        })
    }

    /// Additive mask `[B·heads, Z, K+Z]`: `-inf` on padded token keys.
    fn key_mask(&self, batch: &TextBatch, k: usize) -> Tensor {
        let (b, z, nh) = (batch.b, batch.z, self.config.heads);
        let width = k + z;
        let mut data = vec![0.0; b * nh * z * width];
        for i in 0..b {
            for hd in 0..nh {
                for qz in 0..z {
                    let row = ((i * nh + hd) * z + qz) * width;
                    for kz in 0..z {
                        if !batch.mask[i * z + kz] {
                            data[row + k + kz] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b * nh, z, width], data).expect("mask shape")
    }

    /// Vocabulary logits `[M, V]` for hidden rows `[M, H]`, using the token
    /// embedding as output weights plus a bias.
    pub fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let tok = g.param(store, self.tok_emb);
        let bias = g.param(store, self.mlm_bias);
        let logits = g.matmul_nt(hidden, tok)?;
        g.add_bias(logits, bias)
    }

    /// Pooled representation `[B, H]` over real tokens.
    pub fn pool(&self, g: &mut Graph, enc: &Encoding, batch: &TextBatch) -> Result<Var> {
        let (b, z) = (enc.b, enc.z);
        let mut w = vec![0.0; b * z];
        for i in 0..b {
            let n = batch.lens[i];
            if n == 0 {
                return Err(Error::invalid("cannot pool an all-padding sequence"));
            }
            match self.config.pooling {
                Pooling::Mean => {
                    for p in 0..z {
                        if batch.mask[i * z + p] {
                            w[i * z + p] = 1.0 / n as f64;
                        }
                    }
                }
                Pooling::First => w[i * z] = 1.0,
            }
        }
        let w = g.input(Tensor::new(vec![b, 1, z], w)?);
        let hid = g.reshape(enc.hidden, vec![b, z, self.config.hidden])?;
        let pooled = g.bmm(w, hid)?;
        g.reshape(pooled, vec![b, self.config.hidden])
    }

    /// `MLP(Pooling(h))` with a relu hidden layer, one logit per sample.
    pub fn pool_and_predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &Encoding,
        batch: &TextBatch,
    ) -> Result<Var> {
        let pooled = self.pool(g, enc, batch)?;
        let h = self.head1.forward(g, store, pooled)?;
        let h = g.relu(h)?;
        let out = self.head2.forward(g, store, h)?;
        g.reshape(out, vec![enc.b])
    }
}

/// Mean attention mass each prompt receives at `layer` from sample
/// `sample`'s real-token queries, over all heads, renormalised over the
/// prompts.
pub fn attention_over_prompts(
    enc: &Encoding,
    batch: &TextBatch,
    heads: usize,
    layer: usize,
    sample: usize,
) -> Result<Vec<f64>> {
    let att = enc
        .attention
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("no attention record for layer {layer}")))?;
    let k = enc.prompt_counts[layer];
    if k == 0 {
        return Err(Error::invalid(format!("layer {layer} saw no prompts")));
    }
    let (z, width) = (enc.z, k + enc.z);
    let mut scores = vec![0.0; k];
    for hd in 0..heads {
        for qz in 0..z {
            if !batch.mask[sample * z + qz] {
                continue;
            }
            let row = ((sample * heads + hd) * z + qz) * width;
            for (j, s) in scores.iter_mut().enumerate() {
                *s += att.data()[row + j];
            }
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    } else {
        scores.iter_mut().for_each(|s| *s = 1.0 / k as f64);
    }
    Ok(scores)
}
