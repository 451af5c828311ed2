use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::masking::MaskingPlan;
use crate::ctr::{CtrConfig, CtrModel};
use crate::data::{Encoded, IdFeatures, TextFeatures, MASK};
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::plm::{attention_over_prompts, EncoderConfig, PrefixEncoder, TextBatch};
use crate::prompt::PromptGenerator;
use crate::rng::stream;

pub const ALPHA_NAME: &str = "fusion.alpha";
pub const ALPHA_INIT: f64 = 0.5;

/// Everything that fixes parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub ctr: CtrConfig,
    pub encoder: EncoderConfig,
    pub layerwise: bool,
    pub cardinalities: Vec<usize>,
    pub vocab_size: usize,
}

impl Architecture {
    /// Flat `key=value` view used for fingerprints and mismatch reports.
    pub fn canonical(&self) -> Vec<(String, String)> {
        let c = &self.ctr;
        let e = &self.encoder;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("backbone".into(), c.backbone.to_string()),
            ("embed_dim".into(), c.embed_dim.to_string()),
            ("ctr_layers".into(), c.layers.to_string()),
            ("ctr_hidden".into(), c.hidden.to_string()),
            ("attention_size".into(), c.attention_size.to_string()),
            ("dcn_deep_only".into(), c.dcn_deep_only.to_string()),
            ("layers".into(), e.layers.to_string()),
            ("hidden".into(), e.hidden.to_string()),
            ("heads".into(), e.heads.to_string()),
            ("ff".into(), e.ff.to_string()),
            ("z_max".into(), e.z_max.to_string()),
            ("k".into(), e.k.to_string()),
            ("pooling".into(), format!("{:?}", e.pooling).to_lowercase()),
            ("layerwise".into(), self.layerwise.to_string()),
            ("cardinalities".into(), join(&self.cardinalities)),
            ("vocab_size".into(), self.vocab_size.to_string()),
        ]
    }
}

/// Which components a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parts {
    /// CTR model alone.
    Ctr,
    /// CTR model, prompt generator and encoder (PA-MLM).
    Pretrain,
    /// Everything plus the fusion weight.
    Fused,
}

/// Prompt generator and prefix encoder.
#[derive(Clone, Debug)]
pub struct PlmParts {
    pub prompt: PromptGenerator,
    pub encoder: PrefixEncoder,
}

/// Parameter store plus the component handles that index into it.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
    pub ctr: CtrModel,
    pub plm: Option<PlmParts>,
    pub alpha: Option<ParamId>,
    /// Feed zero prompts instead of generated ones.
    pub zero_prompts: bool,
}

impl Model {
    /// Fresh model. Each component draws from its own stream of `seed`;
    /// `ctr_tag` names the CTR stream so that control runs can differ in
    /// CTR initialisation alone.
    pub fn new(arch: &Architecture, parts: Parts, seed: u64, ctr_tag: &str) -> Result<Model> {
        let mut store = ParamStore::new();
        let ctr = CtrModel::new(&mut store, &arch.ctr, &arch.cardinalities, &mut stream(seed, ctr_tag))?;
        let plm = if parts == Parts::Ctr {
            None
        } else {
            let e = &arch.encoder;
            let prompt = PromptGenerator::new(
                &mut store,
                ctr.q_dim(),
                e.hidden,
                e.layers,
                e.k,
                arch.layerwise,
                &mut stream(seed, "init/prompt"),
            )?;
            let encoder = PrefixEncoder::new(&mut store, e, arch.vocab_size, &mut stream(seed, "init/plm"))?;
            Some(PlmParts { prompt, encoder })
        };
        let alpha = if parts == Parts::Fused {
            Some(store.add(ALPHA_NAME, Tensor::vector(vec![ALPHA_INIT]))?)
        } else {
            None
        };
        Ok(Model {
            arch: arch.clone(),
            store,
            ctr,
            plm,
            alpha,
            zero_prompts: false,
        })
    }

    pub fn parts(&self) -> Parts {
        match (&self.plm, self.alpha) {
            (None, _) => Parts::Ctr,
            (Some(_), None) => Parts::Pretrain,
            (Some(_), Some(_)) => Parts::Fused,
        }
    }

    pub fn alpha_value(&self) -> Option<f64> {
        self.alpha.map(|id| self.store.value(id).data()[0])
    }

    /// Copies every parameter of `other` whose name exists here, checking
    /// shapes. Returns the number copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for id in other.ids_by_name() {
            let name = other.name(id);
            if let Some(mine) = self.store.find(name) {
                let src = other.value(id);
                if src.shape() != self.store.value(mine).shape() {
                    return Err(Error::dim(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        src.shape(),
                        self.store.value(mine).shape()
                    )));
                }
                *self.store.value_mut(mine) = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    fn plm_parts(&self) -> Result<&PlmParts> {
        self.plm
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no language-model components"))
    }

    /// Per-layer prompts for a batch: generated from `q`, or zeros.
    pub fn prompts(&self, g: &mut Graph, q: Var) -> Result<Vec<Option<Var>>> {
        let parts = self.plm_parts()?;
        if self.zero_prompts {
            let b = g.shape(q)[0];
            Ok(parts.prompt.zeros(g, b))
        } else {
            parts.prompt.generate(g, &self.store, q)
        }
    }

    /// CTR logits `[B]`.
    pub fn ctr_logits(&self, g: &mut Graph, ids: &[IdFeatures]) -> Result<Var> {
        Ok(self.ctr.forward(g, &self.store, ids)?.1)
    }

    /// Mean cross-entropy over the planned positions of `masked` texts,
    /// with prompts built from the intact `ids`.
    pub fn mlm_loss(
        &self,
        g: &mut Graph,
        ids: &[IdFeatures],
        masked: &[TextFeatures],
        plans: &[MaskingPlan],
    ) -> Result<Var> {
        let logits = self.mlm_selected_logits(g, ids, masked, plans)?;
        let targets: Vec<usize> = plans.iter().flat_map(|p| p.targets.iter().copied()).collect();
        let keep = vec![true; targets.len()];
        g.cross_entropy_logits(logits, &targets, &keep)
    }

    /// Vocabulary logits `[M, V]` at the planned positions, in plan order.
    pub fn mlm_selected_logits(
        &self,
        g: &mut Graph,
        ids: &[IdFeatures],
        masked: &[TextFeatures],
        plans: &[MaskingPlan],
    ) -> Result<Var> {
        let parts = self.plm_parts()?;
        if ids.len() != masked.len() || masked.len() != plans.len() {
            return Err(Error::dim("ids, texts and plans differ in length"));
        }
        let q = self.ctr.represent(g, &self.store, ids)?;
        let prompts = self.prompts(g, q)?;
        let batch = TextBatch::new(masked)?;
        let enc = parts.encoder.encode(g, &self.store, &batch, &prompts, false)?;
        let rows: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.positions.iter().map(move |&pos| i * batch.z + pos))
            .collect();
        if rows.is_empty() {
            return Err(Error::invalid("no masked positions in batch"));
        }
        let sel = g.gather(enc.hidden, &rows)?;
        parts.encoder.mlm_logits(g, &self.store, sel)
    }

    /// `α·ŷCTR + (1-α)·ŷPLM`, the pre-sigmoid fused logits `[B]`.
    pub fn fused_logits(&self, g: &mut Graph, ids: &[IdFeatures], text: &[TextFeatures]) -> Result<Var> {
        let parts = self.plm_parts()?;
        let alpha = self.alpha.ok_or_else(|| Error::invalid("model has no fusion weight"))?;
        let (q, ctr) = self.ctr.forward(g, &self.store, ids)?;
        let prompts = self.prompts(g, q)?;
        let batch = TextBatch::new(text)?;
        let enc = parts.encoder.encode(g, &self.store, &batch, &prompts, false)?;
        let plm = parts.encoder.pool_and_predict(g, &self.store, &enc, &batch)?;
        let a = g.param(&self.store, alpha);
        fuse(g, a, ctr, plm)
    }

    /// Pre-sigmoid logits for whichever prediction path this model has.
    pub fn logits(&self, g: &mut Graph, ids: &[IdFeatures], text: &[TextFeatures]) -> Result<Var> {
        match self.parts() {
            Parts::Fused => self.fused_logits(g, ids, text),
            Parts::Ctr => self.ctr_logits(g, ids),
            Parts::Pretrain => Err(Error::invalid("a pretraining model has no click head")),
        }
    }

    /// Click probabilities for every sample, in batches.
    pub fn predict(&self, data: &Encoded, batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(data.len());
            let mut g = Graph::new();
            let z = self.logits(&mut g, &data.ids[start..end], &data.text[start..end])?;
            let p = g.sigmoid(z)?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }

    /// Share of tokens in `spans` (one range per sample) recovered by the
    /// MLM head when all of them are replaced by `[MASK]`.
    pub fn masked_span_accuracy(
        &self,
        data: &Encoded,
        spans: &[Range<usize>],
        batch_size: usize,
    ) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for start in (0..data.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(data.len());
            let mut masked = Vec::new();
            let mut plans = Vec::new();
            let mut ids = Vec::new();
            for i in start..end {
                let span = spans[i].clone();
                if span.is_empty() {
                    continue;
                }
                let mut t = data.text[i].clone();
                let targets: Vec<usize> = span.clone().map(|p| t.ids[p]).collect();
                for p in span.clone() {
                    t.ids[p] = MASK;
                }
                plans.push(MaskingPlan {
                    positions: span.collect(),
                    actions: Vec::new(),
                    targets,
                });
                masked.push(t);
                ids.push(data.ids[i].clone());
            }
            if plans.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let logits = self.mlm_selected_logits(&mut g, &ids, &masked, &plans)?;
            let lv = g.value(logits);
            let v = lv.shape()[1];
            for (r, &t) in plans.iter().flat_map(|p| p.targets.iter()).enumerate() {
                let row = &lv.data()[r * v..(r + 1) * v];
                let best = argmax(row);
                hit += usize::from(best == t);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::invalid("no tokens to score"));
        }
        Ok(hit as f64 / total as f64)
    }

    /// Attention mass over the prompts at the last prompted layer when every
    /// token of `span` is replaced by `[MASK]`.
    pub fn prompt_attention_probe(
        &self,
        ids: &IdFeatures,
        text: &TextFeatures,
        span: Range<usize>,
    ) -> Result<Vec<f64>> {
        let parts = self.plm_parts()?;
        let mut t = text.clone();
        for p in span.clone() {
            if p < t.len {
                t.ids[p] = MASK;
            }
        }
        let mut g = Graph::new();
        let q = self.ctr.represent(&mut g, &self.store, std::slice::from_ref(ids))?;
        let prompts = self.prompts(&mut g, q)?;
        let layer = prompts
            .iter()
            .rposition(Option::is_some)
            .ok_or_else(|| Error::invalid("model has no prompts to probe"))?;
        let batch = TextBatch::new(std::iter::once(&t))?;
        let enc = parts.encoder.encode(&mut g, &self.store, &batch, &prompts, true)?;
        attention_over_prompts(&enc, &batch, self.arch.encoder.heads, layer, 0)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// `α·ctr + (1-α)·plm` for a scalar `α` and logit vectors.
pub fn fuse(g: &mut Graph, alpha: Var, ctr: Var, plm: Var) -> Result<Var> {
    let one_minus = g.affine(alpha, -1.0, 1.0);
    let a = g.mul(alpha, ctr)?;
    let b = g.mul(one_minus, plm)?;
    g.add(a, b)
}
