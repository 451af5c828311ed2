//! PA-MLM pretraining, the two finetuning regimes, learning-rate schedule
//! and model selection.

mod masking;
mod model;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use masking::{apply_masking, masked_count, MaskAction, MaskingPlan, MASK_RATIO};
pub use model::{fuse, Architecture, Model, Parts, PlmParts, ALPHA_INIT, ALPHA_NAME};

use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::eval::{auc, logloss};
use crate::numeric::{AdamW, Graph, ParamGroup, ParamId, ParamStore, Tensor};
use crate::rng::stream;
use crate::{ctr, plm, prompt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    PaMlm,
    FtWithPlm,
    FtWithoutPlm,
    CtrScratch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PaMlm => "pa-mlm",
            Mode::FtWithPlm => "ft-with-plm",
            Mode::FtWithoutPlm => "ft-without-plm",
            Mode::CtrScratch => "ctr-scratch",
        }
    }

    /// Components a model trained in this mode carries.
    pub fn parts(self) -> Parts {
        match self {
            Mode::PaMlm => Parts::Pretrain,
            Mode::FtWithPlm => Parts::Fused,
            Mode::FtWithoutPlm | Mode::CtrScratch => Parts::Ctr,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pa-mlm" => Ok(Mode::PaMlm),
            "ft-with-plm" => Ok(Mode::FtWithPlm),
            "ft-without-plm" => Ok(Mode::FtWithoutPlm),
            "ctr-scratch" => Ok(Mode::CtrScratch),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected pa-mlm, ft-with-plm, ft-without-plm or ctr-scratch)"
            ))),
        }
    }
}

/// Variant switches for the prompt-strategy and fusion ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Prompts only at the input layer.
    pub no_layerwise: bool,
    /// Zero prompts in place of generated ones.
    pub no_prompt: bool,
    /// Finetune from random initialisation.
    pub no_pretrain: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_ctr: f64,
    /// Encoder learning rate while finetuning; 0 freezes it.
    pub lr_plm: f64,
    pub lr_pretrain: f64,
    pub batch_size: usize,
    pub pretrain_batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub log_every: usize,
    /// Keep the prompt generator fixed during finetuning with the PLM.
    pub freeze_prompt: bool,
    /// Keep the CTR model fixed during PA-MLM (diagnostic).
    pub freeze_ctr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::PaMlm,
            lr_ctr: 1e-3,
            lr_plm: 5e-5,
            lr_pretrain: 5e-5,
            batch_size: 256,
            pretrain_batch_size: 1024,
            eval_batch_size: 128,
            epochs: 10,
            pretrain_epochs: 20,
            warmup_ratio: 0.0,
            weight_decay: 0.01,
            max_grad_norm: 0.0,
            log_every: 100,
            freeze_prompt: false,
            freeze_ctr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.pretrain_batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        for (name, lr) in [
            ("lr_ctr", self.lr_ctr),
            ("lr_plm", self.lr_plm),
            ("lr_pretrain", self.lr_pretrain),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be non-negative");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Linear warmup from 0 over `warmup_ratio · total_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = (warmup_ratio * total).floor();
    if step < warm {
        base_lr * step / warm
    } else {
        base_lr * (total - step) / (total - warm)
    }
}

/// Index of the highest validation AUC; ties go to the earliest.
pub fn select_best(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::invalid("no evaluated checkpoints"));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `step=… split=… loss=… auc=… alpha=…`.
pub fn log_line(step: usize, split: &str, loss: f64, auc: Option<f64>, alpha: Option<f64>) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"));
    format!(
        "step={step} split={split} loss={loss:.6} auc={} alpha={}",
        opt(auc),
        opt(alpha)
    )
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &format!("shuffle/{epoch}")));
    order
}

fn ids_of(store: &ParamStore, prefixes: &[&str]) -> Vec<ParamId> {
    prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect()
}

/// Keeps only parameters that received a gradient this step.
fn group(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Option<ParamGroup> {
    let live: Vec<ParamId> = ids.into_iter().filter(|&id| store.get(id).grad.is_some()).collect();
    (!live.is_empty() && lr > 0.0).then(|| ParamGroup::new(live, lr))
}

/// Per-step record shared by both loops.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub lines: Vec<String>,
}

impl TrainLog {
    fn push(&mut self, line: String) {
        log::info!("{line}");
        self.lines.push(line);
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Mean MLM loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub log: TrainLog,
}

/// One PA-MLM update on the samples `idx` of `data`. Returns the loss.
pub fn pa_mlm_step(
    model: &mut Model,
    data: &Encoded,
    idx: &[usize],
    cfg: &TrainConfig,
    lr_scale: f64,
    rng: &mut crate::rng::StreamRng,
) -> Result<f64> {
    let vocab = model.arch.vocab_size;
    let mut masked = Vec::with_capacity(idx.len());
    let mut plans = Vec::with_capacity(idx.len());
    for &i in idx {
        let (x, plan) = apply_masking(&data.text[i], vocab, MASK_RATIO, rng);
        masked.push(x);
        plans.push(plan);
    }
    let ids: Vec<_> = idx.iter().map(|&i| data.ids[i].clone()).collect();
    let mut g = Graph::new();
    let loss = model.mlm_loss(&mut g, &ids, &masked, &plans)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    model.store.accumulate(&g, &grads);
    let mut trainable = vec![plm::PREFIX];
    if !cfg.freeze_ctr {
        trainable.push(ctr::PREFIX);
    }
    if !cfg.freeze_prompt {
        trainable.push(prompt::PREFIX);
    }
    let ids = ids_of(&model.store, &trainable);
    let groups: Vec<ParamGroup> = group(&model.store, ids, cfg.lr_pretrain * lr_scale).into_iter().collect();
    apply(model, cfg, &groups)?;
    Ok(value)
}

/// One finetuning update. Fused models train CTR, prompt generator, pooling
/// head and α at `lr_ctr` and the encoder at `lr_plm`; CTR-only models
/// train the CTR parameters at `lr_ctr`.
pub fn finetune_step(
    model: &mut Model,
    data: &Encoded,
    idx: &[usize],
    cfg: &TrainConfig,
    lr_scale: f64,
) -> Result<f64> {
    let ids: Vec<_> = idx.iter().map(|&i| data.ids[i].clone()).collect();
    let text: Vec<_> = idx.iter().map(|&i| data.text[i].clone()).collect();
    let labels: Vec<f64> = idx.iter().map(|&i| f64::from(data.labels[i])).collect();
    let mut g = Graph::new();
    let z = model.logits(&mut g, &ids, &text)?;
    let p = g.sigmoid(z)?;
    let loss = g.bce_loss(p, &labels)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    model.store.accumulate(&g, &grads);
    let groups: Vec<ParamGroup> = match model.parts() {
        Parts::Ctr => group(&model.store, ids_of(&model.store, &[ctr::PREFIX]), cfg.lr_ctr * lr_scale)
            .into_iter()
            .collect(),
        Parts::Fused => {
            let mut fast = vec![ctr::PREFIX, plm::HEAD_PREFIX, ALPHA_NAME];
            if !cfg.freeze_prompt {
                fast.push(prompt::PREFIX);
            }
            let a = group(&model.store, ids_of(&model.store, &fast), cfg.lr_ctr * lr_scale);
            let b = group(&model.store, ids_of(&model.store, &[plm::PREFIX]), cfg.lr_plm * lr_scale);
            a.into_iter().chain(b).collect()
        }
        Parts::Pretrain => return Err(Error::invalid("cannot finetune a pretraining model")),
    };
    apply(model, cfg, &groups)?;
    Ok(value)
}

fn apply(model: &mut Model, cfg: &TrainConfig, groups: &[ParamGroup]) -> Result<()> {
    if cfg.max_grad_norm > 0.0 {
        model.store.clip_grad_norm(cfg.max_grad_norm);
    }
    cfg.optimizer().step(&mut model.store, groups)?;
    model.store.zero_grad();
    Ok(())
}

/// PA-MLM over `cfg.pretrain_epochs` epochs. `on_epoch(epoch, loss, model)`
/// runs after every epoch (checkpointing).
pub fn pretrain(
    model: &mut Model,
    train: &Encoded,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if model.parts() != Parts::Pretrain {
        return Err(Error::invalid("PA-MLM needs a model with prompt generator and encoder"));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let bs = cfg.pretrain_batch_size;
    let per_epoch = train.len().div_ceil(bs);
    let total = per_epoch * cfg.pretrain_epochs;
    let mut log = TrainLog::default();
    let mut epoch_loss = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0;
    let mut window = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let order = shuffled(train.len(), seed, epoch);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(bs).enumerate() {
            let mut rng = stream(seed, &format!("mask/{epoch}/{b}"));
            let scale = lr_schedule(step, total, cfg.warmup_ratio, 1.0);
            let loss = pa_mlm_step(model, train, idx, cfg, scale, &mut rng)?;
            sum += loss;
            window.push(loss);
            step += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                log.push(log_line(step, "train", mean, None, None));
                window.clear();
            }
        }
        let mean = sum / per_epoch as f64;
        log.push(log_line(step, "epoch", mean, None, None));
        epoch_loss.push(mean);
        on_epoch(epoch, mean, model)?;
    }
    Ok(PretrainOutcome {
        epoch_loss,
        steps: step,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub val_auc: Vec<f64>,
    pub val_logloss: Vec<f64>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub steps: usize,
    pub log: TrainLog,
}

/// Finetunes for `cfg.epochs` epochs, scoring validation AUC after each,
/// and leaves the model at the best epoch.
pub fn finetune(
    model: &mut Model,
    train: &Encoded,
    val: &Encoded,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("empty training or validation split"));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("finetuning needs at least one epoch".into()));
    }
    let bs = cfg.batch_size;
    let per_epoch = train.len().div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let mut log = TrainLog::default();
    let mut val_auc = Vec::with_capacity(cfg.epochs);
    let mut val_logloss = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Vec<Tensor>> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), seed, epoch);
        let mut sum = 0.0;
        for idx in order.chunks(bs) {
            let scale = lr_schedule(step, total, cfg.warmup_ratio, 1.0);
            sum += finetune_step(model, train, idx, cfg, scale)?;
            step += 1;
        }
        let alpha = model.alpha_value();
        log.push(log_line(step, "train", sum / per_epoch as f64, None, alpha));
        let probs = model.predict(val, cfg.eval_batch_size)?;
        let a = auc(&probs, &val.labels)?;
        let ll = logloss(&probs, &val.labels)?;
        log.push(log_line(step, "val", ll, Some(a), alpha));
        val_auc.push(a);
        val_logloss.push(ll);
        if select_best(&val_auc)? == epoch {
            best = Some(model.store.ids().map(|id| model.store.value(id).clone()).collect());
        }
    }
    let best_epoch = select_best(&val_auc)?;
    if let Some(values) = best {
        let ids: Vec<ParamId> = model.store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            *model.store.value_mut(id) = v;
        }
    }
    Ok(FinetuneOutcome {
        val_auc,
        val_logloss,
        best_epoch,
        steps: step,
        log,
    })
}
