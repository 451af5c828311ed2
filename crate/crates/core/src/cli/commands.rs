use std::path::{Path, PathBuf};

use log::info;

use super::config::RunConfig;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{
    encode, header_fields, load_csv, temporal_split, value_spans, write_synthetic, FieldSchema, Sample,
    TokenVocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{longtail_segments, EvalReport, ProbeResult};
use crate::pipeline::{build_dictionaries, Prepared, SPLIT_RATIOS};
use crate::train::{finetune, pretrain, Mode, Model, Parts};

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub report: Option<String>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_samples(cfg: &RunConfig, fields: Option<Vec<String>>) -> Result<(Vec<String>, Vec<Sample>)> {
    let csv = cfg.csv_path();
    let fields = match fields {
        Some(f) => f,
        None if cfg.data.fields.is_empty() => header_fields(&csv)?,
        None => cfg.data.fields.clone(),
    };
    let samples = load_csv(&csv, &fields)?;
    Ok((fields, samples))
}

/// Writes `data.csv` and `metadata.json` into the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let ds = write_synthetic(&cfg.synth, &cfg.out)?;
    info!("wrote {} samples to {}", ds.samples.len(), cfg.out.display());
    Ok(Outcome {
        files: vec![cfg.out.join(crate::data::DATA_FILE), cfg.out.join(crate::data::METADATA_FILE)],
        ..Default::default()
    })
}

/// Field dictionaries and token vocabulary from the training split.
pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<Outcome> {
    let (fields, samples) = load_samples(cfg, None)?;
    let split = temporal_split(&samples, SPLIT_RATIOS)?;
    let (schema, vocab) = build_dictionaries(&fields, &split.train, cfg.data.min_freq, cfg.data.max_vocab)?;
    let (sp, vp) = (cfg.schema_path(), cfg.vocab_path());
    write(&sp, schema.to_json()?)?;
    write(&vp, vocab.to_json()?)?;
    info!("{} fields, {} tokens", schema.num_fields(), vocab.len());
    Ok(Outcome {
        files: vec![sp, vp],
        ..Default::default()
    })
}

fn prepared(cfg: &RunConfig) -> Result<Prepared> {
    let missing = |p: &Path| Error::Config(format!("{} not found; run build-vocab first", p.display()));
    let (sp, vp) = (cfg.schema_path(), cfg.vocab_path());
    if !sp.exists() {
        return Err(missing(&sp));
    }
    if !vp.exists() {
        return Err(missing(&vp));
    }
    let schema = FieldSchema::from_json(&read(&sp)?)?;
    let vocab = TokenVocabulary::from_json(&read(&vp)?)?;
    let (_, samples) = load_samples(cfg, Some(schema.field_names()))?;
    let split = temporal_split(&samples, SPLIT_RATIOS)?;
    Ok(Prepared::with_dictionaries(schema, vocab, split, cfg.encoder.z_max))
}

/// PA-MLM. Writes `epoch-N.ckpt` after every epoch, `best.ckpt` at the
/// lowest epoch loss and `log.txt`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Outcome> {
    let p = prepared(cfg)?;
    let arch = cfg.architecture(p.schema.cardinalities(), p.vocab.len());
    let mut model = Model::new(&arch, Parts::Pretrain, cfg.seed, "init/ctr")?;
    model.zero_prompts = cfg.ablation.no_prompt;
    let dir = cfg.out.join(cfg.pretrain_name());
    let per_epoch = p.train.len().div_ceil(cfg.train.pretrain_batch_size) as u64;
    let mut files = Vec::new();
    let mut best = f64::INFINITY;
    let outcome = pretrain(&mut model, &p.train, &cfg.train, cfg.seed, |epoch, loss, m| {
        info!("pretrain epoch {} loss {loss:.6}", epoch + 1);
        let ck = Checkpoint {
            model: m.clone(),
            schema: p.schema.clone(),
            vocab: p.vocab.clone(),
            meta: CheckpointMeta {
                mode: Mode::PaMlm.to_string(),
                step: per_epoch * (epoch as u64 + 1),
                no_prompt: m.zero_prompts,
                seed: cfg.seed,
                ..Default::default()
            },
        };
        let path = dir.join(format!("epoch-{}.ckpt", epoch + 1));
        ck.save(&path, true)?;
        files.push(path);
        if loss < best {
            best = loss;
            let path = dir.join("best.ckpt");
            ck.save(&path, true)?;
        }
        Ok(())
    })?;
    let log = dir.join("log.txt");
    write(&log, outcome.log.lines.join("\n") + "\n")?;
    files.push(dir.join("best.ckpt"));
    files.push(log);
    Ok(Outcome {
        files,
        ..Default::default()
    })
}

fn report_for(
    cfg: &RunConfig,
    model: &Model,
    schema: &FieldSchema,
    split_train: &[Sample],
    split_test: &[Sample],
    test: &crate::data::Encoded,
) -> Result<EvalReport> {
    let probs = model.predict(test, cfg.train.eval_batch_size)?;
    let fields = (schema.field_index(&cfg.eval.user_field), schema.field_index(&cfg.eval.item_field));
    let segments = match fields {
        (Some(u), Some(i)) => Some(longtail_segments(
            split_train,
            split_test,
            u,
            i,
            cfg.eval.tail_quantile,
            cfg.eval.tail_basis,
        )?),
        _ => None,
    };
    EvalReport::from_predictions(&probs, &test.labels, segments.as_ref())
}

/// Finetunes in the configured mode and writes `model.ckpt`, `report.txt`
/// and `log.txt` into a directory named after the mode and ablations.
pub fn cmd_finetune(cfg: &RunConfig, init: Option<&Path>) -> Result<Outcome> {
    let mode = cfg.train.mode;
    if mode == Mode::PaMlm {
        return Err(Error::Config(
            "finetune needs mode ft-with-plm, ft-without-plm or ctr-scratch".into(),
        ));
    }
    let mut warnings = Vec::new();
    let p = prepared(cfg)?;
    let arch = cfg.architecture(p.schema.cardinalities(), p.vocab.len());
    let control = mode == Mode::FtWithoutPlm && cfg.ablation.no_pretrain;
    let tag = if control { "init/ctr-control" } else { "init/ctr" };
    let mut model = Model::new(&arch, mode.parts(), cfg.seed, tag)?;
    model.zero_prompts = mode == Mode::FtWithPlm && cfg.ablation.no_prompt;

    let from_pretrain = mode != Mode::CtrScratch && !cfg.ablation.no_pretrain;
    if from_pretrain {
        let path = init.map_or_else(|| cfg.out.join(cfg.pretrain_name()).join("best.ckpt"), Path::to_path_buf);
        let ck = Checkpoint::load(&path, Some(&arch))?;
        if ck.schema != p.schema || ck.vocab != p.vocab {
            return Err(Error::Config(format!(
                "{} was trained on different field or token dictionaries",
                path.display()
            )));
        }
        let n = model.load_matching(&ck.model.store)?;
        info!("initialised {n} parameters from {}", path.display());
    } else if let Some(path) = init {
        let why = if mode == Mode::CtrScratch { "ctr-scratch" } else { "--no-pretrain" };
        warnings.push(format!("{why} ignores --init {}", path.display()));
    }

    let outcome = finetune(&mut model, &p.train, &p.val, &cfg.train, cfg.seed)?;
    let best_auc = outcome.val_auc[outcome.best_epoch];
    let mut report = report_for(cfg, &model, &p.schema, &p.split.train, &p.split.test, &p.test)?;
    report.entries = vec![
        ("variant".into(), cfg.finetune_name()),
        ("seed".into(), cfg.seed.to_string()),
        ("best_epoch".into(), (outcome.best_epoch + 1).to_string()),
        ("val_auc".into(), best_auc.to_string()),
        ("alpha".into(), model.alpha_value().map_or("na".into(), |a| a.to_string())),
    ];
    let text = report.to_text();

    let dir = cfg.out.join(cfg.finetune_name());
    let alpha = model.alpha_value();
    let ck = Checkpoint {
        model,
        schema: p.schema.clone(),
        vocab: p.vocab.clone(),
        meta: CheckpointMeta {
            mode: mode.to_string(),
            step: outcome.steps as u64,
            val_auc: Some(best_auc),
            alpha,
            no_prompt: cfg.ablation.no_prompt && mode == Mode::FtWithPlm,
            seed: cfg.seed,
        },
    };
    let (ckp, rp, lp) = (dir.join("model.ckpt"), dir.join("report.txt"), dir.join("log.txt"));
    ck.save(&ckp, false)?;
    write(&rp, &text)?;
    write(&lp, outcome.log.lines.join("\n") + "\n")?;
    Ok(Outcome {
        files: vec![ckp, rp, lp],
        warnings,
        report: Some(text),
    })
}

/// Scores a finetuned checkpoint on the test split: overall metrics, the
/// long-tail cells and, with `probe_field`, prompt attention while that
/// field's value is masked.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, probe_field: Option<&str>) -> Result<Outcome> {
    let path = checkpoint.map_or_else(|| cfg.out.join(cfg.finetune_name()).join("model.ckpt"), Path::to_path_buf);
    let ck = Checkpoint::load(&path, None)?;
    if ck.model.parts() == Parts::Pretrain {
        return Err(Error::Config(format!(
            "{} is a PA-MLM checkpoint; evaluate a finetuned one",
            path.display()
        )));
    }
    let (_, samples) = load_samples(cfg, Some(ck.schema.field_names()))?;
    let split = temporal_split(&samples, SPLIT_RATIOS)?;
    let z_max = ck.model.arch.encoder.z_max;
    let test = encode(&split.test, &ck.schema, &ck.vocab, z_max);
    let mut report = report_for(cfg, &ck.model, &ck.schema, &split.train, &split.test, &test)?;
    report.entries = vec![
        ("mode".into(), ck.meta.mode.clone()),
        ("seed".into(), ck.meta.seed.to_string()),
        ("test_samples".into(), test.len().to_string()),
    ];
    if let Some(field) = probe_field {
        let f = ck
            .schema
            .field_index(field)
            .ok_or_else(|| Error::Config(format!("unknown probe field `{field}`")))?;
        if ck.model.plm.is_none() || ck.model.arch.encoder.k == 0 {
            return Err(Error::Config("the probe needs a model with prompts (ft-with-plm, k > 0)".into()));
        }
        let n = cfg.eval.probe_samples.min(test.len()).max(1);
        let mut scores = vec![0.0; ck.model.arch.encoder.k];
        for i in 0..n {
            let span = value_spans(&split.test[i], &ck.schema, z_max)[f].clone();
            let s = ck.model.prompt_attention_probe(&test.ids[i], &test.text[i], span)?;
            for (acc, x) in scores.iter_mut().zip(s) {
                *acc += x / n as f64;
            }
        }
        report.probe = Some(ProbeResult {
            field: field.to_string(),
            scores,
        });
    }
    let text = report.to_text();
    let rp = cfg.out.join("evaluate").join("report.txt");
    write(&rp, &text)?;
    Ok(Outcome {
        files: vec![rp],
        report: Some(text),
        ..Default::default()
    })
}
