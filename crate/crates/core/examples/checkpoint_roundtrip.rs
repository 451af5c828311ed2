//! Saves a finetuned model, reloads it and checks that parameters and
//! predictions are bit-identical. Loading against a different architecture
//! fails with the first mismatching key.
//!
//! cargo run --example checkpoint_roundtrip

use clickprompt::checkpoint::{named_values, Checkpoint, CheckpointMeta};
use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, SynthConfig};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{finetune, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 1500,
        ..SynthConfig::default()
    })?;
    let p = Prepared::new(&ds.fields, &ds.samples, 64, 1, 30_000)?;
    let arch = Architecture {
        ctr: CtrConfig {
            embed_dim: 8,
            hidden: 32,
            ..CtrConfig::default()
        },
        encoder: EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ff: 32,
            z_max: 64,
            k: 3,
            ..EncoderConfig::default()
        },
        layerwise: true,
        cardinalities: p.schema.cardinalities(),
        vocab_size: p.vocab.len(),
    };
    let mut model = Model::new(&arch, Parts::Fused, 0, "init/ctr")?;
    let cfg = TrainConfig {
        epochs: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let out = finetune(&mut model, &p.train, &p.val, &cfg, 0)?;

    let dir = std::env::temp_dir().join("clickprompt-checkpoint-example");
    let path = dir.join("model.ckpt");
    let ck = Checkpoint {
        model,
        schema: p.schema.clone(),
        vocab: p.vocab.clone(),
        meta: CheckpointMeta {
            mode: "ft-with-plm".into(),
            step: out.steps as u64,
            val_auc: out.val_auc.get(out.best_epoch).copied(),
            ..Default::default()
        },
    };
    ck.save(&path, false)?;
    let loaded = Checkpoint::load(&path, Some(&arch))?;
    let same_params = named_values(&ck.model.store) == named_values(&loaded.model.store);
    let before = ck.model.predict(&p.test, 256)?;
    let after = loaded.model.predict(&p.test, 256)?;
    let same_preds = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "{} ({} bytes): {} tensors, parameters identical {same_params}, predictions identical {same_preds}",
        path.display(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        loaded.model.store.len()
    );

    let mut other = arch.clone();
    other.encoder.k = 4;
    match Checkpoint::load(&path, Some(&other)) {
        Ok(_) => println!("unexpected: mismatched architecture loaded"),
        Err(e) => println!("loading with k = 4: {e}"),
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
