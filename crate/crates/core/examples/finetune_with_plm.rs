//! Full ClickPrompt: PA-MLM pretraining, then joint finetuning of the CTR
//! model, prompt generator and encoder with the learnable fusion of the two
//! prediction heads.
//!
//! cargo run --example finetune_with_plm

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, SynthConfig};
use clickprompt::eval::{auc, relative_improvement};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{finetune, pretrain, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 6000,
        answer_field: false,
        ..SynthConfig::default()
    })?;
    let p = Prepared::new(&ds.fields, &ds.samples, 64, 1, 30_000)?;
    let arch = Architecture {
        ctr: CtrConfig {
            embed_dim: 16,
            hidden: 64,
            ..CtrConfig::default()
        },
        encoder: EncoderConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            ff: 64,
            z_max: 64,
            k: 5,
            ..EncoderConfig::default()
        },
        layerwise: true,
        cardinalities: p.schema.cardinalities(),
        vocab_size: p.vocab.len(),
    };
    let cfg = TrainConfig {
        pretrain_batch_size: 32,
        pretrain_epochs: 3,
        lr_pretrain: 3e-3,
        batch_size: 64,
        epochs: 4,
        warmup_ratio: 0.1,
        log_every: 20,
        ..TrainConfig::default()
    };

    let mut pre = Model::new(&arch, Parts::Pretrain, 0, "init/ctr")?;
    pretrain(&mut pre, &p.train, &cfg, 0, |e, l, _| {
        println!("pa-mlm epoch {} loss {l:.4}", e + 1);
        Ok(())
    })?;

    let mut model = Model::new(&arch, Parts::Fused, 0, "init/ctr")?;
    model.load_matching(&pre.store)?;
    let out = finetune(&mut model, &p.train, &p.val, &cfg, 0)?;
    for line in out.log.lines.iter().rev().take(3).rev() {
        println!("{line}");
    }
    let fused = auc(&model.predict(&p.test, 256)?, &p.test.labels)?;

    let mut scratch = Model::new(&arch, Parts::Ctr, 0, "init/ctr")?;
    finetune(&mut scratch, &p.train, &p.val, &cfg, 0)?;
    let base = auc(&scratch.predict(&p.test, 256)?, &p.test.labels)?;
    println!(
        "ft-with-plm test AUC {fused:.4} (alpha {:.3}), ctr-scratch {base:.4}, rel. impr. {:+.2}%",
        model.alpha_value().unwrap_or(f64::NAN),
        relative_improvement(fused, base)
    );
    Ok(())
}
