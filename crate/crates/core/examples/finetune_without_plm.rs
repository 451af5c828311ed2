//! PA-MLM pretraining as an initialiser: finetune only the CTR model that
//! generated the prompts and compare it with the same model trained from
//! scratch. Inference cost is that of the plain CTR model.
//!
//! cargo run --example finetune_without_plm

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, SynthConfig};
use clickprompt::eval::auc;
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{finetune, pretrain, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 10_000,
        n_users: 200,
        n_items: 400,
        user_zipf: 0.8,
        item_zipf: 0.8,
        taste_scale: 0.0,
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
        pretrain_epochs: 5,
        lr_pretrain: 3e-3,
        batch_size: 32,
        epochs: 10,
        log_every: 0,
        ..TrainConfig::default()
    };

    let mut pre = Model::new(&arch, Parts::Pretrain, 0, "init/ctr")?;
    let out = pretrain(&mut pre, &p.train, &cfg, 0, |_, _, _| Ok(()))?;
    println!("PA-MLM epoch losses {:.4?}", out.epoch_loss);

    let mut warm = Model::new(&arch, Parts::Ctr, 0, "init/ctr")?;
    let n = warm.load_matching(&pre.store)?;
    finetune(&mut warm, &p.train, &p.val, &cfg, 0)?;
    let mut cold = Model::new(&arch, Parts::Ctr, 0, "init/ctr")?;
    finetune(&mut cold, &p.train, &p.val, &cfg, 0)?;

    let a = auc(&warm.predict(&p.test, 256)?, &p.test.labels)?;
    let b = auc(&cold.predict(&p.test, 256)?, &p.test.labels)?;
    println!("ft-without-plm ({n} tensors from PA-MLM) test AUC {a:.4}");
    println!("ctr-scratch                          test AUC {b:.4}");
    println!("gain {:+.4}", a - b);
    Ok(())
}
