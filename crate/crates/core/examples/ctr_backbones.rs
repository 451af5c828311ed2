//! Trains each CTR backbone from scratch on synthetic data and reports test
//! AUC and log loss.
//!
//! cargo run --example ctr_backbones

use clickprompt::ctr::{Backbone, CtrConfig};
use clickprompt::data::{generate_synthetic, SynthConfig};
use clickprompt::eval::{auc, logloss};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{finetune, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 6000,
        ..SynthConfig::default()
    })?;
    let p = Prepared::new(&ds.fields, &ds.samples, 64, 1, 30_000)?;
    let cfg = TrainConfig {
        batch_size: 64,
        epochs: 4,
        log_every: 0,
        ..TrainConfig::default()
    };
    for backbone in [Backbone::Fm, Backbone::Dnn, Backbone::Dcnv2, Backbone::Autoint] {
        let arch = Architecture {
            ctr: CtrConfig {
                backbone,
                embed_dim: 16,
                hidden: 64,
                ..CtrConfig::default()
            },
            encoder: EncoderConfig::default(),
            layerwise: true,
            cardinalities: p.schema.cardinalities(),
            vocab_size: p.vocab.len(),
        };
        let mut model = Model::new(&arch, Parts::Ctr, 0, "init/ctr")?;
        let out = finetune(&mut model, &p.train, &p.val, &cfg, 0)?;
        let probs = model.predict(&p.test, 256)?;
        println!(
            "{:<8} best epoch {}  test AUC {:.4}  logloss {:.4}",
            backbone.to_string(),
            out.best_epoch + 1,
            auc(&probs, &p.test.labels)?,
            logloss(&probs, &p.test.labels)?
        );
    }
    Ok(())
}
