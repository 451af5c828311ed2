//! How the encoder's attention to the prompts is shared among the K
//! prompts (last prompted layer, averaged over heads and test samples)
//! while one field's value is masked.
//!
//! cargo run --example prompt_probe

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, value_spans, SynthConfig, ANSWER_FIELD};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{pretrain, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 4000,
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
        pretrain_epochs: 4,
        lr_pretrain: 3e-3,
        log_every: 0,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&arch, Parts::Pretrain, 0, "init/ctr")?;
    pretrain(&mut model, &p.train, &cfg, 0, |_, _, _| Ok(()))?;

    let n = 64.min(p.test.len());
    for field in p.schema.field_names() {
        let f = p.schema.field_index(&field).expect("field");
        let mut scores = vec![0.0; arch.encoder.k];
        for i in 0..n {
            let span = value_spans(&p.split.test[i], &p.schema, 64)[f].clone();
            for (acc, s) in scores.iter_mut().zip(model.prompt_attention_probe(&p.test.ids[i], &p.test.text[i], span)?) {
                *acc += s / n as f64;
            }
        }
        let entropy: f64 = -scores.iter().filter(|&&s| s > 0.0).map(|s| s * s.ln()).sum::<f64>();
        let mark = if field == ANSWER_FIELD { "  (ID-determined)" } else { "" };
        println!("{field:<10} per prompt {scores:.3?}  entropy {entropy:.3}{mark}");
    }
    Ok(())
}
