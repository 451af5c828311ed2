//! Prompt-augmented MLM. The synthetic `answer` field is a deterministic
//! function of the user and item IDs, so the encoder can only fill in a
//! masked answer by reading the prompts the CTR model generates. Accuracy
//! with the prompts zeroed shows how much comes through that channel.
//!
//! cargo run --example pa_mlm_pretrain

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, value_spans, SynthConfig, ANSWER_FIELD};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{pretrain, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 6000,
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
        log_every: 0,
        ..TrainConfig::default()
    };
    let f = p.schema.field_index(ANSWER_FIELD).expect("answer field");
    let spans: Vec<_> = p.split.test.iter().map(|s| value_spans(s, &p.schema, 64)[f].clone()).collect();

    let mut model = Model::new(&arch, Parts::Pretrain, 1, "init/ctr")?;
    pretrain(&mut model, &p.train, &cfg, 1, |epoch, loss, m| {
        let with = m.masked_span_accuracy(&p.test, &spans, 64)?;
        let mut zeroed = m.clone();
        zeroed.zero_prompts = true;
        let without = zeroed.masked_span_accuracy(&p.test, &spans, 64)?;
        println!("epoch {} loss {loss:.4}  answer accuracy {with:.3} (prompts zeroed {without:.3})", epoch + 1);
        Ok(())
    })?;
    Ok(())
}
