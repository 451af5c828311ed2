//! Test metrics split by long-tail users and items, with the tail taken
//! either as the rarest 10% of training values or as the rarest values
//! covering 10% of training impressions. Unseen values count as tail.
//!
//! cargo run --example evaluate_longtail

use clickprompt::ctr::CtrConfig;
use clickprompt::data::{generate_synthetic, SynthConfig, ITEM_FIELD, USER_FIELD};
use clickprompt::eval::{longtail_segments, EvalReport, TailBasis};
use clickprompt::pipeline::Prepared;
use clickprompt::plm::EncoderConfig;
use clickprompt::train::{finetune, Architecture, Model, Parts, TrainConfig};

fn main() -> clickprompt::error::Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 10_000,
        n_users: 200,
        n_items: 400,
        user_zipf: 0.8,
        item_zipf: 0.8,
        late_users: 0.25,
        late_items: 0.25,
        ..SynthConfig::default()
    })?;
    let p = Prepared::new(&ds.fields, &ds.samples, 64, 1, 30_000)?;
    let arch = Architecture {
        ctr: CtrConfig {
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
    let cfg = TrainConfig {
        batch_size: 64,
        epochs: 5,
        log_every: 0,
        ..TrainConfig::default()
    };
    finetune(&mut model, &p.train, &p.val, &cfg, 0)?;

    let (u, i) = (
        p.schema.field_index(USER_FIELD).expect("user field"),
        p.schema.field_index(ITEM_FIELD).expect("item field"),
    );
    for basis in [TailBasis::Entity, TailBasis::Volume] {
        let seg = longtail_segments(&p.split.train, &p.split.test, u, i, 0.1, basis)?;
        let report = EvalReport::from_predictions(&model.predict(&p.test, 256)?, &p.test.labels, Some(&seg))?;
        println!("# tail basis {basis:?}\n{}", report.to_text());
    }
    Ok(())
}
