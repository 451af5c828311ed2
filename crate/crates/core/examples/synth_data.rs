//! Generates the synthetic CTR corpus and shows both views of a sample:
//! the categorical ID features and the textualised sentence.
//!
//! cargo run --example synth_data

use clickprompt::data::{generate_synthetic, textualize, SynthConfig};
use clickprompt::pipeline::Prepared;

fn main() -> clickprompt::error::Result<()> {
    let cfg = SynthConfig {
        n_samples: 2000,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;
    println!("fields: {}", ds.fields.join(", "));
    println!("click rate {:.3}", ds.metadata.empirical_rate);

    let p = Prepared::new(&ds.fields, &ds.samples, 64, 1, 30_000)?;
    println!(
        "train/val/test {}/{}/{}, vocabulary {} tokens, cardinalities {:?}",
        p.train.len(),
        p.val.len(),
        p.test.len(),
        p.vocab.len(),
        p.schema.cardinalities()
    );
    for (i, s) in p.split.train.iter().take(3).enumerate() {
        println!();
        println!("label {}  ids {:?}", s.label, p.train.ids[i].indices);
        println!("text  {}", textualize(s, &p.schema));
        let t = &p.train.text[i];
        println!("tokens {:?}", &t.ids[..t.len]);
    }
    Ok(())
}
