//! Raw samples to encoded splits: temporal split, schema and vocabulary
//! from the training part only, then ID and token encoding.

use crate::data::{
    encode, temporal_split, textualize, Encoded, FieldSchema, Sample, Split, TokenVocabulary,
};
use crate::error::Result;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Schema and vocabulary built from a training split.
pub fn build_dictionaries(
    fields: &[String],
    train: &[Sample],
    min_freq: usize,
    max_vocab: usize,
) -> Result<(FieldSchema, TokenVocabulary)> {
    let schema = FieldSchema::build(fields, train)?;
    let texts: Vec<String> = train.iter().map(|s| textualize(s, &schema)).collect();
    let vocab = TokenVocabulary::build(&texts, min_freq, max_vocab)?;
    Ok((schema, vocab))
}

/// Split samples plus their encoded form.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub schema: FieldSchema,
    pub vocab: TokenVocabulary,
    pub split: Split,
    pub train: Encoded,
    pub val: Encoded,
    pub test: Encoded,
}

impl Prepared {
    pub fn new(
        fields: &[String],
        samples: &[Sample],
        z_max: usize,
        min_freq: usize,
        max_vocab: usize,
    ) -> Result<Prepared> {
        let split = temporal_split(samples, SPLIT_RATIOS)?;
        let (schema, vocab) = build_dictionaries(fields, &split.train, min_freq, max_vocab)?;
        Ok(Prepared::with_dictionaries(schema, vocab, split, z_max))
    }

    pub fn with_dictionaries(
        schema: FieldSchema,
        vocab: TokenVocabulary,
        split: Split,
        z_max: usize,
    ) -> Prepared {
        let train = encode(&split.train, &schema, &vocab, z_max);
        let val = encode(&split.val, &schema, &vocab, z_max);
        let test = encode(&split.test, &schema, &vocab, z_max);
        Prepared {
            schema,
            vocab,
            split,
            train,
            val,
            test,
        }
    }
}
