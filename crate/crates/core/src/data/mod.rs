//! Dataset schema, CSV ingestion, temporal splitting, textualisation and
//! tokenisation, plus the synthetic log generator.

mod sample;
mod schema;
pub mod synth;
mod text;

pub use sample::{header_fields, load_csv, temporal_split, write_csv, Sample, Split, LABEL_COLUMN, TIMESTAMP_COLUMN};
pub use schema::{Field, FieldSchema, IdFeatures};
pub use synth::{
    generate_synthetic, write_synthetic, SynthConfig, SynthDataset, SynthMetadata, ANSWER_FIELD, DATA_FILE, ITEM_FIELD,
    METADATA_FILE, USER_FIELD,
};
pub use text::{
    field_spans, split_words, textualize, tokenize, value_spans, TextFeatures, TokenVocabulary, DEFAULT_Z_MAX,
    MASK, NUM_RESERVED, PAD, UNK,
};

/// Both modalities of a list of samples, index-aligned.
#[derive(Clone, Debug, Default)]
pub struct Encoded {
    pub ids: Vec<IdFeatures>,
    pub text: Vec<TextFeatures>,
    pub labels: Vec<u8>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Encoded {
        Encoded {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            text: idx.iter().map(|&i| self.text[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Encodes samples into ID and token features; logs how many sequences
/// were cut at `z_max`.
pub fn encode(
    samples: &[Sample],
    schema: &FieldSchema,
    vocab: &TokenVocabulary,
    z_max: usize,
) -> Encoded {
    let mut out = Encoded::default();
    let mut truncated = 0usize;
    for s in samples {
        out.ids.push(schema.encode_ids(s));
        let (tf, dropped) = tokenize(&textualize(s, schema), vocab, z_max);
        truncated += usize::from(dropped > 0);
        out.text.push(tf);
        out.labels.push(s.label);
    }
    if truncated > 0 {
        log::info!("{truncated} of {} sequences truncated to {z_max} tokens", samples.len());
    }
    out
}
