//! "what is what" textualisation and the word-level tokenizer.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::sample::Sample;
use super::schema::FieldSchema;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const NUM_RESERVED: usize = 3;

const UNK_TEXT: &str = "[UNK]";
const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", UNK_TEXT, "[MASK]"];

/// Default sequence cap; fits the template for up to 15 single-word fields.
pub const DEFAULT_Z_MAX: usize = 64;

fn segment(name: &str, value: &str) -> String {
    let value = value.trim();
    let value = if value.is_empty() {
        UNK_TEXT.to_string()
    } else {
        value.to_lowercase()
    };
    format!("{} is {} .", name.to_lowercase(), value)
}

/// `<field> is <value> .` per field, joined by single spaces.
pub fn textualize(sample: &Sample, schema: &FieldSchema) -> String {
    schema
        .fields()
        .iter()
        .zip(&sample.values)
        .map(|(f, v)| segment(&f.name, v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits text into lowercased alphanumeric runs and single punctuation
/// marks. The literal `[UNK]` emitted for empty values stays one token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(UNK_TEXT) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(UNK_TEXT.to_string());
            rest = &rest[UNK_TEXT.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token dictionary with `[PAD]=0`, `[UNK]=1`, `[MASK]=2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl TokenVocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocabulary { tokens, lookup }
    }

    /// Counts tokens of the training texts; keeps those with frequency
    /// ≥ `min_freq`, ranked by descending frequency then lexicographically,
    /// capped at `max_size` non-reserved entries.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                if RESERVED.contains(&w.as_str()) {
                    continue;
                }
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.tokens.len() < NUM_RESERVED
            || raw.tokens[..NUM_RESERVED]
                .iter()
                .zip(RESERVED)
                .any(|(a, b)| a != b)
        {
            return Err(Error::invalid("vocabulary does not start with the reserved tokens"));
        }
        Ok(Self::from_tokens(raw.tokens))
    }
}

/// Token ids padded to a fixed length with a mask marking real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextFeatures {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TextFeatures {
    pub fn z(&self) -> usize {
        self.ids.len()
    }
}

/// Maps words to ids (`[UNK]` when absent), keeps the first `z_max`, pads
/// with `[PAD]`. Returns the features and the number of dropped tokens.
pub fn tokenize(text: &str, vocab: &TokenVocabulary, z_max: usize) -> (TextFeatures, usize) {
    let words = split_words(text);
    let dropped = words.len().saturating_sub(z_max);
    let mut ids: Vec<usize> = words
        .iter()
        .take(z_max)
        .map(|w| {
            if w == UNK_TEXT {
                UNK
            } else {
                vocab.id(w).unwrap_or(UNK)
            }
        })
        .collect();
    let len = ids.len();
    ids.resize(z_max, PAD);
    let mask = (0..z_max).map(|i| i < len).collect();
    (TextFeatures { ids, mask, len }, dropped)
}

/// Token-position range of each field's segment in the textualised sample,
/// clipped to `z_max`.
pub fn field_spans(sample: &Sample, schema: &FieldSchema, z_max: usize) -> Vec<Range<usize>> {
    let mut start = 0;
    schema
        .fields()
        .iter()
        .zip(&sample.values)
        .map(|(f, v)| {
            let n = split_words(&segment(&f.name, v)).len();
            let r = start.min(z_max)..(start + n).min(z_max);
            start += n;
            r
        })
        .collect()
}

/// Token-position range of each field's value inside its segment (the
/// words between `<field> is` and the closing period), clipped to `z_max`.
pub fn value_spans(sample: &Sample, schema: &FieldSchema, z_max: usize) -> Vec<Range<usize>> {
    let mut start = 0;
    schema
        .fields()
        .iter()
        .zip(&sample.values)
        .map(|(f, v)| {
            let total = split_words(&segment(&f.name, v)).len();
            let name = split_words(&f.name.to_lowercase()).len();
            let from = start + name + 1;
            let to = start + total - 1;
            start += total;
            from.min(z_max)..to.min(z_max)
        })
        .collect()
}
