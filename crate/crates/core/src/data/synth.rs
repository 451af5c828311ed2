//! Synthetic click logs with planted collaborative and semantic structure.
//!
//! Users and items carry a latent cluster. The click logit combines a
//! cluster-by-cluster affinity with hidden per-entity terms, so part of the
//! signal is visible in text and part only through IDs:
//!
//! * item titles are unique per item but draw two of their three words from
//!   a word list owned by the item's cluster, so items of one cluster share
//!   title tokens ("semantic twins");
//! * user profiles do the same with the user's cluster;
//! * per-user and per-item biases, a low-rank interaction term and each
//!   user's hidden taste for item clusters never appear in text, so the
//!   taste term needs the user's ID and the item's text together;
//! * the optional `answer` field holds a word that is a hash of the
//!   (user, item) pair: text context cannot predict it, but its category id
//!   is part of the ID features.
//!
//! Item popularity follows Zipf(`item_zipf`); a share of users and items
//! only appear in the last part of the timeline.

use std::collections::HashSet;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::{write_csv, Sample};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub words_per_cluster: usize,
    pub item_zipf: f64,
    pub user_zipf: f64,
    /// Fraction of users / items first appearing in the last `late_share`
    /// of the timeline.
    pub late_users: f64,
    pub late_items: f64,
    pub late_share: f64,
    pub base_rate: f64,
    pub affinity_scale: f64,
    pub bias_std: f64,
    pub interaction_scale: f64,
    /// Weight of each user's hidden taste for item clusters.
    pub taste_scale: f64,
    pub answer_field: bool,
    pub answer_alphabet: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_samples: 10_000,
            n_users: 200,
            n_items: 300,
            n_clusters: 4,
            words_per_cluster: 8,
            item_zipf: 1.2,
            user_zipf: 0.8,
            late_users: 0.1,
            late_items: 0.15,
            late_share: 0.2,
            base_rate: 0.35,
            affinity_scale: 1.5,
            bias_std: 0.5,
            interaction_scale: 1.0,
            taste_scale: 1.0,
            answer_field: true,
            answer_alphabet: 8,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.n_samples < 10 {
            return bad("n_samples must be at least 10");
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_clusters == 0 {
            return bad("users, items and clusters must be positive");
        }
        if self.words_per_cluster < 2 || self.words_per_cluster > 64 {
            return bad("words_per_cluster must be in [2, 64]");
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate must be in (0, 1)");
        }
        for (name, v) in [
            ("late_users", self.late_users),
            ("late_items", self.late_items),
            ("late_share", self.late_share),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must be in [0, 1)"));
            }
        }
        if self.answer_field && self.answer_alphabet < 2 {
            return bad("answer_alphabet must be at least 2");
        }
        if self.item_zipf < 0.0 || self.user_zipf < 0.0 {
            return bad("zipf exponents must be non-negative");
        }
        Ok(())
    }
}

/// Ground truth written next to the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub config: SynthConfig,
    pub fields: Vec<String>,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub user_bias: Vec<f64>,
    pub user_taste: Vec<Vec<f64>>,
    pub item_bias: Vec<f64>,
    pub affinity: Vec<Vec<f64>>,
    pub cluster_words: Vec<Vec<String>>,
    pub answer_words: Vec<String>,
    pub intercept: f64,
    pub empirical_rate: f64,
    pub user_first_seen: Vec<Option<i64>>,
    pub item_first_seen: Vec<Option<i64>>,
}

pub struct SynthDataset {
    pub fields: Vec<String>,
    pub samples: Vec<Sample>,
    pub metadata: SynthMetadata,
}

pub const USER_FIELD: &str = "user";
pub const ITEM_FIELD: &str = "item";
pub const ANSWER_FIELD: &str = "answer";
const START_TIME: i64 = 1_600_000_000;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "do", "fu", "gi", "ha", "ju", "po", "ze",
];
const NOISE_WORDS: [&str; 12] = [
    "the", "new", "old", "big", "small", "red", "blue", "deluxe", "classic", "basic", "prime",
    "plus",
];
const ANSWER_WORDS: [&str; 16] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa",
];

/// Distinct pronounceable words, one list per cluster.
fn cluster_words(n_clusters: usize, per: usize) -> Vec<Vec<String>> {
    let mut all = Vec::new();
    'outer: for a in SYLLABLES {
        for b in SYLLABLES {
            for c in SYLLABLES {
                all.push(format!("{a}{b}{c}"));
                if all.len() == n_clusters * per {
                    break 'outer;
                }
            }
        }
    }
    all.chunks(per).map(|c| c.to_vec()).collect()
}

/// Draws unique phrases of two cluster words plus one noise word.
fn unique_phrases(
    rng: &mut impl Rng,
    clusters: &[usize],
    words: &[Vec<String>],
) -> Vec<String> {
    let mut used = HashSet::new();
    clusters
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let list = &words[c];
            for _ in 0..64 {
                let picked: Vec<&String> = list.choose_multiple(rng, 2).collect();
                let noise = NOISE_WORDS.choose(rng).expect("non-empty");
                let phrase = format!("{} {} {}", picked[0], picked[1], noise);
                if used.insert(phrase.clone()) {
                    return phrase;
                }
            }
            // Phrase space exhausted: disambiguate with the entity index.
            let phrase = format!("{} {} {idx}", list[0], list[1]);
            used.insert(phrase.clone());
            phrase
        })
        .collect()
}

fn pair_hash(seed: u64, u: usize, i: usize, modulo: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"answer");
    h.update((u as u64).to_le_bytes());
    h.update((i as u64).to_le_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x % modulo as u64) as usize
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zipf weights over a random popularity ranking.
fn zipf_weights(rng: &mut impl Rng, n: usize, exponent: f64) -> Vec<f64> {
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(rng);
    ranks.iter().map(|&r| (r as f64).powf(-exponent)).collect()
}

/// Entities flagged late only become available at `late_start`.
fn late_flags(rng: &mut impl Rng, n: usize, share: f64) -> Vec<bool> {
    let n_late = ((n as f64) * share).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in idx.iter().take(n_late.min(n.saturating_sub(1))) {
        flags[i] = true;
    }
    flags
}

fn draw_available(
    rng: &mut impl Rng,
    dist: &WeightedIndex<f64>,
    late: &[bool],
    allow_late: bool,
) -> usize {
    loop {
        let j = dist.sample(rng);
        if allow_late || !late[j] {
            return j;
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "synth/world");
    let c = cfg.n_clusters;
    let user_cluster: Vec<usize> = (0..cfg.n_users).map(|_| rng.gen_range(0..c)).collect();
    let item_cluster: Vec<usize> = (0..cfg.n_items).map(|_| rng.gen_range(0..c)).collect();
    let bias = Normal::new(0.0, cfg.bias_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let user_bias: Vec<f64> = (0..cfg.n_users).map(|_| bias.sample(&mut rng)).collect();
    let item_bias: Vec<f64> = (0..cfg.n_items).map(|_| bias.sample(&mut rng)).collect();
    // Balanced ±1 affinity so every cluster has liked and disliked partners.
    let affinity: Vec<Vec<f64>> = (0..c)
        .map(|a| {
            (0..c)
                .map(|b| if (a + b) % 2 == 0 { 1.0 } else { -1.0 } * cfg.affinity_scale)
                .collect()
        })
        .collect();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let user_latent: Vec<[f64; 2]> = (0..cfg.n_users)
        .map(|_| [std.sample(&mut rng), std.sample(&mut rng)])
        .collect();
    let item_latent: Vec<[f64; 2]> = (0..cfg.n_items)
        .map(|_| [std.sample(&mut rng), std.sample(&mut rng)])
        .collect();

    let mut taste_rng = stream(cfg.seed, "synth/taste");
    let user_taste: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| (0..c).map(|_| if taste_rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect();

    let words = cluster_words(c, cfg.words_per_cluster);
    let titles = unique_phrases(&mut rng, &item_cluster, &words);
    let profiles = unique_phrases(&mut rng, &user_cluster, &words);
    let genders: Vec<&str> = (0..cfg.n_users)
        .map(|_| if rng.gen_bool(0.5) { "female" } else { "male" })
        .collect();
    let answer_words: Vec<String> = if cfg.answer_field {
        (0..cfg.answer_alphabet)
            .map(|k| match ANSWER_WORDS.get(k) {
                Some(w) => w.to_string(),
                None => format!("answer{k}"),
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut rng = stream(cfg.seed, "synth/log");
    let item_w = zipf_weights(&mut rng, cfg.n_items, cfg.item_zipf);
    let user_w = zipf_weights(&mut rng, cfg.n_users, cfg.user_zipf);
    let item_dist = WeightedIndex::new(&item_w).map_err(|e| Error::invalid(e.to_string()))?;
    let user_dist = WeightedIndex::new(&user_w).map_err(|e| Error::invalid(e.to_string()))?;
    let late_user = late_flags(&mut rng, cfg.n_users, cfg.late_users);
    let late_item = late_flags(&mut rng, cfg.n_items, cfg.late_items);
    let late_start = ((1.0 - cfg.late_share) * cfg.n_samples as f64).round() as usize;

    let mut pairs = Vec::with_capacity(cfg.n_samples);
    let mut logits = Vec::with_capacity(cfg.n_samples);
    for t in 0..cfg.n_samples {
        let allow = t >= late_start;
        let u = draw_available(&mut rng, &user_dist, &late_user, allow);
        let i = draw_available(&mut rng, &item_dist, &late_item, allow);
        let dot = user_latent[u][0] * item_latent[i][0] + user_latent[u][1] * item_latent[i][1];
        logits.push(
            affinity[user_cluster[u]][item_cluster[i]]
                + user_bias[u]
                + item_bias[i]
                + cfg.interaction_scale * dot
                + cfg.taste_scale * user_taste[u][item_cluster[i]],
        );
        pairs.push((u, i));
    }
    let intercept = solve_intercept(&logits, cfg.base_rate);

    let mut fields: Vec<String> = ["user", "gender", "profile", "item", "title"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if cfg.answer_field {
        fields.push(ANSWER_FIELD.to_string());
    }
    let mut user_first = vec![None; cfg.n_users];
    let mut item_first = vec![None; cfg.n_items];
    let mut clicks = 0usize;
    let samples: Vec<Sample> = pairs
        .iter()
        .zip(&logits)
        .enumerate()
        .map(|(t, (&(u, i), &z))| {
            let timestamp = START_TIME + 60 * t as i64;
            user_first[u].get_or_insert(timestamp);
            item_first[i].get_or_insert(timestamp);
            let label = u8::from(rng.gen_bool(sigmoid(z + intercept)));
            clicks += label as usize;
            let mut values = vec![
                format!("u{u}"),
                genders[u].to_string(),
                profiles[u].clone(),
                format!("i{i}"),
                titles[i].clone(),
            ];
            if cfg.answer_field {
                values.push(answer_words[pair_hash(cfg.seed, u, i, cfg.answer_alphabet)].clone());
            }
            Sample {
                values,
                label,
                timestamp,
            }
        })
        .collect();

    let metadata = SynthMetadata {
        config: cfg.clone(),
        fields: fields.clone(),
        user_cluster,
        item_cluster,
        user_bias,
        user_taste,
        item_bias,
        affinity,
        cluster_words: words,
        answer_words,
        intercept,
        empirical_rate: clicks as f64 / cfg.n_samples as f64,
        user_first_seen: user_first,
        item_first_seen: item_first,
    };
    Ok(SynthDataset {
        fields,
        samples,
        metadata,
    })
}

/// Intercept b such that the mean of σ(z + b) equals `rate` (bisection).
fn solve_intercept(logits: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub const DATA_FILE: &str = "data.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// Writes `data.csv` and `metadata.json` into `dir`.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<SynthDataset> {
    let ds = generate_synthetic(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(DATA_FILE), &ds.fields, &ds.samples)?;
    let meta = serde_json::to_string_pretty(&ds.metadata)?;
    let path = dir.join(METADATA_FILE);
    std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}
