//! Ranking and calibration metrics, long-tail segmentation and the report
//! format shared by the CLI.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numeric::bce_value;

/// Area under the ROC curve via the rank-sum statistic with midranks, so a
/// tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean binary cross-entropy with the same clamp as the training loss.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dim(format!(
            "logloss: {} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    Ok(bce_value(probs, &y))
}

/// `(new − base) / base × 100`.
pub fn relative_improvement(new: f64, base: f64) -> f64 {
    (new - base) / base * 100.0
}

/// How the long-tail cut is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailBasis {
    /// Bottom fraction of distinct entities ranked by frequency.
    #[default]
    Entity,
    /// Least frequent entities jointly covering at most the fraction of
    /// training interactions.
    Volume,
}

/// Raw values flagged as long-tail, given training-split values of a field.
pub fn long_tail_set<'a>(
    values: impl IntoIterator<Item = &'a str>,
    quantile: f64,
    basis: TailBasis,
) -> std::collections::HashSet<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        total += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n_tail = match basis {
        TailBasis::Entity => {
            let n = (quantile * ranked.len() as f64 + 1e-9).floor() as usize;
            if quantile > 0.0 && !ranked.is_empty() {
                n.max(1)
            } else {
                n
            }
        }
        TailBasis::Volume => {
            let budget = quantile * total as f64 + 1e-9;
            let mut acc = 0usize;
            ranked
                .iter()
                .take_while(|(_, c)| {
                    acc += c;
                    acc as f64 <= budget
                })
                .count()
        }
    };
    ranked
        .into_iter()
        .take(n_tail)
        .map(|(v, _)| v.to_string())
        .collect()
}

pub const CELL_NAMES: [&str; 4] = [
    "user=tail item=tail",
    "user=tail item=head",
    "user=head item=tail",
    "user=head item=head",
];

/// Test indices routed into the 4 cells of [`CELL_NAMES`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub cells: [Vec<usize>; 4],
}

/// Splits the test set by long-tail user × long-tail item. Frequencies come
/// from the training split; values unseen there count as long-tail.
pub fn longtail_segments(
    train: &[Sample],
    test: &[Sample],
    user_field: usize,
    item_field: usize,
    quantile: f64,
    basis: TailBasis,
) -> Result<Segments> {
    let width = train.first().or(test.first()).map_or(0, |s| s.values.len());
    if user_field >= width || item_field >= width {
        return Err(Error::invalid(format!(
            "long-tail fields {user_field}/{item_field} outside {width} fields"
        )));
    }
    let tail = |f: usize| {
        long_tail_set(train.iter().map(|s| s.values[f].as_str()), quantile, basis)
    };
    let (user_tail, item_tail) = (tail(user_field), tail(item_field));
    let seen = |f: usize| -> std::collections::HashSet<&str> {
        train.iter().map(|s| s.values[f].as_str()).collect()
    };
    let (user_seen, item_seen) = (seen(user_field), seen(item_field));
    let mut cells: [Vec<usize>; 4] = Default::default();
    for (i, s) in test.iter().enumerate() {
        let u = &s.values[user_field];
        let it = &s.values[item_field];
        let ut = user_tail.contains(u) || !user_seen.contains(u.as_str());
        let itt = item_tail.contains(it) || !item_seen.contains(it.as_str());
        let cell = match (ut, itt) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        cells[cell].push(i);
    }
    Ok(Segments { cells })
}

/// Metrics of one set of predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub count: usize,
}

impl Metrics {
    /// AUC is `None` when a subset holds a single class.
    pub fn compute(probs: &[f64], labels: &[u8]) -> Result<Self> {
        let auc = match auc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let logloss = if probs.is_empty() {
            None
        } else {
            Some(logloss(probs, labels)?)
        };
        Ok(Metrics {
            auc,
            logloss,
            count: probs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub entries: Vec<(String, String)>,
    pub overall: Option<Metrics>,
    pub segments: Vec<(String, Metrics)>,
    pub improvements: Vec<(String, f64)>,
    pub probe: Option<ProbeResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub field: String,
    pub scores: Vec<f64>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn write_metrics(out: &mut String, header: &str, m: &Metrics) {
    let _ = writeln!(out, "[{header}]");
    let _ = writeln!(out, "auc: {}", opt(m.auc));
    let _ = writeln!(out, "logloss: {}", opt(m.logloss));
    let _ = writeln!(out, "count: {}", m.count);
    out.push('\n');
}

impl EvalReport {
    /// Segmented report: overall metrics plus one block per cell.
    pub fn from_predictions(probs: &[f64], labels: &[u8], segments: Option<&Segments>) -> Result<Self> {
        let overall = Metrics::compute(probs, labels)?;
        if overall.auc.is_none() {
            return Err(Error::UndefinedMetric(
                "test split holds a single class".into(),
            ));
        }
        let mut report = EvalReport {
            overall: Some(overall),
            ..Default::default()
        };
        if let Some(seg) = segments {
            for (name, idx) in CELL_NAMES.iter().zip(&seg.cells) {
                let p: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
                let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                report
                    .segments
                    .push((name.to_string(), Metrics::compute(&p, &y)?));
            }
        }
        Ok(report)
    }

    /// `key: value` blocks, one per section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.entries.is_empty() {
            out.push_str("[run]\n");
            for (k, v) in &self.entries {
                let _ = writeln!(out, "{k}: {v}");
            }
            out.push('\n');
        }
        if let Some(m) = &self.overall {
            write_metrics(&mut out, "overall", m);
        }
        for (name, m) in &self.segments {
            write_metrics(&mut out, &format!("segment {name}"), m);
        }
        if !self.improvements.is_empty() {
            out.push_str("[relative_improvement]\n");
            for (k, v) in &self.improvements {
                let _ = writeln!(out, "{k}: {v}");
            }
            out.push('\n');
        }
        if let Some(p) = &self.probe {
            let _ = writeln!(out, "[probe {}]", p.field);
            let scores: Vec<String> = p.scores.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "scores: {}", scores.join(" "));
            let near_zero = p.scores.iter().filter(|&&s| s < 1e-3).count();
            let _ = writeln!(out, "near_zero: {near_zero}");
            out.push('\n');
        }
        out
    }

    /// Reads back the `auc` of the `[overall]` block or a segment block.
    pub fn section_value(text: &str, section: &str, key: &str) -> Option<String> {
        let header = format!("[{section}]");
        let mut inside = false;
        for line in text.lines() {
            if line.starts_with('[') {
                inside = line == header;
                continue;
            }
            if inside {
                if let Some((k, v)) = line.split_once(": ") {
                    if k == key {
                        return Some(v.to_string());
                    }
                }
            }
        }
        None
    }
}
