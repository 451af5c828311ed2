use std::path::Path;

use crate::error::{Error, Result};

/// One logged impression: raw field values, binary click label, timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub values: Vec<String>,
    pub label: u8,
    pub timestamp: i64,
}

pub const LABEL_COLUMN: &str = "label";
pub const TIMESTAMP_COLUMN: &str = "timestamp";

/// Field names of a dataset header: every column except `label` and `timestamp`.
pub fn header_fields(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = rdr.headers()?.clone();
    Ok(headers
        .iter()
        .map(str::trim)
        .filter(|h| *h != LABEL_COLUMN && *h != TIMESTAMP_COLUMN)
        .map(str::to_string)
        .collect())
}

/// Reads samples whose values are taken from the columns named in `fields`.
/// Columns not named (e.g. an upstream rating) are ignored.
pub fn load_csv(path: &Path, fields: &[String]) -> Result<Vec<Sample>> {
    let shown = path.display().to_string();
    let err = |line: usize, msg: String| Error::Data {
        path: shown.clone(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| err(1, e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column `{name}`")))
    };
    let label_col = col(LABEL_COLUMN)?;
    let ts_col = col(TIMESTAMP_COLUMN)?;
    let field_cols = fields.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let get = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let label = match get(label_col) {
            "0" => 0,
            "1" => 1,
            other => return Err(err(line, format!("label must be 0 or 1, got `{other}`"))),
        };
        let timestamp = get(ts_col)
            .parse::<i64>()
            .map_err(|_| err(line, format!("bad timestamp `{}`", get(ts_col))))?;
        out.push(Sample {
            values: field_cols.iter().map(|&c| get(c).to_string()).collect(),
            label,
            timestamp,
        });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, fields: &[String], samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut header: Vec<&str> = fields.iter().map(String::as_str).collect();
    header.push(LABEL_COLUMN);
    header.push(TIMESTAMP_COLUMN);
    w.write_record(&header)?;
    for s in samples {
        let mut row: Vec<String> = s.values.clone();
        row.push(s.label.to_string());
        row.push(s.timestamp.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Train / validation / test parts of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stable sort by timestamp, then contiguous cuts at the given ratios.
pub fn temporal_split(samples: &[Sample], ratios: (f64, f64, f64)) -> Result<Split> {
    if samples.len() < 10 {
        return Err(Error::invalid(format!(
            "temporal split needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    if !(total > 0.0) || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::invalid(format!("bad split ratios {ratios:?}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.timestamp);
    let n = sorted.len();
    let n_train = ((ratios.0 / total) * n as f64).round() as usize;
    let n_val = ((ratios.1 / total) * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(Split {
        train: sorted,
        val,
        test,
    })
}
