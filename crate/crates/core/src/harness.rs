//! Model-selection harness: correlate task-relatedness scores with observed
//! fine-tuning accuracies and rank candidate encoders per target.
//!
//! Fine-tuning accuracies are external ground truth supplied by the user;
//! nothing here trains a model. Lower score predicts better transfer, so
//! rankings are ascending and a good estimator shows strongly *negative*
//! Pearson correlation against accuracy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One (model, target) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub model_id: String,
    pub target_id: String,
    /// Task-relatedness (full bound) or fast score.
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub term1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub term2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub term3: Option<f64>,
    /// Accuracy after end-to-end fine-tuning, in [0, 1], when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_tune_accuracy: Option<f64>,
    /// "supervised", "pseudo", "fast", ...
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
}

impl TransferRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.score.is_finite() {
            return Err(Error::InvalidData(format!(
                "non-finite score for {}/{}",
                self.model_id, self.target_id
            )));
        }
        if let Some(acc) = self.fine_tune_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::InvalidData(format!(
                    "accuracy {acc} outside [0, 1] for {}/{}",
                    self.model_id, self.target_id
                )));
            }
        }
        Ok(())
    }
}

/// Standard Pearson r. `Ok(None)` when either argument has zero variance
/// (the correlation is undefined there, not zero).
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidData("length mismatch".into()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidData("need at least 2 points".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidData("length mismatch".into()));
    }
    pearson_correlation(&ranks(xs), &ranks(ys))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Orders the records of one target ascending by score (smaller
/// task-relatedness predicts better transfer), ties broken by model id.
pub fn rank_models(records: &[TransferRecord]) -> Vec<TransferRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    sorted
}

/// Correlation block for one (target, mode) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub target_id: String,
    pub mode: String,
    pub n: usize,
    /// Pearson r of score vs accuracy; null when undefined or unavailable.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Model ids ascending by score.
    pub ranking: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Full report: the records plus per-(target, mode) summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub records: Vec<TransferRecord>,
    pub groups: Vec<GroupSummary>,
}

/// Groups records by (target, mode) and computes correlations against the
/// supplied fine-tuning accuracies where at least two are present.
pub fn summarize(records: &[TransferRecord]) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(Error::InvalidData("no records to summarize".into()));
    }
    for r in records {
        r.validate()?;
    }
    let mut keys: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.target_id.clone(), r.mode.clone()))
        .collect();
    keys.sort();
    keys.dedup();

    let mut groups = Vec::new();
    for (target_id, mode) in keys {
        let members: Vec<&TransferRecord> = records
            .iter()
            .filter(|r| r.target_id == target_id && r.mode == mode)
            .collect();
        let owned: Vec<TransferRecord> = members.iter().map(|&r| r.clone()).collect();
        let ranking: Vec<String> = rank_models(&owned)
            .into_iter()
            .map(|r| r.model_id)
            .collect();
        let with_acc: Vec<&&TransferRecord> = members
            .iter()
            .filter(|r| r.fine_tune_accuracy.is_some())
            .collect();
        let (pearson, spearman, warning) = if with_acc.len() >= 2 {
            let xs: Vec<f64> = with_acc.iter().map(|r| r.score).collect();
            let ys: Vec<f64> = with_acc
                .iter()
                .map(|r| r.fine_tune_accuracy.unwrap())
                .collect();
            let p = pearson_correlation(&xs, &ys)?;
            let s = spearman_correlation(&xs, &ys)?;
            let warning = if p.is_none() {
                Some("correlation undefined: zero variance".to_string())
            } else {
                None
            };
            (p, s, warning)
        } else {
            (
                None,
                None,
                Some("fewer than 2 records with accuracy".to_string()),
            )
        };
        groups.push(GroupSummary {
            target_id,
            mode,
            n: members.len(),
            pearson,
            spearman,
            ranking,
            warning,
        });
    }
    Ok(ReportSummary {
        records: records.to_vec(),
        groups,
    })
}

const CSV_HEADER: &str = "model_id,target_id,score,term1,term2,term3,accuracy,mode";

/// Writes `<base>.csv` (flat records) and `<base>.json` (records plus
/// per-target summaries).
pub fn emit_report(records: &[TransferRecord], base_path: impl AsRef<Path>) -> Result<()> {
    let summary = summarize(records)?;
    let base = base_path.as_ref();
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");

    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    for r in records {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.model_id,
            r.target_id,
            r.score,
            opt(r.term1),
            opt(r.term2),
            opt(r.term3),
            opt(r.fine_tune_accuracy),
            r.mode
        )?;
    }
    csv.flush()?;

    let out = File::create(&json_path)?;
    serde_json::to_writer_pretty(BufWriter::new(out), &summary)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Parses the records CSV written by [`emit_report`] (or produced elsewhere
/// with the same schema).
pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<TransferRecord>> {
    let file = File::open(path.as_ref())
        .map_err(|e| Error::InvalidData(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("csv header: {e}")))?
        .clone();
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Format(format!(
            "records csv header must be {CSV_HEADER:?}, got {got:?}"
        )));
    }
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("csv row {line}: {e}")))?;
        let parse_opt = |field: &str| -> Result<Option<f64>> {
            let t = field.trim();
            if t.is_empty() {
                return Ok(None);
            }
            t.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Format(format!("csv row {line}: bad number {t:?}")))
        };
        let record = TransferRecord {
            model_id: row[0].trim().to_string(),
            target_id: row[1].trim().to_string(),
            score: row[2]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("csv row {line}: bad score {:?}", &row[2])))?,
            term1: parse_opt(&row[3])?,
            term2: parse_opt(&row[4])?,
            term3: parse_opt(&row[5])?,
            fine_tune_accuracy: parse_opt(&row[6])?,
            mode: row[7].trim().to_string(),
            metadata: None,
        };
        record.validate()?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::InvalidData("records csv holds no rows".into()));
    }
    Ok(records)
}
