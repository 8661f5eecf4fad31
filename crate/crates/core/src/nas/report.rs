use std::path::Path;

use serde_json::{json, Value};

use super::ArchDescriptor;
use crate::data::export::{read_csv, write_csv};
use crate::data::format::atomic_write;
use crate::error::{Error, Result};

/// Outcome of one search run.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchReport {
    pub strategy: String,
    pub dataset_id: String,
    pub arch: ArchDescriptor,
    pub search_val_accuracy: f64,
    /// Accuracy after stand-alone retraining, scored on real data.
    pub retrain_accuracy: Option<f64>,
    pub seed: u64,
    /// Optimization steps taken by the search.
    pub steps: u64,
    /// Architectures proposed for scoring.
    pub candidate_evaluations: u64,
}

pub const REPORT_HEADER: [&str; 8] = [
    "strategy",
    "dataset",
    "seed",
    "arch",
    "search_val_acc",
    "retrain_acc",
    "steps",
    "candidate_evaluations",
];

impl SearchReport {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.strategy.clone(),
            self.dataset_id.clone(),
            self.seed.to_string(),
            self.arch.to_string(),
            self.search_val_accuracy.to_string(),
            self.retrain_accuracy.map_or(String::new(), |a| a.to_string()),
            self.steps.to_string(),
            self.candidate_evaluations.to_string(),
        ]
    }

    pub fn from_csv_row(row: &[String]) -> Result<Self> {
        if row.len() != REPORT_HEADER.len() {
            return Err(Error::config(format!("search report row has {} fields, expected 8", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| Error::config(format!("bad {} value '{}'", REPORT_HEADER[i], row[i])))
        };
        let int = |i: usize| -> Result<u64> {
            row[i]
                .parse()
                .map_err(|_| Error::config(format!("bad {} value '{}'", REPORT_HEADER[i], row[i])))
        };
        Ok(SearchReport {
            strategy: row[0].clone(),
            dataset_id: row[1].clone(),
            seed: int(2)?,
            arch: row[3].parse()?,
            search_val_accuracy: num(4)?,
            retrain_accuracy: if row[5].is_empty() { None } else { Some(num(5)?) },
            steps: int(6)?,
            candidate_evaluations: int(7)?,
        })
    }

    pub fn json_line(&self) -> String {
        json!({
            "strategy": self.strategy,
            "dataset": self.dataset_id,
            "seed": self.seed,
            "arch": self.arch.to_string(),
            "search_val_acc": self.search_val_accuracy,
            "retrain_acc": self.retrain_accuracy,
            "steps": self.steps,
            "candidate_evaluations": self.candidate_evaluations,
        })
        .to_string()
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::config(format!("bad report line: {e}")))?;
        let missing = |k: &str| Error::config(format!("report line lacks '{k}'"));
        let s = |k: &str| v[k].as_str().map(str::to_string).ok_or_else(|| missing(k));
        let u = |k: &str| v[k].as_u64().ok_or_else(|| missing(k));
        Ok(SearchReport {
            strategy: s("strategy")?,
            dataset_id: s("dataset")?,
            seed: u("seed")?,
            arch: s("arch")?.parse()?,
            search_val_accuracy: v["search_val_acc"].as_f64().ok_or_else(|| missing("search_val_acc"))?,
            retrain_accuracy: v["retrain_acc"].as_f64(),
            steps: u("steps")?,
            candidate_evaluations: u("candidate_evaluations")?,
        })
    }
}

/// Writes `<stem>.csv` and `<stem>.jsonl` side by side.
pub fn write_reports(stem: &Path, reports: &[SearchReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports.iter().map(SearchReport::csv_row).collect();
    write_csv(&stem.with_extension("csv"), &REPORT_HEADER, &rows)?;
    let mut lines = String::new();
    for r in reports {
        lines.push_str(&r.json_line());
        lines.push('\n');
    }
    atomic_write(&stem.with_extension("jsonl"), lines.as_bytes())
}

/// Reads the CSV written by [`write_reports`].
pub fn read_reports(path: &Path) -> Result<Vec<SearchReport>> {
    let (header, rows) = read_csv(path)?;
    if header != REPORT_HEADER {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    rows.iter().map(|r| SearchReport::from_csv_row(r)).collect()
}
