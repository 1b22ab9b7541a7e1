//! Multi-seed aggregation and artifact emission: training-log CSVs, the
//! seed-averaged comparison table as JSON, CSV, and plain text.
//!
//! Every column aggregates as mean and population standard deviation over
//! seeds. Params and MACs usually agree across seeds, but the block plan is
//! score-driven and may remove a different block per seed, so structural
//! numbers carry a spread too instead of being asserted identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json};
use crate::pipeline::{ColumnSummary, PipelineSummary};
use crate::train::{KdEpoch, TeacherEpoch};
use crate::{Error, Result};

pub fn write_teacher_csv(path: &Path, log: &[TeacherEpoch]) -> Result<()> {
    let mut text = String::from("epoch,train_ce,train_accuracy,eval_ce,eval_accuracy\n");
    for e in log {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_ce, e.train_accuracy, e.eval_ce, e.eval_accuracy
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_kd_csv(path: &Path, log: &[KdEpoch]) -> Result<()> {
    let mut text =
        String::from("epoch,alpha,beta,ce,logit_alignment,feature_alignment,eval_ce,eval_accuracy\n");
    for e in log {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.alpha,
            e.beta,
            e.ce,
            e.logit_alignment,
            e.feature_alignment,
            e.eval_ce,
            e.eval_accuracy
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation of one quantity over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn over(values: &[f64]) -> Spread {
        // sum/n rounds for identical non-integer values, leaving a ~1e-16
        // std that the table would render as a spurious "± 0.0".
        if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            return Spread { mean: values[0], std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Spread { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub params: Spread,
    pub macs: Spread,
    pub params_change_pct: Spread,
    pub macs_change_pct: Spread,
    pub accuracy: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

fn aggregate_column(label: &str, columns: Vec<&ColumnSummary>) -> ReportRow {
    let take = |f: &dyn Fn(&ColumnSummary) -> f64| {
        Spread::over(&columns.iter().map(|c| f(c)).collect::<Vec<f64>>())
    };
    ReportRow {
        label: label.to_string(),
        params: take(&|c| c.params as f64),
        macs: take(&|c| c.macs as f64),
        params_change_pct: take(&|c| c.params_change_pct),
        macs_change_pct: take(&|c| c.macs_change_pct),
        accuracy: take(&|c| c.accuracy),
    }
}

/// Seed-averaged three-row comparison. Every summary must come from the
/// same pipeline settings; only the seed is expected to vary.
pub fn aggregate(summaries: &[PipelineSummary]) -> Result<Report> {
    if summaries.is_empty() {
        return Err(Error::config("summaries", "nothing to aggregate"));
    }
    let rows = vec![
        aggregate_column("teacher", summaries.iter().map(|s| &s.teacher).collect()),
        aggregate_column("block-pruned+kd", summaries.iter().map(|s| &s.block_kd).collect()),
        aggregate_column("inner-sliced+kd", summaries.iter().map(|s| &s.sliced_kd).collect()),
    ];
    Ok(Report { seeds: summaries.iter().map(|s| s.seed).collect(), rows })
}

/// Reads `summary.json` from each run directory.
pub fn collect_summaries(dirs: &[&Path]) -> Result<Vec<PipelineSummary>> {
    dirs.iter().map(|d| read_json(&d.join("summary.json"))).collect()
}

/// Integer-valued cell; the spread is shown only when seeds disagree.
fn count_cell(s: &Spread) -> String {
    if s.std == 0.0 {
        format!("{:.0}", s.mean)
    } else {
        format!("{:.0} \u{b1} {:.0}", s.mean, s.std)
    }
}

fn pct_cell(s: &Spread) -> String {
    if s.std == 0.0 {
        crate::profile::format_pct(s.mean)
    } else {
        format!("{:+.1} \u{b1} {:.1}%", s.mean, s.std)
    }
}

/// Rows as text, accuracy in percent with its seed spread.
pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    out.push_str(&format!("seeds: {}\n", seeds.join(", ")));
    out.push_str(&format!(
        "{:<18} {:>14} {:>16} {:>13} {:>13} {:>16}\n",
        "model", "params", "macs", "params%", "macs%", "accuracy (%)"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<18} {:>14} {:>16} {:>13} {:>13} {:>16}\n",
            row.label,
            count_cell(&row.params),
            count_cell(&row.macs),
            pct_cell(&row.params_change_pct),
            pct_cell(&row.macs_change_pct),
            format!("{:.2} \u{b1} {:.2}", 100.0 * row.accuracy.mean, 100.0 * row.accuracy.std),
        ));
    }
    out
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let mut csv = String::from(
        "label,params_mean,params_std,macs_mean,macs_std,params_change_pct_mean,\
         params_change_pct_std,macs_change_pct_mean,macs_change_pct_std,\
         accuracy_mean,accuracy_std\n",
    );
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.label,
            row.params.mean,
            row.params.std,
            row.macs.mean,
            row.macs.std,
            row.params_change_pct.mean,
            row.params_change_pct.std,
            row.macs_change_pct.mean,
            row.macs_change_pct.std,
            row.accuracy.mean,
            row.accuracy.std
        ));
    }
    let path = dir.join("report.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}
