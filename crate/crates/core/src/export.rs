//! Metric tables: one row per epoch plus a summary row.
//!
//! CSV columns, in order: `epoch, loss, train_acc, eval_acc, lr_start,
//! updated_params, reduction`. Epoch rows leave `reduction` empty; the
//! summary row has `epoch = total`, the cumulative updated-parameter count
//! and the reduction against fine-tuning for the same epochs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExportFormat;
use crate::error::{Error, Result};
use crate::schedule::UpdateLedger;
use crate::trainer::MetricsRecord;

pub const CSV_HEADER: &str = "epoch,loss,train_acc,eval_acc,lr_start,updated_params,reduction";

/// Everything needed to re-render a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub variant: String,
    pub peft: String,
    pub seed: u64,
    pub metrics: MetricsRecord,
    pub ledger: UpdateLedger,
    /// Cumulative updated parameters of plain fine-tuning for the same epochs.
    pub baseline_cumulative: u64,
}

impl RunRecord {
    pub fn reduction(&self) -> f64 {
        if self.baseline_cumulative == 0 {
            return 0.0;
        }
        1.0 - self.ledger.cumulative as f64 / self.baseline_cumulative as f64
    }

    fn check(&self) -> Result<()> {
        let n = self.metrics.epochs();
        let lens = [
            self.metrics.train_acc.len(),
            self.metrics.eval_acc.len(),
            self.metrics.lr_start.len(),
            self.ledger.per_epoch.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::contract("metrics and ledger cover different epochs"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    train_acc: f64,
    eval_acc: f64,
    lr_start: f64,
    updated_params: u64,
}

#[derive(Serialize)]
struct SummaryRow {
    epoch: &'static str,
    updated_params: u64,
    reduction: f64,
}

fn epoch_rows(record: &RunRecord) -> impl Iterator<Item = EpochRow> + '_ {
    let m = &record.metrics;
    (0..m.epochs()).map(move |i| EpochRow {
        epoch: i + 1,
        loss: m.epoch_loss[i],
        train_acc: m.train_acc[i],
        eval_acc: m.eval_acc[i],
        lr_start: m.lr_start[i],
        updated_params: record.ledger.per_epoch[i],
    })
}

pub fn render_csv(record: &RunRecord) -> Result<String> {
    record.check()?;
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").expect("string write");
    for r in epoch_rows(record) {
        writeln!(
            out,
            "{},{},{},{},{},{},",
            r.epoch, r.loss, r.train_acc, r.eval_acc, r.lr_start, r.updated_params
        )
        .expect("string write");
    }
    writeln!(out, "total,,,,,{},{}", record.ledger.cumulative, record.reduction()).expect("string write");
    Ok(out)
}

fn json_line<T: Serialize>(row: &T) -> Result<String> {
    let mut s = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn render_jsonl(record: &RunRecord) -> Result<String> {
    record.check()?;
    let mut out = String::new();
    for r in epoch_rows(record) {
        out.push_str(&json_line(&r)?);
    }
    out.push_str(&json_line(&SummaryRow {
        epoch: "total",
        updated_params: record.ledger.cumulative,
        reduction: record.reduction(),
    })?);
    Ok(out)
}

pub const LEDGER_CSV_HEADER: &str = "epoch,tag_class,updated_params";

/// Per-epoch ledger split by tag class, then one `total,all,<cumulative>` row.
pub fn render_ledger_csv(ledger: &UpdateLedger) -> Result<String> {
    if ledger.breakdown.len() != ledger.per_epoch.len() {
        return Err(Error::contract("ledger breakdown covers different epochs"));
    }
    let mut out = String::new();
    writeln!(out, "{LEDGER_CSV_HEADER}").expect("string write");
    for (i, by_class) in ledger.breakdown.iter().enumerate() {
        for (class, n) in by_class {
            writeln!(out, "{},{},{}", i + 1, class.name(), n).expect("string write");
        }
    }
    writeln!(out, "total,all,{}", ledger.cumulative).expect("string write");
    Ok(out)
}

pub fn render(record: &RunRecord, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Csv => render_csv(record),
        ExportFormat::Jsonl => render_jsonl(record),
    }
}

pub fn export_metrics(record: &RunRecord, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
    fs::write(path, render(record, format)?)?;
    Ok(())
}

/// Per-epoch mean over repeated runs of the same configuration. Ledgers do
/// not depend on the seed, so the first run's is kept.
pub fn mean_record(records: &[RunRecord]) -> Result<RunRecord> {
    let first = records.first().ok_or_else(|| Error::contract("nothing to average"))?;
    for r in records {
        r.check()?;
        if r.ledger != first.ledger || r.metrics.epochs() != first.metrics.epochs() {
            return Err(Error::contract("runs to average have different shapes"));
        }
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> &Vec<f64>| -> Vec<f64> {
        (0..first.metrics.epochs())
            .map(|i| records.iter().map(|r| f(&r.metrics)[i]).sum::<f64>() / n)
            .collect()
    };
    let metrics = MetricsRecord {
        epoch_loss: mean(|m| &m.epoch_loss),
        train_acc: mean(|m| &m.train_acc),
        eval_acc: mean(|m| &m.eval_acc),
        lr_start: first.metrics.lr_start.clone(),
        lr_trace: first.metrics.lr_trace.clone(),
        wall_time: Vec::new(),
    };
    Ok(RunRecord {
        metrics,
        ..first.clone()
    })
}
