//! Per-update CSV rows.

use crate::error::{Error, Result};
use std::fs::File;
use std::path::Path;

pub const CSV_HEADER: [&str; 13] = [
    "step",
    "task",
    "seed",
    "return_raw",
    "return_norm",
    "dormant_actor",
    "dormant_critic",
    "grad_sim",
    "policy_loss",
    "value_loss",
    "entropy",
    "grad_norm",
    "expert_probs_json",
];

/// One row per PPO update. Missing values (no finished episode in the
/// window, no similarity yet) are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Environment steps taken so far across all tasks.
    pub step: u64,
    /// Short game name of the task this update trained on.
    pub task: String,
    pub seed: u64,
    pub return_raw: f64,
    pub return_norm: f64,
    pub dormant_actor: f64,
    pub dormant_critic: f64,
    pub grad_sim: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    /// Mean routing distribution per MoE layer, actor layers first.
    pub expert_probs: Vec<Vec<f64>>,
}

impl MetricsRow {
    fn record(&self) -> Result<Vec<String>> {
        let f = |v: f64| v.to_string();
        Ok(vec![
            self.step.to_string(),
            self.task.clone(),
            self.seed.to_string(),
            f(self.return_raw),
            f(self.return_norm),
            f(self.dormant_actor),
            f(self.dormant_critic),
            f(self.grad_sim),
            f(self.policy_loss),
            f(self.value_loss),
            f(self.entropy),
            f(self.grad_norm),
            serde_json::to_string(&self.expert_probs)?,
        ])
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::contract(format!("row has {} fields, expected {}", rec.len(), CSV_HEADER.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::contract(format!("column {}: `{}`: {e}", CSV_HEADER[i], &rec[i])))
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|e| Error::contract(format!("column {}: `{}`: {e}", CSV_HEADER[i], &rec[i])))
        };
        Ok(Self {
            step: int(0)?,
            task: rec[1].to_string(),
            seed: int(2)?,
            return_raw: num(3)?,
            return_norm: num(4)?,
            dormant_actor: num(5)?,
            dormant_critic: num(6)?,
            grad_sim: num(7)?,
            policy_loss: num(8)?,
            value_loss: num(9)?,
            entropy: num(10)?,
            grad_norm: num(11)?,
            expert_probs: serde_json::from_str(&rec[12])?,
        })
    }
}

/// CSV writer that flushes after every row.
pub struct MetricsSink {
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(CSV_HEADER)?;
        writer.flush()?;
        Ok(Self { writer, last_step: None })
    }

    pub fn emit_row(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(prev) = self.last_step {
            if row.step <= prev {
                return Err(Error::contract(format!("step {} after {prev}", row.step)));
            }
        }
        self.writer.write_record(row.record()?)?;
        self.writer.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

/// Reads a metrics CSV, checking the header matches exactly.
pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::contract(format!(
            "{}: header `{}` does not match the metrics schema",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader.records().map(|r| MetricsRow::parse(&r?)).collect()
}
