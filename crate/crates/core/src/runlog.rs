//! Line-delimited JSON run logs and the CSV report built from them.
//!
//! A run log holds one `epoch` record per evaluation followed by a single
//! `summary` record. Wall-clock timings live in a separate sidecar so that
//! repeated runs produce identical logs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pruner::EpochRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `icbs` or the name of a one-shot scoring method.
    pub method: String,
    pub scope: String,
    pub density: f64,
    pub seed: u64,
    pub num_weights: usize,
    pub pruned: usize,
    pub total_steps: usize,
    pub block_size: usize,
    pub fraction_of_weights_optimized: f64,
    pub steps_skipped: usize,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch(EpochRecord),
    Summary(RunSummary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(&LogRecord::Epoch(e.clone())).unwrap());
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&LogRecord::Summary(self.summary.clone())).unwrap());
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::Dump {
                line: i + 1,
                detail: e.to_string(),
            })?;
            match rec {
                LogRecord::Epoch(e) => epochs.push(e),
                LogRecord::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or(Error::Dump {
            line: text.lines().count(),
            detail: "run log has no summary record".into(),
        })?;
        Ok(Self { epochs, summary })
    }
}

/// Wall-clock sidecar line for one epoch or for the whole run.
pub fn timing_line(label: &str, seconds: f64) -> String {
    format!("{{\"label\":\"{label}\",\"seconds\":{seconds}}}\n")
}

pub const REPORT_HEADER: &str = "method,scope,density,epoch,loss,accuracy,seed";

/// One CSV row per epoch record of every run, in the order given.
pub fn report_csv(runs: &[RunLog]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for run in runs {
        let m = &run.summary;
        for e in &run.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.method, m.scope, m.density, e.epoch, e.loss, e.accuracy, m.seed
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, epochs: usize) -> RunLog {
        RunLog {
            epochs: (1..=epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    loss: 1.0 / e as f64,
                    accuracy: 0.1 + 0.0123456789 * e as f64,
                    steps: 5,
                    skipped: 0,
                    wall_seconds: 3.0,
                })
                .collect(),
            summary: RunSummary {
                method: "icbs".into(),
                scope: "per_layer".into(),
                density: 0.1,
                seed,
                num_weights: 1000,
                pruned: 900,
                total_steps: 5 * epochs,
                block_size: 16,
                fraction_of_weights_optimized: 0.8,
                steps_skipped: 0,
                initial_loss: 2.0,
                initial_accuracy: 0.5,
                final_loss: 0.1,
                final_accuracy: 0.9,
                config: Some(RunConfig::garment(0.1)),
            },
        }
    }

    #[test]
    fn jsonl_round_trip_drops_wall_time() {
        let log = run(3, 2);
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains("wall"));
        let back = RunLog::parse(&text).unwrap();
        assert_eq!(back.summary, log.summary);
        assert_eq!(back.epochs[1].accuracy, log.epochs[1].accuracy);
        assert_eq!(back.epochs[1].wall_seconds, 0.0);
    }

    #[test]
    fn one_run_ten_rows() {
        let csv = report_csv(&[run(0, 10)]);
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().next().unwrap(), REPORT_HEADER);
    }

    #[test]
    fn two_seeds_twenty_rows() {
        let csv = report_csv(&[run(1, 10), run(2, 10)]);
        let seeds: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(seeds.len(), 20);
        assert_eq!(seeds.iter().filter(|&&s| s == "1").count(), 10);
        assert_eq!(seeds.iter().filter(|&&s| s == "2").count(), 10);
    }

    #[test]
    fn accuracy_column_round_trips() {
        let log = run(0, 4);
        let csv = report_csv(std::slice::from_ref(&log));
        for (line, e) in csv.lines().skip(1).zip(&log.epochs) {
            let acc: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
            assert!((acc - e.accuracy).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_summary_is_an_error() {
        let text = run(0, 1).to_jsonl();
        let first = text.lines().next().unwrap();
        assert!(RunLog::parse(first).is_err());
    }
}
