//! Evaluation reports and loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub fold: usize,
    pub n: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldDetail>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(protocol: impl Into<String>, accuracy: f64, n: usize) -> Self {
        Self {
            protocol: protocol.into(),
            accuracy,
            n,
            folds: Vec::new(),
            extra: BTreeMap::new(),
            config_hash: String::new(),
            seed: 0,
        }
    }

    pub fn stamped(mut self, config_hash: &str, seed: u64) -> Self {
        self.config_hash = config_hash.to_string();
        self.seed = seed;
        self
    }
}

pub fn write_report(path: impl AsRef<Path>, report: &EvalReport) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

pub fn read_report(path: impl AsRef<Path>) -> std::io::Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

/// Fixed-width text table, one row per report.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<32} {:>9} {:>7}", "protocol", "accuracy", "n");
    for r in reports {
        let _ = writeln!(out, "{:<32} {:>9.2} {:>7}", r.protocol, r.accuracy, r.n);
    }
    out
}

pub fn write_loss_curve(path: impl AsRef<Path>, epoch_losses: &[f64]) -> std::io::Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in epoch_losses.iter().enumerate() {
        let _ = writeln!(out, "{e},{l}");
    }
    std::fs::write(path, out)
}
