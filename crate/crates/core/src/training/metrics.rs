//! Append-only line-delimited training metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    /// Mean sampled-rollout cost per variant seen this epoch.
    pub mean_cost: BTreeMap<String, f64>,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_secs: f64,
}

/// Appends one JSON line per record.
pub struct MetricsWriter {
    file: Option<std::fs::File>,
}

impl MetricsWriter {
    pub fn to_path(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self { file: Some(file) })
    }

    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(record)
                .map_err(|e| crate::error::CoreError::Parse(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
