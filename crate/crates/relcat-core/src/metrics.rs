//! Line-delimited training and prediction records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One optimizer step of encoder training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderStepMetric {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_size: usize,
}

/// One epoch of link-prediction training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnEpochMetric {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub kept_fraction: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Write any serializable records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).expect("metrics serialize");
        writeln!(f, "{line}")?;
    }
    Ok(())
}
