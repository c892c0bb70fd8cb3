//! Line-delimited JSON metrics streams and their CSV rendering.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Result, SgadError};
use crate::trainer::{EpochSummary, StepMetrics};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Header { code_version: String, config: ExperimentConfig },
    Step(StepMetrics),
    Epoch(EpochSummary),
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates `path` and writes the header line.
    pub fn create(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        let mut w = Self {
            out: BufWriter::new(File::create(path)?),
        };
        w.write(&MetricsRecord::Header {
            code_version: CODE_VERSION.to_string(),
            config: config.clone(),
        })?;
        Ok(w)
    }

    /// Appends to an existing stream (resumed runs).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SgadError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Keeps only the records of steps and epochs strictly before `epoch`
/// (used when resuming from an end-of-epoch checkpoint). Kept lines are
/// copied verbatim so the stream stays byte-identical to an uninterrupted run.
pub fn truncate_to_epoch(path: &Path, epoch: usize) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BufWriter::new(File::create(path)?);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord =
            serde_json::from_str(line).map_err(|e| SgadError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let keep = match &r {
            MetricsRecord::Header { .. } => true,
            MetricsRecord::Step(s) => s.epoch < epoch,
            MetricsRecord::Epoch(e) => e.epoch < epoch,
        };
        if keep {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch CSV: one row per epoch record.
pub fn epochs_csv(records: &[MetricsRecord]) -> String {
    let epochs: Vec<&EpochSummary> = records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Epoch(e) => Some(e),
            _ => None,
        })
        .collect();
    let l = epochs.first().map_or(0, |e| e.rats_b.len());
    let mut s = String::from("epoch,step,lr,train_loss,test_accuracy,sgnet_accuracy,n_flops,mean_executed_blocks");
    for i in 0..l {
        s.push_str(&format!(",rats_b_{i}"));
    }
    s.push('\n');
    for e in epochs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            e.step,
            e.lr,
            e.train_loss,
            e.test_accuracy,
            fmt_opt(e.sgnet_accuracy),
            e.n_flops,
            e.mean_executed_blocks
        ));
        for r in &e.rats_b {
            s.push_str(&format!(",{r}"));
        }
        s.push('\n');
    }
    s
}

/// Per-step CSV of the loss terms.
pub fn steps_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("epoch,step,lr,r_prime,r_m,r_g,total,batch_accuracy,mean_drop_ratio,unsaturated_fraction\n");
    for r in records {
        if let MetricsRecord::Step(m) = r {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                m.epoch, m.step, m.lr, m.r_prime, m.r_m, m.r_g, m.total, m.batch_accuracy, m.mean_drop_ratio, m.unsaturated_fraction
            ));
        }
    }
    s
}
