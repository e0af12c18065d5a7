//! CSV outputs: per-epoch training metrics, evaluation results and grid
//! comparison tables.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use crate::error::{HexaError, Result, ResultExt};
use crate::train::EpochMetrics;

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "scheme",
    "loss_std",
    "loss_adv",
    "loss_cmx",
    "loss_total",
    "kmeans_objective",
    "queue_size",
    "wall_time_s",
];

pub const EVAL_HEADER: [&str; 6] = ["epoch", "kind", "param", "mean", "std", "runs"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One metrics row; absent terms are empty cells.
pub fn metrics_record(m: &EpochMetrics) -> Vec<String> {
    vec![
        m.epoch.to_string(),
        m.scheme.to_string(),
        m.loss_std.to_string(),
        opt(m.loss_adv),
        opt(m.loss_cmx),
        m.loss_total.to_string(),
        opt(m.kmeans_objective),
        opt(m.queue_size),
        format!("{:.3}", m.wall_time_s),
    ]
}

fn csv_err(path: &Path, e: csv::Error) -> HexaError {
    let ctx = format!("csv {}", path.display());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HexaError::from(io).context(ctx),
        other => HexaError::format(0, format!("{other:?}")).context(ctx),
    }
}

/// Reads a CSV file as a header plus string rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok((header, rows))
}

/// Writes a whole table, replacing any existing file.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(HexaError::from).context(format!("flushing {}", path.display()))
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(HexaError::from)
        .context(format!("opening {}", path.display()))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(HexaError::from).context(format!("flushing {}", path.display()))
}

/// The per-epoch metrics file of a pre-training run.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    pub path: PathBuf,
}

impl MetricsLog {
    /// Starts an empty log.
    pub fn create(path: &Path) -> Result<Self> {
        write_table(path, &METRICS_HEADER, &[])?;
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    /// Reopens a log for a resumed run, dropping rows from `from_epoch` on.
    pub fn resume(path: &Path, from_epoch: usize) -> Result<Self> {
        let (header, rows) = read_table(path)?;
        if header != METRICS_HEADER {
            return Err(HexaError::format(0, format!("unexpected metrics header {header:?}")).context(path.display().to_string()));
        }
        let kept: Vec<Vec<String>> = rows
            .into_iter()
            .filter(|r| r.first().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < from_epoch))
            .collect();
        write_table(path, &METRICS_HEADER, &kept)?;
        Ok(MetricsLog { path: path.to_path_buf() })
    }

    pub fn append(&self, m: &EpochMetrics) -> Result<()> {
        append_rows(&self.path, &METRICS_HEADER, &[metrics_record(m)])
    }
}
