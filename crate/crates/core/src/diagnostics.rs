//! Per-round training-dynamics signals and the metrics CSV.
//!
//! The CSV header is fixed:
//!
//! ```text
//! round,test_acc,avg_local_loss,stat_drift,local_dev,win_var,lr,frozen,participants
//! ```
//!
//! Floats are written with 17 significant digits so they read back exactly;
//! `win_var` is empty until the sliding window has filled; `frozen` is 0/1.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::norm::RunningStats;

pub const RECORDS_HEADER: [&str; 9] = [
    "round",
    "test_acc",
    "avg_local_loss",
    "stat_drift",
    "local_dev",
    "win_var",
    "lr",
    "frozen",
    "participants",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    /// `Σ_m p_m · L_m` over participants.
    pub avg_local_loss: f64,
    /// `‖S̄^(t) − S̄^(t−1)‖₁`
    pub global_stat_drift: f64,
    /// `mean_m ‖S_{m,B}^(t) − S̄^(t−1)‖₁`, using each client's last mini-batch.
    pub mean_local_deviation: f64,
    /// Population variance of the freeze-trigger signal over the last `W`
    /// rounds, once `W` rounds exist.
    pub windowed_stat_variance: Option<f64>,
    pub lr: f64,
    pub frozen: bool,
    pub participants: usize,
}

fn ensure_congruent(a: &[RunningStats], b: &[RunningStats]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("{} vs {} batch-norm layers", a.len(), b.len())));
    }
    Ok(())
}

/// `Σ_layers Σ_channels |Δμ| + |Δσ²|`
pub fn l1_drift(prev: &[RunningStats], next: &[RunningStats]) -> Result<f64> {
    ensure_congruent(prev, next)?;
    prev.iter().zip(next).map(|(a, b)| a.l1_distance(b)).sum()
}

/// Same norm as [`l1_drift`], between one client's mini-batch statistics and
/// the global running statistics.
pub fn local_deviation(minibatch: &[RunningStats], global: &[RunningStats]) -> Result<f64> {
    l1_drift(minibatch, global)
}

/// Population variance of the last `window` entries; `None` while the history
/// is shorter than the window.
pub fn windowed_variance(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window {
        return None;
    }
    let tail = &history[history.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    Some(tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_records<W: Write>(records: &[RoundRecord], writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORDS_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_f64(r.test_accuracy),
            fmt_f64(r.avg_local_loss),
            fmt_f64(r.global_stat_drift),
            fmt_f64(r.mean_local_deviation),
            r.windowed_stat_variance.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.lr),
            u8::from(r.frozen).to_string(),
            r.participants.to_string(),
        ])?;
    }
    w.flush()
}

pub fn save_records(records: &[RoundRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_records<R: Read>(reader: R, source: &str) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let err = |line: u64, column: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        column,
        message,
    };
    let headers = rdr.headers().map_err(|e| err(1, 1, e.to_string()))?;
    if headers.iter().ne(RECORDS_HEADER) {
        return Err(err(1, 1, format!("expected header {}", RECORDS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), 1, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let float = |c: usize| -> Result<f64> {
            rec[c]
                .parse::<f64>()
                .map_err(|_| err(line, c as u64 + 1, format!("bad {} `{}`", RECORDS_HEADER[c], &rec[c])))
        };
        let int = |c: usize| -> Result<usize> {
            rec[c]
                .parse::<usize>()
                .map_err(|_| err(line, c as u64 + 1, format!("bad {} `{}`", RECORDS_HEADER[c], &rec[c])))
        };
        let frozen = match &rec[7] {
            "0" => false,
            "1" => true,
            other => return Err(err(line, 8, format!("frozen must be 0 or 1, got `{other}`"))),
        };
        out.push(RoundRecord {
            round: int(0)?,
            test_accuracy: float(1)?,
            avg_local_loss: float(2)?,
            global_stat_drift: float(3)?,
            mean_local_deviation: float(4)?,
            windowed_stat_variance: if rec[5].is_empty() { None } else { Some(float(5)?) },
            lr: float(6)?,
            frozen,
            participants: int(8)?,
        });
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), &path.display().to_string())
}
