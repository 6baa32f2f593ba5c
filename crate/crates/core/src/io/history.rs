//! Optimization histories as CSV.
//!
//! Floats are written in shortest round-trip form, so parsing a written file
//! reproduces the history exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::driver::{History, HistoryRecord};

/// Column order of the written file.
pub const COLUMNS: [&str; 12] = [
    "iteration",
    "objective",
    "concentration",
    "volume",
    "volume_error",
    "multiplier",
    "step",
    "derivative",
    "lagrangian_before",
    "lagrangian_after",
    "min_angle_deg",
    "forced",
];

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
}

fn row(r: &HistoryRecord) -> [String; 12] {
    [
        r.iteration.to_string(),
        r.objective.to_string(),
        r.concentration.to_string(),
        r.volume.to_string(),
        r.volume_error.to_string(),
        r.multiplier.to_string(),
        r.step.to_string(),
        r.derivative.to_string(),
        r.lagrangian_before.to_string(),
        r.lagrangian_after.to_string(),
        r.min_angle_deg.to_string(),
        r.forced.to_string(),
    ]
}

pub fn write_history<W: Write>(out: W, history: &History) -> Result<(), HistoryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in &history.records {
        w.write_record(row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &History) -> Result<(), HistoryError> {
    write_history(std::fs::File::create(path)?, history)
}

pub fn read_history<R: Read>(input: R) -> Result<History, HistoryError> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if !header.iter().eq(COLUMNS) {
        return Err(HistoryError::Format { row: 0, message: format!("unexpected header {:?}", header) });
    }
    let mut records = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |col: usize| HistoryError::Format { row: i + 1, message: format!("bad {} `{}`", COLUMNS[col], &rec[col]) };
        let f = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        records.push(HistoryRecord {
            iteration: rec[0].parse().map_err(|_| bad(0))?,
            objective: f(1)?,
            concentration: f(2)?,
            volume: f(3)?,
            volume_error: f(4)?,
            multiplier: f(5)?,
            step: f(6)?,
            derivative: f(7)?,
            lagrangian_before: f(8)?,
            lagrangian_after: f(9)?,
            min_angle_deg: f(10)?,
            forced: rec[11].parse().map_err(|_| bad(11))?,
        });
    }
    Ok(History { records })
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<History, HistoryError> {
    read_history(std::fs::File::open(path)?)
}
