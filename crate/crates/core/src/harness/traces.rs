//! Plot-ready trace files (CSV or JSON lines) and their reader.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TraceFormat;
use crate::error::{Error, Result};
use crate::optim::{RunTrace, TraceRecord};

pub const CSV_HEADER: &str = "iter,loss,dist_sq,output_err_sq,contraction_ratio,grad_norm_total,wall_ms";

/// One persisted row. Missing teacher quantities are empty CSV cells / JSON nulls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub dist_sq: Option<f64>,
    pub output_err_sq: Option<f64>,
    pub contraction_ratio: Option<f64>,
    pub grad_norm_total: f64,
    pub wall_ms: f64,
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        TraceRow {
            iter: r.iter,
            loss: r.loss,
            dist_sq: r.dist_sq,
            output_err_sq: r.output_err_sq,
            contraction_ratio: r.contraction_ratio,
            grad_norm_total: r.grad_norm_total(),
            wall_ms: r.wall_ms,
        }
    }
}

pub fn rows(trace: &RunTrace) -> Vec<TraceRow> {
    trace.records.iter().map(TraceRow::from).collect()
}

pub fn emit_traces(trace: &RunTrace, format: TraceFormat, path: &Path) -> Result<()> {
    write_rows(&rows(trace), format, path)
}

pub fn write_rows(rows: &[TraceRow], format: TraceFormat, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        TraceFormat::Csv => {
            // The csv writer only emits a header with the first record.
            writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for row in rows {
                w.serialize(row).map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        TraceFormat::Jsonl => {
            for row in rows {
                serde_json::to_writer(&mut out, row).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Trace(format!("{}: {e}", path.display()))
}

/// Format inferred from the file extension.
pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => TraceFormat::Csv,
        Some("jsonl") => TraceFormat::Jsonl,
        _ => return Err(Error::Trace(format!("{}: unknown trace extension", path.display()))),
    };
    read_rows(path, format)
}

pub fn read_rows(path: &Path, format: TraceFormat) -> Result<Vec<TraceRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        TraceFormat::Csv => {
            let mut r = csv::Reader::from_reader(BufReader::new(file));
            let header = r.headers().map_err(|e| csv_error(path, e))?;
            if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
                return Err(Error::Trace(format!("{}: unexpected header", path.display())));
            }
            r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
        }
        TraceFormat::Jsonl => BufReader::new(file)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|line| {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace(n: usize) -> RunTrace {
        let records = (0..n)
            .map(|i| TraceRecord {
                iter: i,
                loss: 0.1f64.powi(i as i32) / 3.0,
                dist_sq: if i == 1 { None } else { Some(std::f64::consts::PI * 1e-300 * (i + 1) as f64) },
                output_err_sq: Some(1.0 / 7.0),
                grad_norms: vec![0.3, 0.4],
                contraction_ratio: (i > 0).then_some(0.999_999_999_999_9),
                wall_ms: 0.0,
            })
            .collect();
        RunTrace {
            records,
            ..RunTrace::default()
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        emit_traces(&RunTrace::default(), TraceFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(read_traces(&p).unwrap().is_empty());
    }

    #[test]
    fn three_records_four_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        emit_traces(&sample_trace(3), TraceFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
    }

    #[test]
    fn both_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = sample_trace(5);
        for fmt in [TraceFormat::Csv, TraceFormat::Jsonl] {
            let p = dir.path().join(format!("t.{}", fmt.extension()));
            emit_traces(&trace, fmt, &p).unwrap();
            assert_eq!(read_traces(&p).unwrap(), rows(&trace));
        }
    }

    #[test]
    fn missing_file_has_path_context() {
        let err = read_traces(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }
}
