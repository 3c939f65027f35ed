//! CSV emission and parsing for sweep reports and training curves.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! parses back to bit-identical values and reruns with the same seeds
//! produce byte-identical output.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use dtfixup_core::diagnostics::DiagnosticsReport;
use dtfixup_core::init::InitKind;

use crate::harness::TrainingCurve;
use crate::LabError;

pub const DIAGNOSTICS_COLUMNS: [&str; 11] = [
    "scheme",
    "relational",
    "N",
    "mu_target",
    "seed",
    "jacobian_norm_sq",
    "cond_min",
    "cond_max",
    "cond_times_N_median",
    "hidden_drift",
    "update_ratio",
];

pub const CURVE_COLUMNS: [&str; 7] = [
    "scheme",
    "N",
    "seed",
    "step",
    "train_loss",
    "eval_loss",
    "diverged",
];

/// The CSV-facing projection of a diagnostics report.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub scheme: InitKind,
    pub relational: bool,
    pub n_blocks: usize,
    pub mu_target: f64,
    pub seed: u64,
    pub jacobian_norm_sq: f64,
    pub cond_min: f64,
    pub cond_max: f64,
    pub cond_times_n_median: f64,
    pub hidden_drift: f64,
    pub update_ratio: f64,
}

impl DiagnosticsRow {
    pub fn from_report(report: &DiagnosticsReport) -> Self {
        Self {
            scheme: report.scheme,
            relational: report.relational,
            n_blocks: report.n_blocks,
            mu_target: report.mu_target,
            seed: report.seed,
            jacobian_norm_sq: report.jacobian_norm_sq,
            cond_min: report.cond_min(),
            cond_max: report.cond_max(),
            cond_times_n_median: report.cond_times_n_median(),
            hidden_drift: report.hidden_drift,
            update_ratio: report.update_ratio,
        }
    }
}

/// One training-curve sample as emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub scheme: InitKind,
    pub n_blocks: usize,
    pub seed: u64,
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub diverged: bool,
}

pub fn curve_rows(curves: &[TrainingCurve]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for curve in curves {
        for p in &curve.points {
            rows.push(CurveRow {
                scheme: curve.scheme,
                n_blocks: curve.n_blocks,
                seed: curve.seed,
                step: p.step,
                train_loss: p.train_loss,
                eval_loss: p.eval_loss,
                diverged: curve.diverged && p.step == curve.points.last().unwrap().step,
            });
        }
    }
    rows
}

pub fn diagnostics_csv(reports: &[DiagnosticsReport]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(DIAGNOSTICS_COLUMNS).expect("in-memory write");
    for report in reports {
        let row = DiagnosticsRow::from_report(report);
        wtr.write_record([
            row.scheme.name().to_string(),
            row.relational.to_string(),
            row.n_blocks.to_string(),
            format!("{}", row.mu_target),
            row.seed.to_string(),
            format!("{}", row.jacobian_norm_sq),
            format!("{}", row.cond_min),
            format!("{}", row.cond_max),
            format!("{}", row.cond_times_n_median),
            format!("{}", row.hidden_drift),
            format!("{}", row.update_ratio),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn curves_csv(curves: &[TrainingCurve]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(CURVE_COLUMNS).expect("in-memory write");
    for row in curve_rows(curves) {
        wtr.write_record([
            row.scheme.name().to_string(),
            row.n_blocks.to_string(),
            row.seed.to_string(),
            row.step.to_string(),
            format!("{}", row.train_loss),
            format!("{}", row.eval_loss),
            row.diverged.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn write_diagnostics_file(
    reports: &[DiagnosticsReport],
    path: &Path,
) -> Result<(), LabError> {
    let mut file = File::create(path).map_err(|e| LabError::io(path, e))?;
    file.write_all(diagnostics_csv(reports).as_bytes())
        .map_err(|e| LabError::io(path, e))
}

pub fn write_curves_file(curves: &[TrainingCurve], path: &Path) -> Result<(), LabError> {
    let mut file = File::create(path).map_err(|e| LabError::io(path, e))?;
    file.write_all(curves_csv(curves).as_bytes())
        .map_err(|e| LabError::io(path, e))
}

fn malformed(path: &Path, message: impl Into<String>) -> LabError {
    LabError::Malformed {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
) -> Result<T, LabError> {
    let raw = record
        .get(idx)
        .ok_or_else(|| malformed(path, format!("missing column {idx}")))?;
    raw.parse::<T>()
        .map_err(|_| malformed(path, format!("cannot parse `{raw}` in column {idx}")))
}

fn parse_scheme(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
) -> Result<InitKind, LabError> {
    let raw = record
        .get(idx)
        .ok_or_else(|| malformed(path, format!("missing column {idx}")))?;
    InitKind::from_name(raw).ok_or_else(|| malformed(path, format!("unknown scheme `{raw}`")))
}

pub fn read_diagnostics_str(text: &str, path: &Path) -> Result<Vec<DiagnosticsRow>, LabError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| malformed(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != DIAGNOSTICS_COLUMNS {
        return Err(malformed(path, "unexpected header row"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| malformed(path, e.to_string()))?;
        rows.push(DiagnosticsRow {
            scheme: parse_scheme(&record, 0, path)?,
            relational: parse_field(&record, 1, path)?,
            n_blocks: parse_field(&record, 2, path)?,
            mu_target: parse_field(&record, 3, path)?,
            seed: parse_field(&record, 4, path)?,
            jacobian_norm_sq: parse_field(&record, 5, path)?,
            cond_min: parse_field(&record, 6, path)?,
            cond_max: parse_field(&record, 7, path)?,
            cond_times_n_median: parse_field(&record, 8, path)?,
            hidden_drift: parse_field(&record, 9, path)?,
            update_ratio: parse_field(&record, 10, path)?,
        });
    }
    Ok(rows)
}

pub fn read_diagnostics_file(path: &Path) -> Result<Vec<DiagnosticsRow>, LabError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| LabError::io(path, e))?;
    read_diagnostics_str(&text, path)
}

pub fn read_curves_str(text: &str, path: &Path) -> Result<Vec<CurveRow>, LabError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| malformed(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != CURVE_COLUMNS {
        return Err(malformed(path, "unexpected header row"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| malformed(path, e.to_string()))?;
        rows.push(CurveRow {
            scheme: parse_scheme(&record, 0, path)?,
            n_blocks: parse_field(&record, 1, path)?,
            seed: parse_field(&record, 2, path)?,
            step: parse_field(&record, 3, path)?,
            train_loss: parse_field(&record, 4, path)?,
            eval_loss: parse_field(&record, 5, path)?,
            diverged: parse_field(&record, 6, path)?,
        });
    }
    Ok(rows)
}
