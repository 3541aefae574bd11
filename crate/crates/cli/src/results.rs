//! CSV and JSON result export.

use std::path::Path;

use pnpttt_core::experiment::{ResultRow, Summary};
use serde::{Deserialize, Serialize};

use crate::binio::write_file;
use crate::error::{io_err, Result};

pub const RESULT_HEADER: [&str; 9] =
    ["experiment_id", "prior", "cs_ratio", "image_id", "ttt_iteration", "loss", "psnr_db", "ssim", "wall_time_s"];

/// One recorded test-time-training iteration with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub experiment_id: String,
    pub cs_ratio: f64,
    pub image_id: usize,
    pub iteration: usize,
    pub loss: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub forward_residual: f64,
    /// Empty when no gradient was taken at this iteration.
    pub adjoint_residual: Option<f64>,
}

/// Mean trace over images for one ratio, ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTraceRow {
    pub cs_ratio: f64,
    pub iteration: usize,
    pub mean_psnr_db: f64,
    pub mean_loss: f64,
}

fn to_csv<T: Serialize>(rows: &[T], header: Option<&[&str]>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}

/// Result rows with the fixed header, even when `rows` is empty.
pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_file(path, &to_csv(rows, Some(&RESULT_HEADER))?)
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != RESULT_HEADER {
        return Err(crate::binio::format_err(path, "unexpected result header"));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_file(path, &to_csv(rows, None)?)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn mean_trace(summary: &Summary) -> Vec<MeanTraceRow> {
    let mut out = Vec::new();
    for (r, &ratio) in summary.cs_ratios.iter().enumerate() {
        for (k, &iteration) in summary.trace_iterations[r].iter().enumerate() {
            out.push(MeanTraceRow {
                cs_ratio: ratio,
                iteration,
                mean_psnr_db: summary.trace_mean_psnr[r][k],
                mean_loss: summary.trace_mean_loss[r][k],
            });
        }
    }
    out
}

pub fn write_mean_trace(path: &Path, rows: &[MeanTraceRow]) -> Result<()> {
    write_file(path, &to_csv(rows, None)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
