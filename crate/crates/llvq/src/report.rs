//! CSV, JSON and markdown outputs, plus PNG reconstruction grids.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use llvq_core::census::{CodebookCensus, UsageVerdict};
use llvq_core::nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::bench::BenchRow;
use crate::io::{write_atomic, IoError};
use crate::run::EpochReport;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("grid needs matching originals and reconstructions, got {0} and {1}")]
    GridMismatch(String, String),
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
}

/// Flat CSV row for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub reconstruction: f64,
    pub embedding: f64,
    pub commitment: f64,
    pub size: f64,
    pub total: f64,
    pub unique_codes: u64,
    pub basis_l1: Option<f64>,
    pub seconds: f64,
    pub cumulative_seconds: f64,
}

impl From<&EpochReport> for EpochRow {
    fn from(r: &EpochReport) -> Self {
        let m = &r.metrics;
        Self {
            epoch: m.epoch,
            steps: m.steps,
            lr: m.lr,
            reconstruction: m.losses.reconstruction,
            embedding: m.losses.embedding,
            commitment: m.losses.commitment,
            size: m.losses.size,
            total: m.losses.total,
            unique_codes: m.unique_codes,
            basis_l1: m.basis_l1,
            seconds: r.timing.seconds,
            cumulative_seconds: r.timing.cumulative_seconds,
        }
    }
}

/// Rewrites the whole epoch log; called after every epoch.
pub fn write_epochs_csv(path: &Path, reports: &[EpochReport]) -> Result<(), ReportError> {
    let rows: Vec<EpochRow> = reports.iter().map(EpochRow::from).collect();
    Ok(write_atomic(path, &csv_bytes(&rows)?)?)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<Vec<u8>, ReportError> {
    csv_bytes(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: Option<f64>,
    pub census_seconds: f64,
}

/// JSON summary of one census.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusSummary {
    pub model: String,
    pub distinct: u64,
    pub total_sites: u64,
    pub verdict: UsageVerdict,
    pub timings: Timings,
}

impl CensusSummary {
    pub fn new(model: &str, census: &CodebookCensus, verdict: UsageVerdict, timings: Timings) -> Self {
        Self {
            model: model.into(),
            distinct: census.distinct() as u64,
            total_sites: census.total_sites(),
            verdict,
            timings,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct CensusRow<'a> {
    model: &'a str,
    distinct: u64,
    total_sites: u64,
    verdict: &'static str,
    train_seconds: Option<f64>,
    census_seconds: f64,
}

pub fn census_csv(summaries: &[CensusSummary]) -> Result<Vec<u8>, ReportError> {
    let rows: Vec<CensusRow<'_>> = summaries
        .iter()
        .map(|s| CensusRow {
            model: &s.model,
            distinct: s.distinct,
            total_sites: s.total_sites,
            verdict: s.verdict.usage.as_str(),
            train_seconds: s.timings.train_seconds,
            census_seconds: s.timings.census_seconds,
        })
        .collect();
    csv_bytes(&rows)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    Ok(write_atomic(path, bytes)?)
}

/// PNG with the originals in the top row and reconstructions below,
/// one column per image. Values are clamped to `[0, 1]` here only.
pub fn recon_grid_png(originals: &Tensor<f32>, recons: &Tensor<f32>) -> Result<Vec<u8>, ReportError> {
    let (a, b) = (originals.shape(), recons.shape());
    if a != b || !(a.c == 1 || a.c == 3) {
        return Err(ReportError::GridMismatch(a.to_string(), b.to_string()));
    }
    let (h, w, c) = (a.h, a.w, a.c);
    let width = (a.n * w) as u32;
    let height = (2 * h) as u32;
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let pixel = |x: u32, y: u32, ch: usize| -> u8 {
        let (x, y) = (x as usize, y as usize);
        let src = if y < h { originals } else { recons };
        let (i, yy, xx) = (x / w, y % h, x % w);
        byte(src.data()[((i * h + yy) * w + xx) * c + ch])
    };
    let mut out = std::io::Cursor::new(Vec::new());
    if c == 1 {
        ImageBuffer::<Luma<u8>, _>::from_fn(width, height, |x, y| Luma([pixel(x, y, 0)]))
            .write_to(&mut out, ImageFormat::Png)?;
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_fn(width, height, |x, y| Rgb([pixel(x, y, 0), pixel(x, y, 1), pixel(x, y, 2)]))
            .write_to(&mut out, ImageFormat::Png)?;
    }
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use llvq_core::nn::Shape;

    #[test]
    fn grid_layout() {
        let s = Shape::new(2, 2, 2, 1);
        let orig = Tensor::from_vec(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let rec = Tensor::from_vec(s, vec![0.5; 8]).unwrap();
        let png = recon_grid_png(&orig, &rec).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (4, 4));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(3, 1)[0], 255);
        assert_eq!(img.get_pixel(1, 3)[0], 128);
    }
}
