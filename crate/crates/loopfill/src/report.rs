//! Loss curves and metric reports as CSV, JSON and plain text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use loopfill_core::eval::MetricReport;
use loopfill_core::model::LossRecord;

use crate::bundle::write_json;
use crate::commands::EvalOutcome;
use crate::error::{IoContext, PipelineError, Result};

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::format(path, e.to_string())
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

/// `step,loss,lr`, one row per step.
pub fn write_loss_csv(curve: &[LossRecord], path: &Path) -> Result<()> {
    if curve.is_empty() {
        return fs::write(path, "step,loss,lr\n").at(path);
    }
    write_csv(curve, path)
}

#[derive(Debug, Serialize)]
pub struct ObjectRow<'a> {
    pub variant: &'a str,
    pub views: usize,
    pub seed: u64,
    pub label: usize,
    pub mask_variant: &'a str,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency_psnr: f64,
}

#[derive(Debug, Serialize)]
pub struct AggregateRow<'a> {
    pub variant: &'a str,
    pub views: usize,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub consistency_psnr: f64,
}

fn aggregate_row<'a>(r: &MetricReport, name: &'a str) -> AggregateRow<'a> {
    AggregateRow {
        variant: name,
        views: r.views,
        count: r.count,
        psnr_mean: r.psnr_mean,
        psnr_std: r.psnr_std,
        ssim_mean: r.ssim_mean,
        ssim_std: r.ssim_std,
        consistency_psnr: r.consistency_psnr,
    }
}

pub fn object_rows<'a>(r: &'a MetricReport, name: &'a str) -> Vec<ObjectRow<'a>> {
    r.objects
        .iter()
        .map(|o| ObjectRow {
            variant: name,
            views: r.views,
            seed: o.seed,
            label: o.label,
            mask_variant: o.mask_variant.as_str(),
            psnr: o.psnr,
            ssim: o.ssim,
            consistency_psnr: o.consistency_psnr,
        })
        .collect()
}

const BASE_ONLY: &str = "consistent_inpaint_base_only";

/// Aligned plain-text table of aggregate rows.
pub fn summary_table(outcome: &EvalOutcome) -> String {
    let mut rows: Vec<AggregateRow> = outcome.variants.iter().map(|r| aggregate_row(r, r.variant.as_str())).collect();
    if let Some(b) = &outcome.base_only {
        rows.push(aggregate_row(b, BASE_ONLY));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{:<30} {:>5} {:>5} {:>16} {:>16} {:>11}", "variant", "views", "n", "psnr (dB)", "ssim", "consistency");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<30} {:>5} {:>5} {:>8.2} ± {:<5.2} {:>8.4} ± {:<5.3} {:>11.2}",
            r.variant, r.views, r.count, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std, r.consistency_psnr
        );
    }
    let _ = writeln!(s, "\nview sweep ({})", outcome.sweep.first().map(|r| r.variant.as_str()).unwrap_or("-"));
    let _ = writeln!(s, "{:>5} {:>16}", "views", "psnr (dB)");
    for r in &outcome.sweep {
        let _ = writeln!(s, "{:>5} {:>8.2} ± {:<5.2}", r.views, r.psnr_mean, r.psnr_std);
    }
    s
}

/// Writes `metrics.csv` (one row per object per variant), `aggregate.csv`,
/// `sweep.csv`, `metrics.json` and `summary.txt` into `dir`.
pub fn write_eval(outcome: &EvalOutcome, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for r in &outcome.variants {
        rows.extend(object_rows(r, r.variant.as_str()));
    }
    if let Some(b) = &outcome.base_only {
        rows.extend(object_rows(b, BASE_ONLY));
    }
    write_csv(&rows, &dir.join("metrics.csv"))?;

    let mut agg: Vec<AggregateRow> = outcome.variants.iter().map(|r| aggregate_row(r, r.variant.as_str())).collect();
    if let Some(b) = &outcome.base_only {
        agg.push(aggregate_row(b, BASE_ONLY));
    }
    write_csv(&agg, &dir.join("aggregate.csv"))?;
    let sweep: Vec<AggregateRow> = outcome.sweep.iter().map(|r| aggregate_row(r, r.variant.as_str())).collect();
    write_csv(&sweep, &dir.join("sweep.csv"))?;
    write_json(outcome, &dir.join("metrics.json"))?;
    let path = dir.join("summary.txt");
    fs::write(&path, summary_table(outcome)).at(&path)
}
