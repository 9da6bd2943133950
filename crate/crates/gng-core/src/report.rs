//! Structured run reports: a JSON document plus a per-sample metrics CSV.
//!
//! The CSV is the reproducibility contract: fixed header, `.` decimal
//! separator, LF line endings, no locale dependence, and byte-identical
//! content for a fixed config and seed. Timing is therefore reported only
//! in the JSON summary (`wall_time_ms`, the one field excluded from the
//! determinism contract); the per-row `wall_ms` column is kept for schema
//! stability and always reads 0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sampler::Counters;

pub const CSV_HEADER: &str = "sample_id,mse_to_truth,residual_norm,posterior_mean_err,posterior_cov_err,denoiser_calls,denoiser_grad_calls,wall_ms";

/// One CSV row. Optional fields are empty when no ground truth or no exact
/// posterior is available for the task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: usize,
    pub mse_to_truth: Option<f64>,
    pub residual_norm: f64,
    /// Distance of this sample from the exact posterior mean.
    pub posterior_mean_err: Option<f64>,
    /// Per-row slot for the covariance-gap column; populated only in the
    /// aggregate, where a covariance is defined.
    pub posterior_cov_err: Option<f64>,
    pub denoiser_calls: u64,
    pub denoiser_grad_calls: u64,
}

/// Run-level metrics over all samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub sample_mean: Vec<f64>,
    pub sample_std: Vec<f64>,
    pub residual_norm_mean: f64,
    pub mse_to_truth_mean: Option<f64>,
    /// ||mean(samples) - exact posterior mean||.
    pub posterior_mean_err: Option<f64>,
    /// ||cov(samples) - exact posterior cov||_F.
    pub posterior_cov_err: Option<f64>,
}

/// Everything one run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_echo: serde_json::Value,
    pub rng_scheme: String,
    pub samples: Vec<Vec<f64>>,
    pub rows: Vec<SampleRow>,
    pub counters: Counters,
    pub aggregate: Aggregate,
    /// Measured wall time; excluded from the byte-determinism contract.
    pub wall_time_ms: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    /// Per-sample metrics as CSV text.
    pub fn csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},0\n",
                row.sample_id,
                fmt_opt(row.mse_to_truth),
                row.residual_norm,
                fmt_opt(row.posterior_mean_err),
                fmt_opt(row.posterior_cov_err),
                row.denoiser_calls,
                row.denoiser_grad_calls,
            ));
        }
        out
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::Error::Config(format!("report serialization: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.csv().as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut body = self.to_json_pretty()?;
        body.push('\n');
        write_atomic(path, body.as_bytes())
    }
}

/// Write-then-rename so partially written reports never land at the target
/// path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
