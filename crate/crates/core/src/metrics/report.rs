use serde::{Deserialize, Serialize};

use super::{averaged_swd, grid_metrics, median_bandwidth, mmd_unbiased, run_seed, GridMetrics};
use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_projections: usize,
    pub n_run: usize,
    pub p: u32,
    pub seed: u64,
    /// Fixed RBF bandwidth; the pooled median heuristic when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_projections: 256,
            n_run: 10,
            p: 2,
            seed: 0,
            bandwidth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub n_projections: usize,
    pub n_run: usize,
    pub p: u32,
    pub seed: u64,
    pub run_seeds: Vec<u64>,
    pub n_samples_x: usize,
    pub n_samples_y: usize,
    pub n_points: usize,
    pub f_dim: usize,
    pub bandwidth_source: String,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub swd_mean: f64,
    pub swd_runs: Vec<f64>,
    /// `sqrt(max(mmd_squared, 0))`.
    pub mmd: f64,
    /// Raw unbiased estimate.
    pub mmd_squared: f64,
    pub mmd_negative: bool,
    pub mmd_bandwidth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridMetrics>,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report fields are plain data")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MinoError::invalid(format!("bad metric report: {e}")))
    }
}

/// Averaged SWD and MMD, plus grid metrics when the point set is a declared grid.
pub fn evaluate<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>, cfg: &EvalConfig) -> Result<MetricReport> {
    let (swd_mean, swd_runs) = averaged_swd(x, y, cfg.n_projections, cfg.n_run, cfg.p, cfg.seed)?;
    let (bandwidth, source) = match cfg.bandwidth {
        Some(b) => (b, "fixed".to_string()),
        None => {
            let (b, fallback) = median_bandwidth(x, y)?;
            (b, if fallback { "median_fallback" } else { "median" }.to_string())
        }
    };
    let mmd_squared = mmd_unbiased(x, y, bandwidth)?;
    let grid = match x.points().grid_shape() {
        Some(_) => Some(grid_metrics(x, y)?),
        None => None,
    };
    let mut notes = Vec::new();
    if grid.is_some() {
        notes.push(
            "grid metrics: radially binned mean power spectrum, circular non-centered autocovariance, \
             100-bin pooled-range value histograms; reconstructions, not canonical definitions"
                .to_string(),
        );
    }
    if mmd_squared < 0.0 {
        notes.push("unbiased MMD estimate is negative; reported mmd is clamped to 0".to_string());
    }
    Ok(MetricReport {
        swd_mean,
        swd_runs,
        mmd: mmd_squared.max(0.0).sqrt(),
        mmd_squared,
        mmd_negative: mmd_squared < 0.0,
        mmd_bandwidth: bandwidth,
        grid,
        metadata: ReportMetadata {
            n_projections: cfg.n_projections,
            n_run: cfg.n_run,
            p: cfg.p,
            seed: cfg.seed,
            run_seeds: (0..cfg.n_run).map(|r| run_seed(cfg.seed, r)).collect(),
            n_samples_x: x.len(),
            n_samples_y: y.len(),
            n_points: x.n_points(),
            f_dim: x.f_dim(),
            bandwidth_source: source,
            notes,
        },
    })
}
