//! Metrics over prediction logs and the machine-readable run report.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{PredictionLog, StepSummary};
use crate::error::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Maximum points written to a series file.
pub const SERIES_POINTS: usize = 1000;

/// Running error rate in percent after each arrival.
pub fn cumulative_error(log: &PredictionLog) -> Result<Vec<f64>> {
    let mut wrong = 0usize;
    let mut out = Vec::with_capacity(log.len());
    for (n, r) in log.records().iter().enumerate() {
        let miss = r
            .is_error()
            .ok_or_else(|| Error::Report(format!("sample {} has no true label", r.sample_id)))?;
        wrong += miss as usize;
        out.push(100.0 * wrong as f64 / (n + 1) as f64);
    }
    Ok(out)
}

/// Final error rate in percent; `None` for an empty log.
pub fn final_error(log: &PredictionLog) -> Result<Option<f64>> {
    Ok(cumulative_error(log)?.last().copied())
}

/// At most `max_points` evenly spaced `(arrival index, value)` pairs, always
/// keeping the last one.
pub fn downsample(series: &[f64], max_points: usize) -> Vec<(usize, f64)> {
    let n = series.len();
    if n == 0 || max_points == 0 {
        return Vec::new();
    }
    if n <= max_points {
        return series.iter().copied().enumerate().collect();
    }
    (1..=max_points)
        .map(|j| {
            let i = (j * n).div_ceil(max_points) - 1;
            (i, series[i])
        })
        .collect()
}

pub fn write_series_csv(path: &Path, points: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["arrival_index", "cumulative_error"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (i, v) in points {
        w.write_record([i.to_string(), format!("{v}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Report("mean/std needs at least two values".into()));
    }
    // Shifted by the first value so that identical inputs give exactly zero.
    let n = values.len() as f64;
    let v0 = values[0];
    let shift = values.iter().map(|v| v - v0).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - v0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((v0 + shift, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_seconds: f64,
    pub per_sample_seconds: f64,
    pub stream_len: usize,
}

/// Wall time divided by stream length.
pub fn timing_report(total_seconds: f64, stream_len: usize) -> Result<TimingReport> {
    if stream_len == 0 {
        return Err(Error::Report("cannot time a zero-length stream".into()));
    }
    Ok(TimingReport {
        total_seconds,
        per_sample_seconds: total_seconds / stream_len as f64,
        stream_len,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub first_mean_total: Option<f64>,
    pub last_mean_total: Option<f64>,
    pub mean_pass_fraction: Option<f64>,
}

impl LossSummary {
    pub fn from_steps(steps: &[StepSummary]) -> Self {
        let active: Vec<&StepSummary> = steps.iter().filter(|s| s.minibatches > 0).collect();
        Self {
            steps: steps.len(),
            first_mean_total: active.first().map(|s| s.mean_total),
            last_mean_total: active.last().map(|s| s.mean_total),
            mean_pass_fraction: if active.is_empty() {
                None
            } else {
                Some(active.iter().map(|s| s.pass_fraction).sum::<f64>() / active.len() as f64)
            },
        }
    }
}

/// One labeled row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub final_error: f64,
}

/// Deterministic summary of one run. Wall-clock timing is kept out of it so
/// that repeated runs produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub seed: u64,
    pub config: toml::Table,
    pub stream_len: usize,
    pub final_error: f64,
    /// Downsampled `(arrival index, running error %)`.
    pub cumulative_error: Vec<(usize, f64)>,
    pub loss: LossSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<TableRow>,
}

impl RunReport {
    pub fn new(seed: u64, config: toml::Table, log: &PredictionLog, steps: &[StepSummary]) -> Result<Self> {
        let series = cumulative_error(log)?;
        let final_error = *series
            .last()
            .ok_or_else(|| Error::Report("empty prediction log".into()))?;
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            seed,
            config,
            stream_len: log.len(),
            final_error,
            cumulative_error: downsample(&series, SERIES_POINTS),
            loss: LossSummary::from_steps(steps),
            rows: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let r: Self = serde_json::from_str(&text)?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Report(format!(
                "unsupported report version {}",
                r.format_version
            )));
        }
        Ok(r)
    }
}
