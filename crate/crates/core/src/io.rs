//! CSV ingestion and the JSON detection report.

use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bridge::QuantileTable;
use crate::error::{Error, Result};
use crate::model::{CountSeries, Family, ModelSpec, Noise, Theta};
use crate::scan::{self, ScanConfig, ScanResult};

/// Reads counts from the first CSV column. A single non-numeric header
/// line is allowed; any other column is ignored.
pub fn ingest_csv<R: Read>(reader: R) -> Result<CountSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        let field = record.get(0).unwrap_or("");
        if field.is_empty() && record.len() <= 1 {
            continue;
        }
        match parse_count(field) {
            Ok(v) => values.push(v),
            Err(_) if idx == 0 && field.parse::<f64>().is_err() => continue,
            Err(message) => return Err(Error::Parse { line, message }),
        }
    }
    CountSeries::new(values)
}

fn parse_count(field: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = field.parse::<u64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(x) if x < 0.0 => Err(format!("negative count '{field}'")),
        Ok(x) if x.fract() != 0.0 => Err(format!("fractional count '{field}'")),
        Ok(x) if x.is_finite() && x <= u64::MAX as f64 => Ok(x as u64),
        _ => Err(format!("not a count: '{field}'")),
    }
}

pub fn ingest_csv_path(path: &Path) -> Result<CountSeries> {
    ingest_csv(std::fs::File::open(path)?)
}

/// Writes counts as CSV with header `y`.
pub fn write_series_csv<W: std::io::Write>(out: W, series: &CountSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["y"])?;
    for v in series.values() {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub lo: usize,
    pub hi: usize,
    pub theta: Theta,
    pub robust_se: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runtime_secs: f64,
}

/// Outcome of `detect`. Everything except `timing` is a deterministic
/// function of the input series and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub n: usize,
    pub family: Family,
    pub noise: Noise,
    pub u_n: usize,
    pub v_n: usize,
    pub stride: usize,
    pub alpha: f64,
    pub q_n: f64,
    pub c_alpha: f64,
    pub reject: bool,
    pub k_hat: (usize, usize),
    pub regimes: Vec<RegimeReport>,
    /// `‖θ̂₁ − θ̂₃‖` between the outer regimes.
    pub outer_regime_distance: f64,
    pub sigma: Vec<Vec<f64>>,
    pub pairs_evaluated: usize,
    pub excluded_pairs: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl DetectReport {
    pub fn from_scan(spec: &ModelSpec, n: usize, config: &ScanConfig, result: &ScanResult, runtime_secs: f64) -> Self {
        let regimes: Vec<RegimeReport> = result
            .theta_hats
            .iter()
            .map(|e| RegimeReport {
                lo: e.seg.lo,
                hi: e.seg.hi,
                theta: e.theta_hat.clone(),
                robust_se: e.robust_se.clone(),
                loglik: e.loglik,
                converged: e.converged,
            })
            .collect();
        let mut warnings = result.warnings.clone();
        for r in &regimes {
            if !r.converged {
                warnings.push(format!("regime [{}, {}] fit did not converge", r.lo, r.hi));
            }
        }
        let d = spec.dim();
        Self {
            n,
            family: spec.family,
            noise: spec.noise,
            u_n: config.u_n,
            v_n: config.v_n,
            stride: config.stride,
            alpha: config.alpha,
            q_n: result.q_n,
            c_alpha: result.c_alpha,
            reject: result.reject,
            k_hat: result.k_hat,
            outer_regime_distance: regimes[0].theta.distance(&regimes[2].theta),
            regimes,
            sigma: (0..d)
                .map(|i| (0..d).map(|j| result.sigma.matrix[(i, j)]).collect())
                .collect(),
            pairs_evaluated: result.surface.len() + result.excluded.len(),
            excluded_pairs: result.excluded.clone(),
            warnings,
            timing: Timing { runtime_secs },
        }
    }

    /// Serialization with the timing section zeroed, for byte comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing.runtime_secs = 0.0;
        Ok(serde_json::to_string_pretty(&copy)?)
    }
}

/// Runs the scan on `series` and assembles the report.
pub fn run_detect(
    series: &CountSeries,
    spec: &ModelSpec,
    config: &ScanConfig,
    table: &QuantileTable,
) -> Result<(DetectReport, ScanResult)> {
    let start = Instant::now();
    let result = scan::scan(spec, series, config, table)?;
    let report = DetectReport::from_scan(spec, series.len(), config, &result, start.elapsed().as_secs_f64());
    Ok((report, result))
}
