//! Monte-Carlo size and power runs: simulate, scan, decide, repeat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::QuantileTable;
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, Noise, Theta};
use crate::scan::{self, ScanConfig};
use crate::simulate::{self, EpidemicDesign, SeedSpec, DEFAULT_BURNIN};

fn default_tau1() -> f64 {
    0.3
}
fn default_tau2() -> f64 {
    0.7
}
fn default_reps() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.05
}
fn default_burnin() -> usize {
    DEFAULT_BURNIN
}

/// One experiment cell. Without `theta1` the data are simulated under the
/// null and the rejection frequency is an empirical size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: Family,
    #[serde(default = "default_noise")]
    pub noise: Noise,
    pub theta0: Theta,
    #[serde(default)]
    pub theta1: Option<Theta>,
    #[serde(default = "default_tau1")]
    pub tau1: f64,
    #[serde(default = "default_tau2")]
    pub tau2: f64,
    pub n: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    #[serde(default)]
    pub u_n: Option<usize>,
    #[serde(default)]
    pub v_n: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
}

fn default_noise() -> Noise {
    Noise::Poisson
}

impl ExperimentConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.family, self.noise)
    }

    pub fn scan_config(&self) -> ScanConfig {
        let mut c = ScanConfig::experiment(self.n, self.alpha);
        if let Some(u) = self.u_n {
            c.u_n = u;
        }
        if let Some(v) = self.v_n {
            c.v_n = v;
        }
        if let Some(s) = self.stride {
            c.stride = s;
        }
        c
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be positive".into()));
        }
        let spec = self.spec();
        spec.validate()?;
        spec.check_theta(&self.theta0)?;
        if let Some(th) = &self.theta1 {
            spec.check_theta(th)?;
        }
        self.scan_config().validate(self.n, spec.dim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub q_n: Option<f64>,
    pub reject: Option<bool>,
    pub k_hat: Option<(usize, usize)>,
    /// True breaks; absent under the null.
    pub breaks: Option<(usize, usize)>,
    pub excluded_pairs: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub c_alpha: f64,
    pub requested: usize,
    pub completed: usize,
    pub failed: usize,
    pub rejections: usize,
    /// Rejections over completed replications.
    pub frequency: f64,
    /// Median `|k̂ᵢ − tᵢ|` for each break over rejecting replications.
    pub median_break_error: Option<(f64, f64)>,
    pub reps: Vec<RepOutcome>,
}

fn run_rep(config: &ExperimentConfig, spec: &ModelSpec, scan_cfg: &ScanConfig, table: &QuantileTable, rep: usize) -> RepOutcome {
    let seed = SeedSpec::new(config.seed, rep as u64);
    let mut out = RepOutcome {
        rep,
        q_n: None,
        reject: None,
        k_hat: None,
        breaks: None,
        excluded_pairs: 0,
        error: None,
    };
    let series = match &config.theta1 {
        None => simulate::simulate_null(spec, &config.theta0, config.n, config.burnin, seed),
        Some(theta1) => {
            let design = EpidemicDesign {
                theta0: config.theta0.clone(),
                theta1: theta1.clone(),
                tau1: config.tau1,
                tau2: config.tau2,
            };
            simulate::simulate_epidemic(spec, &design, config.n, config.burnin, seed).map(|e| {
                out.breaks = Some(e.breaks);
                e.series
            })
        }
    };
    match series.and_then(|y| scan::scan(spec, &y, scan_cfg, table)) {
        Ok(r) => {
            out.q_n = Some(r.q_n);
            out.reject = Some(r.reject);
            out.k_hat = Some(r.k_hat);
            out.excluded_pairs = r.excluded.len();
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Runs all replications; replication `i` draws from stream `i` of `seed`.
/// Failed replications are reported, not counted in the frequency.
pub fn run_experiment(config: &ExperimentConfig, table: &QuantileTable) -> Result<ExperimentResult> {
    config.validate()?;
    let spec = config.spec();
    let scan_cfg = config.scan_config();
    let c_alpha = table.lookup(spec.dim(), config.alpha)?;
    let reps: Vec<RepOutcome> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_rep(config, &spec, &scan_cfg, table, rep))
        .collect();
    let completed = reps.iter().filter(|r| r.error.is_none()).count();
    let rejections = reps.iter().filter(|r| r.reject == Some(true)).count();
    let frequency = if completed > 0 { rejections as f64 / completed as f64 } else { f64::NAN };
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    for r in &reps {
        if let (Some(true), Some(k), Some(t)) = (r.reject, r.k_hat, r.breaks) {
            e1.push(k.0.abs_diff(t.0) as f64);
            e2.push(k.1.abs_diff(t.1) as f64);
        }
    }
    let median_break_error = median(e1).zip(median(e2));
    Ok(ExperimentResult {
        config: config.clone(),
        c_alpha,
        requested: config.reps,
        completed,
        failed: config.reps - completed,
        rejections,
        frequency,
        median_break_error,
        reps,
    })
}
