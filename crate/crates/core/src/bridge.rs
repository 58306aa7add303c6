//! Critical values of `sup_{0≤τ₁<τ₂≤1} ‖W_d(τ₁) − W_d(τ₂)‖²` for a
//! d-dimensional Brownian bridge `W_d`, by Monte Carlo on a uniform grid.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::SeedSpec;

const ALPHA_MATCH: f64 = 1e-9;

/// Bridge values on the grid `{i/G : i = 0..=G}`, point-major (`d` values per point).
pub fn bridge_path<R: Rng>(d: usize, grid_size: usize, rng: &mut R) -> Vec<f64> {
    let g = grid_size;
    let sd = (1.0 / g as f64).sqrt();
    let mut b = vec![0.0; (g + 1) * d];
    for i in 1..=g {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            b[i * d + k] = b[(i - 1) * d + k] + sd * z;
        }
    }
    let end: Vec<f64> = b[g * d..].to_vec();
    for i in 0..=g {
        let tau = i as f64 / g as f64;
        for k in 0..d {
            b[i * d + k] -= tau * end[k];
        }
    }
    // Pin the endpoint exactly.
    for k in 0..d {
        b[g * d + k] = 0.0;
    }
    b
}

/// Largest squared distance between any two of the points (`d` coordinates each).
///
/// d = 1 uses `(max − min)²`. For d > 1 the search visits points in
/// decreasing norm and stops once `(‖W_i‖ + ‖W_j‖)²` cannot beat the
/// current best, which is exact by the triangle inequality.
pub fn max_pair_sq(points: &[f64], d: usize) -> f64 {
    let m = points.len() / d;
    if m < 2 {
        return 0.0;
    }
    if d == 1 {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        return (hi - lo) * (hi - lo);
    }
    let norms: Vec<f64> = (0..m)
        .map(|i| points[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let slack = 1.0 + 1e-12;
    let mut best = 0.0f64;
    for (oi, &i) in order.iter().enumerate() {
        let Some(&next) = order.get(oi + 1) else { break };
        let bound = norms[i] + norms[next];
        if bound * bound * slack < best {
            break;
        }
        let pi = &points[i * d..(i + 1) * d];
        for &j in &order[oi + 1..] {
            let bound = norms[i] + norms[j];
            if bound * bound * slack < best {
                break;
            }
            let pj = &points[j * d..(j + 1) * d];
            let dist: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist > best {
                best = dist;
            }
        }
    }
    best
}

/// One draw of the supremum on a grid with `grid_size` steps.
pub fn sample_sup(d: usize, grid_size: usize, seed: SeedSpec) -> f64 {
    assert!(d >= 1 && grid_size >= 1, "need d >= 1 and a nonempty grid");
    let mut rng = seed.rng();
    let w = bridge_path(d, grid_size, &mut rng);
    max_pair_sq(&w, d)
}

fn stream_for(d: usize, rep: usize) -> u64 {
    ((d as u64) << 32) | rep as u64
}

/// `reps` independent sup draws for dimension `d`; replication `i` uses
/// stream `(d << 32) | i` of `seed`, so the output does not depend on scheduling.
pub fn sup_samples(d: usize, reps: usize, grid_size: usize, seed: u64) -> Vec<f64> {
    (0..reps)
        .into_par_iter()
        .map(|rep| sample_sup(d, grid_size, SeedSpec::new(seed, stream_for(d, rep))))
        .collect()
}

/// Order statistic at 1-based index `⌈(1−α)·m⌉` of the samples.
pub fn empirical_quantile(samples: &[f64], alpha: f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, alpha)
}

fn quantile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let m = sorted.len();
    let idx = (((1.0 - alpha) * m as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[idx.min(m) - 1]
}

/// Bootstrap standard error of [`empirical_quantile`].
pub fn bootstrap_se(samples: &[f64], alpha: f64, resamples: usize, seed: u64) -> f64 {
    let m = samples.len();
    let mut rng = SeedSpec::new(seed, u64::MAX).rng();
    let mut buf = vec![0.0; m];
    let qs: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = samples[rng.random_range(0..m)];
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            quantile_sorted(&buf, alpha)
        })
        .collect();
    let mean = qs.iter().sum::<f64>() / qs.len() as f64;
    (qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (qs.len() as f64 - 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub reps: usize,
    pub grid: usize,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileEntry {
    pub d: usize,
    pub alpha: f64,
    pub c: f64,
}

/// Critical values `c_{d,α}` with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub meta: TableMeta,
    pub entries: Vec<QuantileEntry>,
}

/// Parameters for an on-demand Monte-Carlo build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub reps: usize,
    pub grid: usize,
    pub seed: u64,
}

impl BuildParams {
    pub fn validate(&self, dims: &[usize], alphas: &[f64]) -> Result<()> {
        if self.reps < 100 {
            return Err(Error::InvalidConfig("at least 100 replications are required".into()));
        }
        if self.grid < 2 {
            return Err(Error::InvalidConfig("grid must have at least 2 steps".into()));
        }
        if dims.contains(&0) || alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidConfig("need d >= 1 and alpha in (0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            reps: 5000,
            grid: 1000,
            seed: 20_210_101,
        }
    }
}

const PUBLISHED: [(f64, [f64; 5]); 3] = [
    (0.01, [3.907, 7.320, 12.384, 16.004, 19.039]),
    (0.05, [2.973, 5.690, 8.948, 11.708, 14.471]),
    (0.10, [2.503, 4.988, 7.650, 9.954, 12.410]),
];

impl QuantileTable {
    /// The published critical values for d = 1..5 and α ∈ {0.01, 0.05, 0.10}
    /// (5000 replications, grid of 1000).
    pub fn published() -> Self {
        let mut entries = Vec::with_capacity(15);
        for d in 1..=5 {
            for (alpha, row) in PUBLISHED {
                entries.push(QuantileEntry { d, alpha, c: row[d - 1] });
            }
        }
        Self {
            meta: TableMeta {
                reps: 5000,
                grid: 1000,
                seed: None,
                source: Some("published".into()),
            },
            entries,
        }
    }

    pub fn get(&self, d: usize, alpha: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.d == d && (e.alpha - alpha).abs() < ALPHA_MATCH)
            .map(|e| e.c)
    }

    pub fn lookup(&self, d: usize, alpha: f64) -> Result<f64> {
        self.get(d, alpha).ok_or(Error::MissingQuantile { d, alpha })
    }

    /// Looks up `c_{d,α}`, simulating and inserting it when absent and
    /// `on_demand` is given.
    pub fn lookup_or_build(&mut self, d: usize, alpha: f64, on_demand: Option<BuildParams>) -> Result<f64> {
        if let Some(c) = self.get(d, alpha) {
            return Ok(c);
        }
        let params = on_demand.ok_or(Error::MissingQuantile { d, alpha })?;
        let built = build_table(&[d], &[alpha], params)?;
        let c = built.entries[0].c;
        self.insert(built.entries[0]);
        Ok(c)
    }

    pub fn insert(&mut self, entry: QuantileEntry) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.d == entry.d && (e.alpha - entry.alpha).abs() < ALPHA_MATCH)
        {
            Some(e) => e.c = entry.c,
            None => self.entries.push(entry),
        }
        self.entries
            .sort_by(|a, b| a.d.cmp(&b.d).then(a.alpha.total_cmp(&b.alpha)));
    }

    /// `c` decreasing in α for fixed d, increasing in d for fixed α.
    pub fn is_monotone(&self) -> bool {
        self.entries.iter().all(|a| {
            self.entries.iter().all(|b| {
                let same_d = a.d == b.d && a.alpha < b.alpha - ALPHA_MATCH;
                let same_alpha = (a.alpha - b.alpha).abs() < ALPHA_MATCH && a.d < b.d;
                (!same_d || a.c > b.c) && (!same_alpha || a.c < b.c)
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Monte-Carlo table for every `(d, α)` combination.
pub fn build_table(dims: &[usize], alphas: &[f64], params: BuildParams) -> Result<QuantileTable> {
    params.validate(dims, alphas)?;
    let mut table = QuantileTable {
        meta: TableMeta {
            reps: params.reps,
            grid: params.grid,
            seed: Some(params.seed),
            source: None,
        },
        entries: Vec::new(),
    };
    for &d in dims {
        let mut samples = sup_samples(d, params.reps, params.grid, params.seed);
        samples.sort_by(|a, b| a.total_cmp(b));
        for &alpha in alphas {
            table.insert(QuantileEntry {
                d,
                alpha,
                c: quantile_sorted(&samples, alpha),
            });
        }
    }
    Ok(table)
}
