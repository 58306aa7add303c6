//! Epidemic change-point scan.
//!
//! For every admissible break pair `(k₁, k₂)` the segment estimates on
//! `[1, k₁]`, `[k₁+1, k₂]` and `[k₂+1, n]` are combined into
//!
//! ```text
//! C = (k₂−k₁)/n^{3/2} · [(n−(k₂−k₁))·θ̂_mid − k₁·θ̂_left − (n−k₂)·θ̂_right]
//! Q = Cᵀ Σ̂(u_n) C
//! ```
//!
//! and the test rejects when `max Q` exceeds the bridge critical value.
//! Left estimates depend on `k₁` only and right estimates on `k₂` only, so
//! both are computed once per distinct index. Middle estimates are computed
//! row by row (`k₁` fixed, `k₂` increasing), each warm-started from its
//! predecessor in the row. Rows are independent, which keeps the result
//! identical under any parallel schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::QuantileTable;
use crate::error::{Error, Result};
use crate::model::{CountSeries, InitPolicy, ModelSpec, Segment, Theta};
use crate::qmle::{self, fit_min_len, FitOptions, ParamEstimate, PointFit};

/// Share of excluded (non-converged) pairs above which the scan fails.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// `⌊(log n)^{5/2}⌋`.
pub fn log_window(n: usize) -> usize {
    (n as f64).ln().powf(2.5).floor() as usize
}

/// `⌊(log n)²⌋`.
pub fn log_sq_window(n: usize) -> usize {
    (n as f64).ln().powi(2).floor() as usize
}

/// Exact scan up to n = 1000; coarser lattices (refined afterwards) beyond.
pub fn default_stride(n: usize) -> usize {
    if n <= 1000 {
        1
    } else {
        n.div_ceil(500)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Window length of the head and tail blocks in `Σ̂(u_n)`.
    pub u_n: usize,
    /// Minimum length of each of the three segments.
    pub v_n: usize,
    pub stride: usize,
    pub alpha: f64,
    /// Re-scan a `±stride` neighbourhood of the coarse argmax at full resolution.
    #[serde(default = "default_true")]
    pub refine: bool,
    /// Warm-start middle fits from their row predecessor.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub init: InitPolicy,
}

fn default_true() -> bool {
    true
}

impl ScanConfig {
    /// Simulation-study defaults: `u_n = v_n = ⌊(log n)^{5/2}⌋`.
    pub fn experiment(n: usize, alpha: f64) -> Self {
        Self {
            u_n: log_window(n),
            v_n: log_window(n),
            stride: default_stride(n),
            alpha,
            refine: true,
            warm_start: true,
            init: InitPolicy::EmpiricalMean,
        }
    }

    /// Applied-analysis defaults: `u_n = ⌊(log n)^{5/2}⌋`, `v_n = ⌊(log n)²⌋`.
    pub fn detect(n: usize, alpha: f64) -> Self {
        Self {
            v_n: log_sq_window(n),
            ..Self::experiment(n, alpha)
        }
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let min = fit_min_len(d);
        if self.u_n < min || self.v_n < min {
            return Err(Error::InvalidConfig(format!(
                "u_n = {} and v_n = {} must be at least {min}",
                self.u_n, self.v_n
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        if n <= 2 * self.u_n || n - 2 * self.u_n < min {
            return Err(Error::InvalidConfig(format!(
                "series of length {n} is too short for u_n = {}",
                self.u_n
            )));
        }
        Ok(())
    }
}

/// Admissible pairs `v ≤ k₁ < k₂ ≤ n − v`, `k₂ − k₁ ≥ v`, in lexicographic
/// order. With `stride > 1`, `k₁` runs over `v + i·s` and `k₂` over `k₁ + v + j·s`.
pub fn scan_set(n: usize, v_n: usize, stride: usize) -> Vec<(usize, usize)> {
    let v = v_n.max(1);
    let s = stride.max(1);
    let mut out = Vec::new();
    if n < 2 * v {
        return out;
    }
    let last = n - v;
    let mut k1 = v;
    while k1 + v <= last {
        let mut k2 = k1 + v;
        while k2 <= last {
            out.push((k1, k2));
            k2 += s;
        }
        k1 += s;
    }
    out
}

/// `Σ̂(u_n)` together with its three block sandwiches.
#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub matrix: DMatrix<f64>,
    pub blocks: [DMatrix<f64>; 3],
    pub pseudo_inverted: [bool; 3],
    pub estimates: [ParamEstimate; 3],
}

/// Average of `ĴÎ⁻¹Ĵ` over the head `[1, u]`, middle `[u+1, n−u]` and tail `[n−u+1, n]`.
pub fn sigma_un(spec: &ModelSpec, series: &CountSeries, u_n: usize, init: InitPolicy) -> Result<SigmaEstimate> {
    let n = series.len();
    if u_n == 0 || n <= 2 * u_n {
        return Err(Error::InvalidConfig(format!(
            "need n > 2·u_n, got n = {n}, u_n = {u_n}"
        )));
    }
    let segs = [
        Segment::new(1, u_n, n)?,
        Segment::new(u_n + 1, n - u_n, n)?,
        Segment::new(n - u_n + 1, n, n)?,
    ];
    let opts = FitOptions {
        init,
        ..Default::default()
    };
    let mut estimates = Vec::with_capacity(3);
    let mut blocks = Vec::with_capacity(3);
    let mut flags = [false; 3];
    for (k, seg) in segs.into_iter().enumerate() {
        let est = qmle::fit(spec, series, seg, &opts)?;
        let sw = qmle::sandwich_norm(&est.j_hat, &est.i_hat)?;
        flags[k] = sw.pseudo_inverted;
        blocks.push(sw.matrix);
        estimates.push(est);
    }
    let matrix = (&blocks[0] + &blocks[1] + &blocks[2]) / 3.0;
    let blocks: [DMatrix<f64>; 3] = blocks.try_into().expect("three blocks");
    let estimates: [ParamEstimate; 3] = estimates.try_into().expect("three estimates");
    Ok(SigmaEstimate {
        matrix,
        blocks,
        pseudo_inverted: flags,
        estimates,
    })
}

/// The contrast vector `C_{n,k₁,k₂}`.
pub fn c_vector(n: usize, k1: usize, k2: usize, left: &Theta, mid: &Theta, right: &Theta) -> Vec<f64> {
    let nf = n as f64;
    let width = (k2 - k1) as f64;
    let scale = width / nf.powf(1.5);
    (0..left.dim())
        .map(|i| {
            // (n − (k₂ − k₁))·mid − k₁·left − (n − k₂)·right, grouped so that
            // equal estimates cancel exactly.
            scale * (k1 as f64 * (mid.0[i] - left.0[i]) + (nf - k2 as f64) * (mid.0[i] - right.0[i]))
        })
        .collect()
}

fn quad_form(c: &[f64], m: &DMatrix<f64>) -> f64 {
    let v = DVector::from_column_slice(c);
    (v.transpose() * m * &v)[(0, 0)]
}

/// Reject iff `q_n > c_{d,α}`.
pub fn decide(q_n: f64, d: usize, alpha: f64, table: &QuantileTable) -> Result<bool> {
    Ok(q_n > table.lookup(d, alpha)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub k1: usize,
    pub k2: usize,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub q_n: f64,
    pub k_hat: (usize, usize),
    pub reject: bool,
    pub c_alpha: f64,
    /// Evaluated pairs in lexicographic order.
    pub surface: Vec<SurfacePoint>,
    /// Left, middle and right estimates at `k_hat`.
    pub theta_hats: [ParamEstimate; 3],
    pub sigma: SigmaEstimate,
    /// Pairs dropped because one of their fits did not converge.
    pub excluded: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

struct PairOutcome {
    k1: usize,
    k2: usize,
    q: Option<f64>,
    mid: PointFit,
}

fn fit_opts(config: &ScanConfig, warm: Option<&PointFit>) -> FitOptions {
    FitOptions {
        init: config.init,
        warm_start: if config.warm_start { warm.map(|w| w.theta.clone()) } else { None },
        ..Default::default()
    }
}

/// Fits `segment_of(k)` for every `k` in `keys`, visiting them in the given
/// order and warm-starting each from the previous one.
fn chain_fits(
    spec: &ModelSpec,
    series: &CountSeries,
    config: &ScanConfig,
    keys: impl Iterator<Item = usize>,
    segment_of: impl Fn(usize) -> Segment,
) -> Result<BTreeMap<usize, PointFit>> {
    let mut out = BTreeMap::new();
    let mut prev: Option<PointFit> = None;
    for k in keys {
        let fit = qmle::fit_point(spec, series, segment_of(k), &fit_opts(config, prev.as_ref()))?;
        prev = Some(fit.clone());
        out.insert(k, fit);
    }
    Ok(out)
}

fn evaluate_pairs(
    spec: &ModelSpec,
    series: &CountSeries,
    config: &ScanConfig,
    sigma: &DMatrix<f64>,
    pairs: &[(usize, usize)],
) -> Result<(Vec<PairOutcome>, BTreeMap<usize, PointFit>, BTreeMap<usize, PointFit>)> {
    let n = series.len();
    let k1s: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let k2s: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    let left = chain_fits(spec, series, config, k1s.iter().copied(), |k| Segment { lo: 1, hi: k })?;
    let right = chain_fits(spec, series, config, k2s.iter().rev().copied(), |k| Segment { lo: k + 1, hi: n })?;

    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(k1, k2) in pairs {
        rows.entry(k1).or_default().push(k2);
    }
    let rows: Vec<(usize, Vec<usize>)> = rows.into_iter().collect();
    let per_row: Vec<Result<Vec<PairOutcome>>> = rows
        .par_iter()
        .map(|(k1, k2s)| {
            let k1 = *k1;
            let mut out = Vec::with_capacity(k2s.len());
            let mut prev: Option<PointFit> = None;
            for &k2 in k2s {
                let seg = Segment { lo: k1 + 1, hi: k2 };
                let mid = qmle::fit_point(spec, series, seg, &fit_opts(config, prev.as_ref()))?;
                let (l, r) = (&left[&k1], &right[&k2]);
                let q = if mid.converged && l.converged && r.converged {
                    let c = c_vector(n, k1, k2, &l.theta, &mid.theta, &r.theta);
                    Some(quad_form(&c, sigma))
                } else {
                    None
                };
                prev = Some(mid.clone());
                out.push(PairOutcome { k1, k2, q, mid });
            }
            Ok(out)
        })
        .collect();
    let mut outcomes = Vec::with_capacity(pairs.len());
    for row in per_row {
        outcomes.extend(row?);
    }
    Ok((outcomes, left, right))
}

fn argmax(surface: &[SurfacePoint]) -> Option<SurfacePoint> {
    let mut best: Option<SurfacePoint> = None;
    for p in surface {
        if best.is_none_or(|b| p.q > b.q) {
            best = Some(*p);
        }
    }
    best
}

/// Runs the full scan and tests at `config.alpha` against `table`.
pub fn scan(spec: &ModelSpec, series: &CountSeries, config: &ScanConfig, table: &QuantileTable) -> Result<ScanResult> {
    let n = series.len();
    let d = spec.dim();
    spec.validate()?;
    let pairs = scan_set(n, config.v_n, config.stride);
    if pairs.is_empty() {
        return Err(Error::EmptyScanSet { n, v_n: config.v_n });
    }
    config.validate(n, d)?;
    let c_alpha = table.lookup(d, config.alpha)?;
    let sigma = sigma_un(spec, series, config.u_n, config.init)?;
    let mut warnings = Vec::new();
    for (k, flag) in sigma.pseudo_inverted.iter().enumerate() {
        if *flag {
            warnings.push(format!("Σ̂(u_n) block {} used a pseudo-inverse of Î", k + 1));
        }
    }

    let (mut outcomes, mut left, mut right) = evaluate_pairs(spec, series, config, &sigma.matrix, &pairs)?;
    let mut total = pairs.len();

    if config.stride > 1 && config.refine {
        let coarse: Vec<SurfacePoint> = outcomes
            .iter()
            .filter_map(|o| o.q.map(|q| SurfacePoint { k1: o.k1, k2: o.k2, q }))
            .collect();
        if let Some(best) = argmax(&coarse) {
            let s = config.stride;
            let done: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
            let extra: Vec<(usize, usize)> = scan_set(n, config.v_n, 1)
                .into_iter()
                .filter(|&(a, b)| a.abs_diff(best.k1) <= s && b.abs_diff(best.k2) <= s && !done.contains(&(a, b)))
                .collect();
            if !extra.is_empty() {
                let (more, l2, r2) = evaluate_pairs(spec, series, config, &sigma.matrix, &extra)?;
                total += extra.len();
                outcomes.extend(more);
                left.extend(l2);
                right.extend(r2);
            }
        }
        warnings.push(format!(
            "coarse scan with stride {} refined around its argmax; the maximum is approximate",
            config.stride
        ));
    }

    let mut surface = Vec::with_capacity(outcomes.len());
    let mut excluded = Vec::new();
    let mut middles = BTreeMap::new();
    for o in outcomes {
        match o.q {
            Some(q) => {
                surface.push(SurfacePoint { k1: o.k1, k2: o.k2, q });
                middles.insert((o.k1, o.k2), o.mid);
            }
            None => excluded.push((o.k1, o.k2)),
        }
    }
    surface.sort_by(|a, b| (a.k1, a.k2).cmp(&(b.k1, b.k2)));
    excluded.sort();
    if excluded.len() as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::TooManyNonConverged {
            failed: excluded.len(),
            total,
        });
    }
    if !excluded.is_empty() {
        warnings.push(format!("{} pairs excluded after non-converged fits", excluded.len()));
    }
    let best = argmax(&surface).ok_or(Error::TooManyNonConverged { failed: total, total })?;
    let k_hat = (best.k1, best.k2);

    let regime_fit = |seg: Segment, warm: &PointFit| {
        qmle::fit(
            spec,
            series,
            seg,
            &FitOptions {
                init: config.init,
                warm_start: Some(warm.theta.clone()),
                ..Default::default()
            },
        )
    };
    let theta_hats = [
        regime_fit(Segment { lo: 1, hi: k_hat.0 }, &left[&k_hat.0])?,
        regime_fit(Segment { lo: k_hat.0 + 1, hi: k_hat.1 }, &middles[&k_hat])?,
        regime_fit(Segment { lo: k_hat.1 + 1, hi: n }, &right[&k_hat.1])?,
    ];

    Ok(ScanResult {
        q_n: best.q,
        k_hat,
        reject: best.q > c_alpha,
        c_alpha,
        surface,
        theta_hats,
        sigma,
        excluded,
        warnings,
    })
}

/// Writes the surface as CSV with header `k1,k2,Q`.
pub fn write_surface_csv<W: Write>(out: W, surface: &[SurfacePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k1", "k2", "Q"])?;
    for p in surface {
        w.write_record([p.k1.to_string(), p.k2.to_string(), p.q.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
