//! Model families, parameter spaces and the conditional-mean recursion.
//!
//! The linear INGARCH(1,1) mean is
//!
//! ```text
//! λ_t = ω + α·Y_{t-1} + β·λ_{t-1}
//! ```
//!
//! and INARCH(1) is the `β = 0` member with no feedback state. A
//! `ConstantMean` family (`λ_t = ω`, d = 1) is provided for the pure
//! mean-change case and for closed-form checks.
//!
//! All segment arithmetic is 1-based: a [`Segment`] `[lo, hi]` covers the
//! observations `Y_lo, ..., Y_hi`. The recursion restarts at every segment's
//! `lo`, with the starting value chosen by [`InitPolicy`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute floor for the intercept `ω`; every conditional mean stays above it.
pub const OMEGA_FLOOR: f64 = 1e-8;
/// Stationarity margin: accepted parameters satisfy `α + β ≤ 1 − STAT_MARGIN`.
pub const STAT_MARGIN: f64 = 0.01;
/// Default upper bound on `ω`, large enough to be inactive for count data.
pub const OMEGA_CEILING: f64 = 1e6;

const BOUND_TOL: f64 = 1e-10;

/// Ordered nonnegative integer observations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSeries {
    values: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_label: Option<String>,
}

impl CountSeries {
    pub fn new(values: Vec<u64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            values,
            origin_label: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.origin_label = Some(label.into());
        self
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn origin_label(&self) -> Option<&str> {
        self.origin_label.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observation at 1-based time `t`.
    #[inline]
    pub fn y(&self, t: usize) -> f64 {
        self.values[t - 1] as f64
    }

    pub fn full(&self) -> Segment {
        Segment {
            lo: 1,
            hi: self.len(),
        }
    }

    pub fn mean(&self, seg: Segment) -> f64 {
        let sum: u64 = self.values[seg.lo - 1..seg.hi].iter().sum();
        sum as f64 / seg.len() as f64
    }
}

/// Index window `T_{lo,hi} = {lo, ..., hi}`, 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub lo: usize,
    pub hi: usize,
}

impl Segment {
    pub fn new(lo: usize, hi: usize, series_len: usize) -> Result<Self> {
        let seg = Self { lo, hi };
        seg.check(series_len)?;
        Ok(seg)
    }

    pub fn check(&self, series_len: usize) -> Result<()> {
        if self.lo < 1 || self.lo > self.hi || self.hi > series_len {
            return Err(Error::InvalidSegment {
                lo: self.lo,
                hi: self.hi,
                len: series_len,
            });
        }
        Ok(())
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `λ_t = ω`.
    Constant,
    /// `λ_t = ω + α·Y_{t-1}`.
    Inarch1,
    /// `λ_t = ω + α·Y_{t-1} + β·λ_{t-1}`.
    Ingarch11,
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Constant => 1,
            Family::Inarch1 => 2,
            Family::Ingarch11 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Constant => "constant",
            Family::Inarch1 => "inarch1",
            Family::Ingarch11 => "ingarch11",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Family::Constant),
            "inarch1" | "inarch" => Ok(Family::Inarch1),
            "ingarch11" | "ingarch" => Ok(Family::Ingarch11),
            other => Err(Error::InvalidConfig(format!("unknown model family '{other}'"))),
        }
    }
}

/// Conditional distribution used when simulating. Estimation always uses
/// the Poisson quasi-likelihood regardless of this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Noise {
    Poisson,
    /// Negative binomial with known dispersion `r`; `p_t = r / (r + λ_t)`.
    #[serde(rename = "nb")]
    NegBinomial { r: u32 },
}

/// Per-coordinate box plus the stationarity margin on the persistence coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub stat_margin: f64,
}

impl Bounds {
    pub fn default_for(family: Family) -> Self {
        let cap = 1.0 - STAT_MARGIN;
        let (lower, upper) = match family {
            Family::Constant => (vec![OMEGA_FLOOR], vec![OMEGA_CEILING]),
            Family::Inarch1 => (vec![OMEGA_FLOOR, 0.0], vec![OMEGA_CEILING, cap]),
            Family::Ingarch11 => (
                vec![OMEGA_FLOOR, 0.0, 0.0],
                vec![OMEGA_CEILING, cap, cap],
            ),
        };
        Self {
            lower,
            upper,
            stat_margin: STAT_MARGIN,
        }
    }
}

/// A linear inequality `a·θ ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub a: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub noise: Noise,
    pub bounds: Bounds,
}

impl ModelSpec {
    pub fn new(family: Family, noise: Noise) -> Self {
        Self {
            family,
            noise,
            bounds: Bounds::default_for(family),
        }
    }

    pub fn poisson(family: Family) -> Self {
        Self::new(family, Noise::Poisson)
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// Lower bound on `ω`, which is also the floor on every conditional mean.
    pub fn mean_floor(&self) -> f64 {
        self.bounds.lower[0]
    }

    /// Checks the bounds against the family and the positivity floor.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let b = &self.bounds;
        if b.lower.len() != d || b.upper.len() != d {
            return Err(Error::InvalidConfig(format!(
                "bounds must have {d} coordinates"
            )));
        }
        if !(b.lower[0] > 0.0) {
            return Err(Error::InvalidConfig(
                "lower bound on omega must be strictly positive".into(),
            ));
        }
        if !(b.stat_margin > 0.0 && b.stat_margin < 1.0) {
            return Err(Error::InvalidConfig("stat_margin must lie in (0, 1)".into()));
        }
        for k in 0..d {
            if !(b.lower[k] <= b.upper[k]) || !b.lower[k].is_finite() || !b.upper[k].is_finite() {
                return Err(Error::InvalidConfig(format!("empty bound interval for coordinate {k}")));
            }
            if k > 0 && b.lower[k] < 0.0 {
                return Err(Error::InvalidConfig("alpha and beta must be nonnegative".into()));
            }
        }
        let persistence: f64 = b.lower[1..].iter().sum();
        if persistence > 1.0 - b.stat_margin {
            return Err(Error::InvalidConfig("bounds exclude every stationary parameter".into()));
        }
        if let Noise::NegBinomial { r } = self.noise {
            if r == 0 {
                return Err(Error::InvalidConfig("negative binomial r must be positive".into()));
            }
        }
        Ok(())
    }

    /// Effective box: the upper bounds on the persistence coordinates are
    /// capped at `1 − δ` so that the box alone enforces stationarity for d ≤ 2.
    fn effective_box(&self) -> (Vec<f64>, Vec<f64>) {
        let cap = 1.0 - self.bounds.stat_margin;
        let upper = self
            .bounds
            .upper
            .iter()
            .enumerate()
            .map(|(k, &u)| if k > 0 { u.min(cap) } else { u })
            .collect();
        (self.bounds.lower.clone(), upper)
    }

    /// All constraints of the parameter space in `a·θ ≤ b` form.
    pub fn constraints(&self) -> Vec<LinearConstraint> {
        let d = self.dim();
        let (lower, upper) = self.effective_box();
        let mut out = Vec::with_capacity(2 * d + 1);
        for k in 0..d {
            let mut a = vec![0.0; d];
            a[k] = -1.0;
            out.push(LinearConstraint { a, b: -lower[k] });
            let mut a = vec![0.0; d];
            a[k] = 1.0;
            out.push(LinearConstraint { a, b: upper[k] });
        }
        if d == 3 {
            out.push(LinearConstraint {
                a: vec![0.0, 1.0, 1.0],
                b: 1.0 - self.bounds.stat_margin,
            });
        }
        out
    }

    pub fn contains(&self, theta: &Theta) -> bool {
        theta.dim() == self.dim()
            && theta.0.iter().all(|v| v.is_finite())
            && self.constraints().iter().all(|c| {
                let lhs: f64 = c.a.iter().zip(&theta.0).map(|(a, x)| a * x).sum();
                lhs <= c.b + BOUND_TOL * (1.0 + c.b.abs())
            })
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.dim(),
            });
        }
        if !self.contains(theta) {
            return Err(Error::ThetaOutOfBounds {
                theta: theta.0.clone(),
            });
        }
        Ok(())
    }

    /// Euclidean projection onto the parameter space.
    ///
    /// The box is handled by clipping; the `α + β ≤ 1 − δ` face by a
    /// bisection on its multiplier, which is exact up to the bisection
    /// tolerance because the clipped sum is monotone in the multiplier.
    pub fn project(&self, theta: &Theta) -> Theta {
        let (lower, upper) = self.effective_box();
        let clip = |x: &[f64], shift: f64| -> Vec<f64> {
            x.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let v = if k > 0 { v - shift } else { v };
                    let v = if v.is_nan() { lower[k] } else { v };
                    v.clamp(lower[k], upper[k])
                })
                .collect()
        };
        let x = clip(&theta.0, 0.0);
        if self.dim() < 3 {
            return Theta(x);
        }
        let cap = 1.0 - self.bounds.stat_margin;
        if x[1] + x[2] <= cap {
            return Theta(x);
        }
        let (mut lo, mut hi) = (0.0, x[1].max(x[2]) + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let y = clip(&theta.0, mid);
            if y[1] + y[2] > cap {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Theta(clip(&theta.0, hi))
    }
}

/// Parameter vector `(ω, α, β)` (or a prefix of it for smaller families).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        Self(coords.into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn omega(&self) -> f64 {
        self.0[0]
    }

    pub fn alpha(&self) -> f64 {
        self.0.get(1).copied().unwrap_or(0.0)
    }

    pub fn beta(&self) -> f64 {
        self.0.get(2).copied().unwrap_or(0.0)
    }

    pub fn distance(&self, other: &Theta) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl std::str::FromStr for Theta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad parameter '{p}': {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Theta)
    }
}

/// Starting value of the recursion at a segment's first index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `λ̂_lo` = sample mean of the segment, with zero gradient.
    #[default]
    EmpiricalMean,
    /// `λ̂_lo = ω / (1 − β)`, differentiated through.
    UnconditionalMean,
}

/// One step of the recursion: time, observation, mean and its derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub t: usize,
    pub y: f64,
    pub lambda: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

/// Runs the conditional-mean recursion over `seg`, calling `visit` at every
/// step. Inputs are assumed validated. Second derivatives are only nonzero
/// for INGARCH(1,1) (through `β`) and for the unconditional-mean start.
pub(crate) fn walk<F: FnMut(&Step)>(
    family: Family,
    floor: f64,
    theta: &[f64],
    series: &CountSeries,
    seg: Segment,
    init: InitPolicy,
    mut visit: F,
) -> Result<()> {
    let omega = theta[0];
    let mut step = Step {
        t: seg.lo,
        y: series.y(seg.lo),
        lambda: 0.0,
        grad: [0.0; 3],
        hess: [[0.0; 3]; 3],
    };
    match family {
        Family::Constant => {
            step.grad[0] = 1.0;
            for t in seg.lo..=seg.hi {
                step.t = t;
                step.y = series.y(t);
                step.lambda = omega;
                visit(&step);
            }
            return Ok(());
        }
        Family::Inarch1 | Family::Ingarch11 => {}
    }
    let alpha = theta[1];
    let beta = if family == Family::Ingarch11 { theta[2] } else { 0.0 };

    match init {
        InitPolicy::EmpiricalMean => {
            step.lambda = series.mean(seg).max(floor);
        }
        InitPolicy::UnconditionalMean => {
            let q = 1.0 - beta;
            step.lambda = omega / q;
            step.grad[0] = 1.0 / q;
            if family == Family::Ingarch11 {
                step.grad[2] = omega / (q * q);
                step.hess[0][2] = 1.0 / (q * q);
                step.hess[2][0] = step.hess[0][2];
                step.hess[2][2] = 2.0 * omega / (q * q * q);
            }
        }
    }
    if !step.lambda.is_finite() {
        return Err(Error::NonFinite { t: seg.lo });
    }
    visit(&step);

    for t in seg.lo + 1..=seg.hi {
        let y_prev = step.y;
        let lam_prev = step.lambda;
        let g_prev = step.grad;
        step.t = t;
        step.y = series.y(t);
        step.lambda = omega + alpha * y_prev + beta * lam_prev;
        if family == Family::Ingarch11 {
            step.grad = [
                1.0 + beta * g_prev[0],
                y_prev + beta * g_prev[1],
                lam_prev + beta * g_prev[2],
            ];
            for i in 0..3 {
                for j in 0..3 {
                    let mut h = beta * step.hess[i][j];
                    if i == 2 {
                        h += g_prev[j];
                    }
                    if j == 2 {
                        h += g_prev[i];
                    }
                    step.hess[i][j] = h;
                }
            }
        } else {
            step.grad = [1.0, y_prev, 0.0];
        }
        if !step.lambda.is_finite() {
            return Err(Error::NonFinite { t });
        }
        visit(&step);
    }
    Ok(())
}

fn check_inputs(spec: &ModelSpec, theta: &Theta, series: &CountSeries, seg: Segment) -> Result<()> {
    seg.check(series.len())?;
    spec.check_theta(theta)
}

/// Conditional means `λ̂_t(θ)` for `t ∈ seg`.
pub fn cond_mean_path(
    spec: &ModelSpec,
    theta: &Theta,
    series: &CountSeries,
    seg: Segment,
    init: InitPolicy,
) -> Result<Vec<f64>> {
    check_inputs(spec, theta, series, seg)?;
    let mut out = Vec::with_capacity(seg.len());
    walk(spec.family, spec.mean_floor(), &theta.0, series, seg, init, |s| {
        out.push(s.lambda)
    })?;
    Ok(out)
}

/// Gradients `∂λ̂_t/∂θ` for `t ∈ seg`, each of length `d`.
pub fn cond_mean_grad_path(
    spec: &ModelSpec,
    theta: &Theta,
    series: &CountSeries,
    seg: Segment,
    init: InitPolicy,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(spec, theta, series, seg)?;
    let d = spec.dim();
    let mut out = Vec::with_capacity(seg.len());
    walk(spec.family, spec.mean_floor(), &theta.0, series, seg, init, |s| {
        out.push(s.grad[..d].to_vec())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(v: &[u64]) -> CountSeries {
        CountSeries::new(v.to_vec()).unwrap()
    }

    #[test]
    fn inarch_with_zero_alpha_is_constant() {
        let spec = ModelSpec::poisson(Family::Inarch1);
        let y = series(&[4, 0, 9, 2, 7]);
        let path = cond_mean_path(
            &spec,
            &Theta::new([1.0, 0.0]),
            &y,
            y.full(),
            InitPolicy::UnconditionalMean,
        )
        .unwrap();
        assert_eq!(path, vec![1.0; 5]);
    }

    #[test]
    fn ingarch_hand_recursion() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let y = series(&[3, 1, 2]);
        let theta = Theta::new([0.5, 0.2, 0.35]);
        let path = cond_mean_path(&spec, &theta, &y, y.full(), InitPolicy::EmpiricalMean).unwrap();
        let expected = [2.0, 1.80, 1.33];
        for (a, b) in path.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{path:?}");
        }
        let grads =
            cond_mean_grad_path(&spec, &theta, &y, y.full(), InitPolicy::EmpiricalMean).unwrap();
        assert_eq!(grads[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(grads[1], vec![1.0, 3.0, 2.0]);
        let expected = [1.35, 2.05, 2.50];
        for (a, b) in grads[2].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{grads:?}");
        }
    }

    #[test]
    fn inarch_gradient_is_one_and_lagged_count() {
        let spec = ModelSpec::poisson(Family::Inarch1);
        let y = series(&[1, 4, 6]);
        let grads = cond_mean_grad_path(
            &spec,
            &Theta::new([2.0, 0.3]),
            &y,
            y.full(),
            InitPolicy::EmpiricalMean,
        )
        .unwrap();
        assert_eq!(grads[2], vec![1.0, 4.0]);
    }

    #[test]
    fn segment_local_restart() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let y = series(&[10, 3, 1, 2]);
        let theta = Theta::new([0.5, 0.2, 0.35]);
        let seg = Segment::new(2, 4, 4).unwrap();
        let path = cond_mean_path(&spec, &theta, &y, seg, InitPolicy::EmpiricalMean).unwrap();
        assert!((path[0] - 2.0).abs() < 1e-12);
        assert!((path[2] - 1.33).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let y = series(&[1, 2, 3]);
        let ok = Theta::new([0.5, 0.2, 0.35]);
        assert!(matches!(
            cond_mean_path(&spec, &ok, &y, Segment { lo: 2, hi: 4 }, InitPolicy::default()),
            Err(Error::InvalidSegment { .. })
        ));
        assert!(matches!(
            cond_mean_path(&spec, &ok, &y, Segment { lo: 0, hi: 2 }, InitPolicy::default()),
            Err(Error::InvalidSegment { .. })
        ));
        let nonstationary = Theta::new([0.5, 0.6, 0.5]);
        assert!(matches!(
            cond_mean_path(&spec, &nonstationary, &y, y.full(), InitPolicy::default()),
            Err(Error::ThetaOutOfBounds { .. })
        ));
        let negative = Theta::new([-0.5, 0.2, 0.1]);
        assert!(cond_mean_path(&spec, &negative, &y, y.full(), InitPolicy::default()).is_err());
        assert!(matches!(
            cond_mean_path(&spec, &Theta::new([1.0]), &y, y.full(), InitPolicy::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(CountSeries::new(vec![]).is_err());
    }

    #[test]
    fn projection_lands_inside() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let p = spec.project(&Theta::new([-3.0, 0.8, 0.7]));
        assert!(spec.contains(&p));
        assert!((p.alpha() + p.beta() - 0.99).abs() < 1e-12);
        assert!((p.alpha() - p.beta() - 0.1).abs() < 1e-9);
        assert_eq!(p.omega(), OMEGA_FLOOR);
        let inside = Theta::new([1.0, 0.2, 0.3]);
        assert_eq!(spec.project(&inside), inside);
    }

    fn random_case(rng: &mut ChaCha8Rng, family: Family) -> (Theta, CountSeries) {
        let theta = match family {
            Family::Constant => Theta::new([rng.random_range(0.1..20.0)]),
            Family::Inarch1 => Theta::new([rng.random_range(0.1..20.0), rng.random_range(0.0..0.9)]),
            Family::Ingarch11 => {
                let a: f64 = rng.random_range(0.0..0.5);
                let b: f64 = rng.random_range(0.0..(0.98 - a));
                Theta::new([rng.random_range(0.1..10.0), a, b])
            }
        };
        let n = rng.random_range(2..60);
        let values = (0..n).map(|_| rng.random_range(0..40)).collect();
        (theta, CountSeries::new(values).unwrap())
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..150 {
            let family = if draw % 2 == 0 { Family::Ingarch11 } else { Family::Inarch1 };
            let init = if draw % 3 == 0 {
                InitPolicy::UnconditionalMean
            } else {
                InitPolicy::EmpiricalMean
            };
            let spec = ModelSpec::poisson(family);
            let (theta, y) = random_case(&mut rng, family);
            let grads = cond_mean_grad_path(&spec, &theta, &y, y.full(), init).unwrap();
            for k in 0..spec.dim() {
                let h = 1e-5 * (1.0 + theta.0[k].abs());
                let mut up = theta.clone();
                up.0[k] += h;
                let mut dn = theta.clone();
                dn.0[k] -= h;
                // FD probes may step just outside the box; evaluate unchecked.
                let path = |th: &Theta| {
                    let mut v = Vec::new();
                    walk(family, OMEGA_FLOOR, &th.0, &y, y.full(), init, |s| v.push(s.lambda))
                        .unwrap();
                    v
                };
                let (pu, pd) = (path(&up), path(&dn));
                for t in 0..y.len() {
                    let fd = (pu[t] - pd[t]) / (2.0 * h);
                    let an = grads[t][k];
                    let err = (fd - an).abs() / (1.0 + an.abs());
                    assert!(err < 1e-6, "draw {draw} t {t} k {k}: fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn second_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for draw in 0..40 {
            let init = if draw % 2 == 0 {
                InitPolicy::UnconditionalMean
            } else {
                InitPolicy::EmpiricalMean
            };
            let (theta, y) = random_case(&mut rng, Family::Ingarch11);
            let mut hess = Vec::new();
            walk(Family::Ingarch11, OMEGA_FLOOR, &theta.0, &y, y.full(), init, |s| {
                hess.push(s.hess)
            })
            .unwrap();
            for k in 0..3 {
                let h = 1e-5;
                let grads_at = |delta: f64| {
                    let mut th = theta.0.clone();
                    th[k] += delta;
                    let mut g = Vec::new();
                    walk(Family::Ingarch11, OMEGA_FLOOR, &th, &y, y.full(), init, |s| g.push(s.grad))
                        .unwrap();
                    g
                };
                let (gu, gd) = (grads_at(h), grads_at(-h));
                for t in 0..y.len() {
                    for i in 0..3 {
                        let fd = (gu[t][i] - gd[t][i]) / (2.0 * h);
                        let an = hess[t][i][k];
                        assert!((fd - an).abs() / (1.0 + an.abs()) < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn unconditional_and_empirical_starts_forget_geometrically() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let theta = Theta::new([0.5, 0.2, 0.6]);
        let values: Vec<u64> = (0..80).map(|i| (i * 7 % 11) as u64).collect();
        let y = CountSeries::new(values).unwrap();
        let a = cond_mean_path(&spec, &theta, &y, y.full(), InitPolicy::EmpiricalMean).unwrap();
        let b = cond_mean_path(&spec, &theta, &y, y.full(), InitPolicy::UnconditionalMean).unwrap();
        let c = (a[0] - b[0]).abs();
        for t in 0..y.len() {
            let bound = c * 0.6f64.powi(t as i32) + 1e-12;
            assert!((a[t] - b[t]).abs() <= bound);
        }
        assert!((a[79] - b[79]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ingarch_with_zero_beta_equals_inarch(
            omega in 0.01f64..30.0,
            alpha in 0.0f64..0.95,
            values in proptest::collection::vec(0u64..50, 1..40),
        ) {
            let y = CountSeries::new(values).unwrap();
            let a = cond_mean_path(
                &ModelSpec::poisson(Family::Inarch1),
                &Theta::new([omega, alpha]),
                &y, y.full(), InitPolicy::EmpiricalMean,
            ).unwrap();
            let b = cond_mean_path(
                &ModelSpec::poisson(Family::Ingarch11),
                &Theta::new([omega, alpha, 0.0]),
                &y, y.full(), InitPolicy::EmpiricalMean,
            ).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn means_stay_above_floor(
            omega in OMEGA_FLOOR..5.0,
            alpha in 0.0f64..0.5,
            beta in 0.0f64..0.49,
            values in proptest::collection::vec(0u64..5, 1..40),
            empirical in any::<bool>(),
        ) {
            let spec = ModelSpec::poisson(Family::Ingarch11);
            let y = CountSeries::new(values).unwrap();
            let init = if empirical { InitPolicy::EmpiricalMean } else { InitPolicy::UnconditionalMean };
            let path = cond_mean_path(&spec, &Theta::new([omega, alpha, beta]), &y, y.full(), init).unwrap();
            prop_assert!(path.iter().all(|&l| l >= OMEGA_FLOOR));
        }

        #[test]
        fn projection_is_feasible_and_idempotent(
            w in -5.0f64..5.0, a in -1.0f64..2.0, b in -1.0f64..2.0,
        ) {
            let spec = ModelSpec::poisson(Family::Ingarch11);
            let p = spec.project(&Theta::new([w, a, b]));
            prop_assert!(spec.contains(&p));
            prop_assert!(p.alpha() + p.beta() <= 1.0 - STAT_MARGIN + 1e-12);
            let q = spec.project(&p);
            prop_assert!(p.distance(&q) < 1e-12);
        }
    }
}
