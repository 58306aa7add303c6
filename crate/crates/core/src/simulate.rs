//! Poisson- and NB-INGARCH trajectories under the null and the epidemic alternative.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CountSeries, ModelSpec, Noise, Theta};

pub const DEFAULT_BURNIN: usize = 500;

/// Seed plus stream id. Distinct streams of one seed are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub seed: u64,
    pub stream: u64,
}

impl SeedSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Baseline `theta0`, epidemic regime `theta1` between the break fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicDesign {
    pub theta0: Theta,
    pub theta1: Theta,
    pub tau1: f64,
    pub tau2: f64,
}

impl EpidemicDesign {
    /// Break times `(⌊n·τ₁⌋, ⌊n·τ₂⌋)`.
    pub fn breaks(&self, n: usize) -> Result<(usize, usize)> {
        if !(0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "break fractions must satisfy 0 < tau1 < tau2 < 1, got ({}, {})",
                self.tau1, self.tau2
            )));
        }
        // The small offset keeps products like 1000·0.3 from flooring to 299.
        let t1 = (n as f64 * self.tau1 + 1e-9).floor() as usize;
        let t2 = (n as f64 * self.tau2 + 1e-9).floor() as usize;
        if t1 < 1 || t2 <= t1 || t2 >= n {
            return Err(Error::InvalidConfig(format!(
                "breaks ({t1}, {t2}) are not strictly inside 1..{n}"
            )));
        }
        Ok((t1, t2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicSeries {
    pub series: CountSeries,
    pub breaks: (usize, usize),
}

fn check_stationary(spec: &ModelSpec, theta: &Theta) -> Result<()> {
    spec.check_theta(theta)?;
    if theta.alpha() + theta.beta() >= 1.0 {
        return Err(Error::ThetaOutOfBounds { theta: theta.0.clone() });
    }
    Ok(())
}

fn draw<R: Rng>(noise: Noise, lambda: f64, rng: &mut R) -> Result<u64> {
    let mean = match noise {
        Noise::Poisson => lambda,
        Noise::NegBinomial { r } => {
            // NB(r, p) with mean λ as a Gamma(r, λ/r)-mixed Poisson.
            let r = r as f64;
            let gamma = Gamma::new(r, lambda / r)
                .map_err(|_| Error::NonFinite { t: 0 })?;
            gamma.sample(rng)
        }
    };
    if !(mean > 0.0) {
        return Ok(0);
    }
    let pois = Poisson::new(mean).map_err(|_| Error::NonFinite { t: 0 })?;
    Ok(pois.sample(rng) as u64)
}

/// Generates `n` observations after `burnin` discarded draws; `theta_at(t)`
/// gives the parameter in force at 1-based observed time `t` (burn-in uses
/// `theta_at(1)`). The mean recursion carries across parameter switches.
fn generate<'a>(
    spec: &ModelSpec,
    theta_at: impl Fn(usize) -> &'a Theta,
    n: usize,
    burnin: usize,
    seed: SeedSpec,
) -> Result<CountSeries> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be positive".into()));
    }
    let mut rng = seed.rng();
    let first = theta_at(1);
    let mut lambda = first.omega() / (1.0 - first.alpha() - first.beta());
    let mut y_prev: Option<f64> = None;
    let mut out = Vec::with_capacity(n);
    for step in 0..burnin + n {
        let th = if step < burnin { first } else { theta_at(step - burnin + 1) };
        if let Some(y) = y_prev {
            lambda = th.omega() + th.alpha() * y + th.beta() * lambda;
        }
        if !lambda.is_finite() {
            return Err(Error::NonFinite { t: step + 1 });
        }
        let y = draw(spec.noise, lambda, &mut rng)?;
        y_prev = Some(y as f64);
        if step >= burnin {
            out.push(y);
        }
    }
    CountSeries::new(out)
}

pub fn simulate_null(
    spec: &ModelSpec,
    theta: &Theta,
    n: usize,
    burnin: usize,
    seed: SeedSpec,
) -> Result<CountSeries> {
    check_stationary(spec, theta)?;
    generate(spec, |_| theta, n, burnin, seed)
}

pub fn simulate_epidemic(
    spec: &ModelSpec,
    design: &EpidemicDesign,
    n: usize,
    burnin: usize,
    seed: SeedSpec,
) -> Result<EpidemicSeries> {
    check_stationary(spec, &design.theta0)?;
    check_stationary(spec, &design.theta1)?;
    let (t1, t2) = design.breaks(n)?;
    let series = generate(
        spec,
        |t| {
            if t > t1 && t <= t2 {
                &design.theta1
            } else {
                &design.theta0
            }
        },
        n,
        burnin,
        seed,
    )?;
    Ok(EpidemicSeries {
        series,
        breaks: (t1, t2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;

    fn moments(y: &CountSeries) -> (f64, f64) {
        let v: Vec<f64> = y.values().iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, s2)
    }

    #[test]
    fn iid_poisson_mean() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let y = simulate_null(&spec, &Theta::new([5.0, 0.0, 0.0]), 10000, 0, SeedSpec::new(1, 0)).unwrap();
        let (m, _) = moments(&y);
        assert!((m - 5.0).abs() < 0.2, "{m}");
    }

    #[test]
    fn iid_nb_moments() {
        let spec = ModelSpec::new(Family::Ingarch11, Noise::NegBinomial { r: 5 });
        let y = simulate_null(&spec, &Theta::new([5.0, 0.0, 0.0]), 20000, 0, SeedSpec::new(2, 0)).unwrap();
        let (m, s2) = moments(&y);
        assert!((m - 5.0).abs() / 5.0 < 0.05, "{m}");
        assert!((s2 - 10.0).abs() / 10.0 < 0.05, "{s2}");
        assert!(s2 / m > 1.0);
    }

    #[test]
    fn ingarch_stationary_mean() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let y = simulate_null(&spec, &Theta::new([0.5, 0.2, 0.35]), 100_000, 500, SeedSpec::new(3, 0)).unwrap();
        let (m, _) = moments(&y);
        let target = 0.5 / 0.45;
        assert!((m - target).abs() / target < 0.05, "{m}");
    }

    #[test]
    fn poisson_innovations_are_centered() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        let theta = Theta::new([0.5, 0.2, 0.35]);
        let y = simulate_null(&spec, &theta, 50_000, 500, SeedSpec::new(4, 0)).unwrap();
        // Residuals against the exact recursion (continued from the burn-in
        // state is not observable, so drop the first 200 terms).
        let lam = crate::model::cond_mean_path(&spec, &theta, &y, y.full(), crate::model::InitPolicy::UnconditionalMean)
            .unwrap();
        let resid: Vec<f64> = y.values().iter().zip(&lam).skip(200).map(|(&v, l)| v as f64 - l).collect();
        let n = resid.len() as f64;
        let m = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(m.abs() < 3.0 * sd / n.sqrt(), "{m}");
    }

    #[test]
    fn reproducible_and_stream_separated() {
        let spec = ModelSpec::new(Family::Ingarch11, Noise::NegBinomial { r: 5 });
        let th = Theta::new([0.5, 0.2, 0.35]);
        let a = simulate_null(&spec, &th, 300, 50, SeedSpec::new(9, 1)).unwrap();
        let b = simulate_null(&spec, &th, 300, 50, SeedSpec::new(9, 1)).unwrap();
        let c = simulate_null(&spec, &th, 300, 50, SeedSpec::new(9, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn epidemic_without_change_equals_null() {
        let spec = ModelSpec::poisson(Family::Inarch1);
        let th = Theta::new([22.75, 0.18]);
        let design = EpidemicDesign { theta0: th.clone(), theta1: th.clone(), tau1: 0.3, tau2: 0.7 };
        let e = simulate_epidemic(&spec, &design, 400, 100, SeedSpec::new(5, 3)).unwrap();
        let n = simulate_null(&spec, &th, 400, 100, SeedSpec::new(5, 3)).unwrap();
        assert_eq!(e.series, n);
    }

    #[test]
    fn break_floor_arithmetic() {
        let design = EpidemicDesign {
            theta0: Theta::new([1.0, 0.1]),
            theta1: Theta::new([2.0, 0.1]),
            tau1: 0.3,
            tau2: 0.7,
        };
        assert_eq!(design.breaks(1000).unwrap(), (300, 700));
        assert_eq!(design.breaks(500).unwrap(), (150, 350));
        assert!(design.breaks(2).is_err());
        let bad = EpidemicDesign { tau1: 0.7, tau2: 0.3, ..design };
        assert!(bad.breaks(100).is_err());
    }

    #[test]
    fn nb_epidemic_regime_means() {
        let spec = ModelSpec::new(Family::Ingarch11, Noise::NegBinomial { r: 5 });
        let design = EpidemicDesign {
            theta0: Theta::new([0.5, 0.2, 0.35]),
            theta1: Theta::new([1.0, 0.2, 0.35]),
            tau1: 0.3,
            tau2: 0.7,
        };
        // Average over replications: regime means ≈ 1.11 and ≈ 2.22.
        let (mut outer, mut inner) = (0.0, 0.0);
        for rep in 0..20 {
            let e = simulate_epidemic(&spec, &design, 500, 500, SeedSpec::new(6, rep)).unwrap();
            assert_eq!(e.breaks, (150, 350));
            let v = e.series.values();
            inner += v[170..350].iter().sum::<u64>() as f64 / 180.0;
            outer += (v[..150].iter().sum::<u64>() + v[370..].iter().sum::<u64>()) as f64 / 280.0;
        }
        let ratio = inner / outer;
        assert!((ratio - 2.0).abs() < 0.25, "{ratio}");
    }

    #[test]
    fn rejects_nonstationary_and_empty() {
        let spec = ModelSpec::poisson(Family::Ingarch11);
        assert!(simulate_null(&spec, &Theta::new([1.0, 0.7, 0.5]), 10, 0, SeedSpec::new(0, 0)).is_err());
        assert!(simulate_null(&spec, &Theta::new([1.0, 0.1, 0.1]), 0, 0, SeedSpec::new(0, 0)).is_err());
    }
}
