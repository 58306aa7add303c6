//! Small seeded Monte-Carlo checks of the test's behaviour under the null
//! and under fixed alternatives.

use episcan::bridge::QuantileTable;
use episcan::experiment::{run_experiment, ExperimentConfig};
use episcan::{Family, Noise, Theta};

fn config(theta1: Option<Theta>, n: usize, reps: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        family: Family::Inarch1,
        noise: Noise::Poisson,
        theta0: Theta::new([10.0, 0.2]),
        theta1,
        tau1: 0.3,
        tau2: 0.7,
        n,
        reps,
        alpha: 0.05,
        seed,
        burnin: 300,
        u_n: None,
        v_n: None,
        stride: None,
    }
}

fn median_q(cfg: &ExperimentConfig) -> f64 {
    let r = run_experiment(cfg, &QuantileTable::published()).unwrap();
    assert_eq!(r.failed, 0);
    let mut q: Vec<f64> = r.reps.iter().filter_map(|x| x.q_n).collect();
    q.sort_by(f64::total_cmp);
    q[q.len() / 2]
}

#[test]
fn null_is_mostly_accepted() {
    let r = run_experiment(&config(None, 300, 20, 101), &QuantileTable::published()).unwrap();
    assert_eq!(r.completed, 20);
    assert!(r.rejections <= 2, "{} of 20 rejected", r.rejections);
}

#[test]
fn statistic_grows_with_n_under_alternative() {
    let alt = Some(Theta::new([12.0, 0.2]));
    let q: Vec<f64> = [300, 600, 1200].iter().map(|&n| median_q(&config(alt.clone(), n, 5, 7))).collect();
    assert!(q[0] < q[1] && q[1] < q[2], "{q:?}");
}

#[test]
fn nb_alternative_is_detected_and_localized() {
    let cfg = ExperimentConfig {
        family: Family::Ingarch11,
        noise: Noise::NegBinomial { r: 5 },
        theta0: Theta::new([0.5, 0.2, 0.35]),
        theta1: Some(Theta::new([1.0, 0.2, 0.35])),
        ..config(None, 500, 6, 3)
    };
    let r = run_experiment(&cfg, &QuantileTable::published()).unwrap();
    assert!(r.rejections + 1 >= r.completed, "{:?}", r.reps);
    let (a, b) = r.median_break_error.unwrap();
    assert!(a <= 50.0 && b <= 50.0, "{a} {b}");
}
