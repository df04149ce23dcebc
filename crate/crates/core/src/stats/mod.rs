//! Shared statistical machinery: seeded bootstrap, inverse-variance pooling,
//! linear least squares and a Levenberg-Marquardt solver.

mod bootstrap;
mod linfit;
mod lm;
mod pool;
mod rng;

pub use bootstrap::{bootstrap, percentile, BootstrapReport, ParameterSummary};
pub use linfit::{fit_line, fit_through_origin, LineFit, ProportionalFit};
pub use lm::{levenberg_marquardt, LmOptions, LmResult};
pub use pool::{pool_inverse_variance, Estimate, InverseVariancePool};
pub use rng::{replica_rng, seeded_rng, SeededRng, GENERATOR_NAME};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
