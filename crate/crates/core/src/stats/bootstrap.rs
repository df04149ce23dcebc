use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::{replica_rng, GENERATOR_NAME};
use crate::error::{Error, Result};

/// Replicas may fail on at most this fraction before the fit is declared
/// unstable.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    /// Fit on the full data set.
    pub estimate: f64,
    pub mean: f64,
    pub std: f64,
    /// Only reported with at least 100 successful replicas.
    pub p2_5: Option<f64>,
    pub p97_5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub n_resamples: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub generator: String,
    pub parameters: Vec<ParameterSummary>,
}

impl BootstrapReport {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Case-resampling bootstrap. Replica `i` draws from stream `i` of `seed`,
/// so the report does not depend on thread scheduling. Failed replicas are
/// dropped and counted.
pub fn bootstrap<T, F>(data: &[T], names: &[&str], n_resamples: usize, seed: u64, fit: F) -> Result<BootstrapReport>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> Result<Vec<f64>> + Sync,
{
    if data.is_empty() {
        return Err(Error::InsufficientData("bootstrap needs data".into()));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("n_resamples must be >= 1"));
    }
    let full = fit(data)?;
    if full.len() != names.len() {
        return Err(Error::invalid("fit returned a different number of parameters than names"));
    }
    let n = data.len();
    let replicas: Vec<Option<Vec<f64>>> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i as u64);
            let sample: Vec<T> = (0..n).map(|_| data[rng.random_range(0..n)].clone()).collect();
            fit(&sample)
                .ok()
                .filter(|p| p.len() == full.len() && p.iter().all(|v| v.is_finite()))
        })
        .collect();
    let ok: Vec<&Vec<f64>> = replicas.iter().flatten().collect();
    let n_failed = n_resamples - ok.len();
    if n_failed as f64 > MAX_FAILURE_FRACTION * n_resamples as f64 || ok.is_empty() {
        return Err(Error::UnstableFit {
            failed: n_failed,
            total: n_resamples,
        });
    }
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut v: Vec<f64> = ok.iter().map(|p| p[j]).collect();
            let mean = super::mean(&v);
            let std = super::std_dev(&v);
            v.sort_by(f64::total_cmp);
            let ci = ok.len() >= 100;
            ParameterSummary {
                name: name.to_string(),
                estimate: full[j],
                mean,
                std,
                p2_5: ci.then(|| percentile(&v, 0.025)),
                p97_5: ci.then(|| percentile(&v, 0.975)),
            }
        })
        .collect();
    Ok(BootstrapReport {
        n_resamples,
        n_failed,
        seed,
        generator: GENERATOR_NAME.to_string(),
        parameters,
    })
}
