use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A value with its one-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub fn relative_sigma(&self) -> f64 {
        self.sigma / self.value.abs()
    }
}

/// Running inverse-variance accumulator. Carrying the weight sums makes the
/// merge of two partial pools exact.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InverseVariancePool {
    sum_w: f64,
    sum_wx: f64,
    count: usize,
}

impl InverseVariancePool {
    pub fn add(&mut self, e: Estimate) -> Result<()> {
        if !(e.sigma > 0.0 && e.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", e.sigma)));
        }
        if !e.value.is_finite() {
            return Err(Error::invalid("estimate value must be finite"));
        }
        let w = 1.0 / (e.sigma * e.sigma);
        self.sum_w += w;
        self.sum_wx += w * e.value;
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &InverseVariancePool) {
        self.sum_w += other.sum_w;
        self.sum_wx += other.sum_wx;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn result(&self) -> Result<Estimate> {
        if self.count == 0 {
            return Err(Error::InsufficientData("nothing to pool".into()));
        }
        Ok(Estimate::new(self.sum_wx / self.sum_w, self.sum_w.powf(-0.5)))
    }
}

/// Weights `1/sigma^2`; pooled sigma `(sum w)^(-1/2)`.
pub fn pool_inverse_variance(estimates: &[Estimate]) -> Result<Estimate> {
    if estimates.is_empty() {
        return Err(Error::InsufficientData("nothing to pool".into()));
    }
    if estimates.len() == 1 {
        let e = estimates[0];
        if !(e.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", e.sigma)));
        }
        return Ok(e);
    }
    let mut pool = InverseVariancePool::default();
    for &e in estimates {
        pool.add(e)?;
    }
    pool.result()
}
