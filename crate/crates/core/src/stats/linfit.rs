use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y = intercept + slope * x` with parameter covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub var_slope: f64,
    pub var_intercept: f64,
    pub cov_slope_intercept: f64,
    /// Residual standard deviation (unweighted fits) or sqrt(chi2/dof).
    pub residual_sd: f64,
    pub n: usize,
}

impl LineFit {
    pub fn sigma_slope(&self) -> f64 {
        self.var_slope.sqrt()
    }

    pub fn sigma_intercept(&self) -> f64 {
        self.var_intercept.sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn check_xy(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("x and y differ in length"));
    }
    if x.len() < min {
        return Err(Error::InsufficientData(format!("need at least {min} points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite data in linear fit"));
    }
    Ok(())
}

/// Least-squares line. Without `sigma` the covariance is scaled by the
/// residual variance; with `sigma` the uncertainties are taken as absolute.
pub fn fit_line(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<LineFit> {
    check_xy(x, y, 2)?;
    let w: Vec<f64> = match sigma {
        Some(s) => {
            if s.len() != x.len() || s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("sigma must be positive and match the data"));
            }
            s.iter().map(|v| 1.0 / (v * v)).collect()
        }
        None => vec![1.0; x.len()],
    };
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("x values are degenerate".into()));
    }
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..x.len())
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum();
    let dof = x.len().saturating_sub(2);
    let s2 = match sigma {
        None if dof > 0 => chi2 / dof as f64,
        None => 0.0,
        Some(_) => 1.0,
    };
    let var_slope = s2 / sxx;
    let var_intercept = s2 * (1.0 / sw + xm * xm / sxx);
    let cov = -s2 * xm / sxx;
    let residual_sd = if dof > 0 { (chi2 / dof as f64).sqrt() } else { 0.0 };
    Ok(LineFit {
        slope,
        intercept,
        var_slope,
        var_intercept,
        cov_slope_intercept: cov,
        residual_sd,
        n: x.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionalFit {
    pub slope: f64,
    pub sigma_slope: f64,
    pub n: usize,
    pub chi2: f64,
}

/// `y = slope * x`. Same sigma conventions as [`fit_line`].
pub fn fit_through_origin(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<ProportionalFit> {
    check_xy(x, y, 1)?;
    let w: Vec<f64> = match sigma {
        Some(s) => {
            if s.len() != x.len() || s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("sigma must be positive and match the data"));
            }
            s.iter().map(|v| 1.0 / (v * v)).collect()
        }
        None => vec![1.0; x.len()],
    };
    let sxx: f64 = (0..x.len()).map(|i| w[i] * x[i] * x[i]).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("x values are all zero".into()));
    }
    let sxy: f64 = (0..x.len()).map(|i| w[i] * x[i] * y[i]).sum();
    let slope = sxy / sxx;
    let chi2: f64 = (0..x.len()).map(|i| w[i] * (y[i] - slope * x[i]).powi(2)).sum();
    let var = match sigma {
        Some(_) => 1.0 / sxx,
        None if x.len() > 1 => chi2 / (x.len() - 1) as f64 / sxx,
        None => 0.0,
    };
    Ok(ProportionalFit {
        slope,
        sigma_slope: var.sqrt(),
        n: x.len(),
        chi2,
    })
}
