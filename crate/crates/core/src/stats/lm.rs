use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which the solver stops.
    pub ftol: f64,
    /// Relative step size (in scaled coordinates) below which the solver stops.
    pub xtol: f64,
    pub initial_lambda: f64,
    /// Typical magnitude of each parameter. Defaults to `|p0|` (or 1).
    pub scale: Option<Vec<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            ftol: 1e-15,
            xtol: 1e-13,
            initial_lambda: 1e-3,
            scale: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub rss: f64,
    pub iterations: usize,
    /// Parameter covariance `s^2 (J^T J)^-1` with `s^2 = rss / (m - n)`.
    pub covariance: Vec<Vec<f64>>,
}

impl LmResult {
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }
}

fn eval<F: FnMut(&[f64], &mut [f64])>(f: &mut F, p: &[f64], r: &mut [f64]) -> Option<f64> {
    f(p, r);
    let rss: f64 = r.iter().map(|v| v * v).sum();
    rss.is_finite().then_some(rss)
}

fn jacobian<F: FnMut(&[f64], &mut [f64])>(
    f: &mut F,
    p: &[f64],
    scale: &[f64],
    m: usize,
    out: &mut [Vec<f64>],
) -> bool {
    let mut pp = p.to_vec();
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];
    for j in 0..p.len() {
        let h = 6e-6 * scale[j];
        pp[j] = p[j] + h;
        f(&pp, &mut rp);
        pp[j] = p[j] - h;
        f(&pp, &mut rm);
        pp[j] = p[j];
        for i in 0..m {
            // derivative with respect to the scaled parameter p_j / scale_j
            out[j][i] = (rp[i] - rm[i]) / (2.0 * h) * scale[j];
            if !out[j][i].is_finite() {
                return false;
            }
        }
    }
    true
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        cols.push(solve(a.to_vec(), e)?);
    }
    Some((0..n).map(|r| (0..n).map(|c| cols[c][r]).collect()).collect())
}

/// Minimises `sum r_i(p)^2` where `residuals(p, r)` fills `r` (length `m`).
/// Non-finite residuals reject the trial step.
pub fn levenberg_marquardt<F>(mut residuals: F, p0: &[f64], m: usize, opts: &LmOptions) -> Result<LmResult>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = p0.len();
    if m < n {
        return Err(Error::InsufficientData(format!("{m} residuals for {n} parameters")));
    }
    let scale: Vec<f64> = match &opts.scale {
        Some(s) if s.len() == n => s.clone(),
        _ => p0.iter().map(|v| if *v != 0.0 { v.abs() } else { 1.0 }).collect(),
    };
    let mut p = p0.to_vec();
    let mut r = vec![0.0; m];
    let mut rss = eval(&mut residuals, &p, &mut r)
        .ok_or_else(|| Error::NonConvergence("non-finite residuals at the initial guess".into()))?;
    let mut lambda = opts.initial_lambda;
    let mut jac = vec![vec![0.0; m]; n];
    let mut trial_r = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iterations {
        iterations += 1;
        if !jacobian(&mut residuals, &p, &scale, m, &mut jac) {
            return Err(Error::NonConvergence("non-finite jacobian".into()));
        }
        let jtj: Vec<Vec<f64>> = (0..n)
            .map(|a| (0..n).map(|b| jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let g: Vec<f64> = (0..n).map(|a| jac[a].iter().zip(&r).map(|(x, y)| x * y).sum()).collect();
        if rss == 0.0 || g.iter().all(|v| v.abs() <= 1e-300) {
            converged = true;
            break;
        }

        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[k][k] += lambda * jtj[k][k].max(1e-300);
            }
            let Some(step) = solve(a, g.iter().map(|v| -v).collect()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = (0..n).map(|k| p[k] + step[k] * scale[k]).collect();
            match eval(&mut residuals, &trial, &mut trial_r) {
                Some(new_rss) if new_rss <= rss => {
                    let rel_drop = (rss - new_rss) / rss.max(1e-300);
                    let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                    let p_norm = (0..n).map(|k| (p[k] / scale[k]).powi(2)).sum::<f64>().sqrt();
                    p = trial;
                    std::mem::swap(&mut r, &mut trial_r);
                    rss = new_rss;
                    lambda = (lambda * 0.3).max(1e-15);
                    improved = true;
                    if rel_drop < opts.ftol || step_norm < opts.xtol * (p_norm + opts.xtol) {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            // no downhill step at any damping: a (numerical) minimum
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "no convergence after {} iterations",
            opts.max_iterations
        )));
    }

    jacobian(&mut residuals, &p, &scale, m, &mut jac);
    let jtj: Vec<Vec<f64>> = (0..n)
        .map(|a| (0..n).map(|b| jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let s2 = if m > n { rss / (m - n) as f64 } else { 0.0 };
    let covariance = match invert(&jtj) {
        Some(inv) => (0..n)
            .map(|a| (0..n).map(|b| inv[a][b] * s2 * scale[a] * scale[b]).collect())
            .collect(),
        None => vec![vec![f64::NAN; n]; n],
    };
    Ok(LmResult {
        params: p,
        rss,
        iterations,
        covariance,
    })
}
