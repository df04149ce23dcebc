//! Driven-sweep quality-factor pipeline and thermal force-noise projection.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, TWO_PI};
use crate::error::{Error, Result};
use crate::sigio::{SweepDirection, SweepRecord, TemperatureSeries};
use crate::stats::{self, levenberg_marquardt, BootstrapReport, Estimate, LmOptions};

/// Displacement-amplitude response of one sweep direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivenSweep {
    pub frequencies: Vec<f64>,
    /// m
    pub amplitude: Vec<f64>,
    pub direction: SweepDirection,
    /// V
    pub drive_amplitude: f64,
    pub start_time: f64,
    pub temperature_k: Option<f64>,
}

impl DrivenSweep {
    pub fn new(
        frequencies: Vec<f64>,
        amplitude: Vec<f64>,
        direction: SweepDirection,
        drive_amplitude: f64,
        start_time: f64,
        temperature_k: Option<f64>,
    ) -> Result<Self> {
        if frequencies.len() != amplitude.len() {
            return Err(Error::invalid("frequency and amplitude lengths differ"));
        }
        if frequencies.len() < 6 {
            return Err(Error::InsufficientData("driven sweep needs at least 6 points".into()));
        }
        crate::sigio::check_finite(&frequencies)?;
        crate::sigio::check_finite(&amplitude)?;
        let ok = match direction {
            SweepDirection::Up => frequencies.windows(2).all(|w| w[1] > w[0]),
            SweepDirection::Down => frequencies.windows(2).all(|w| w[1] < w[0]),
        };
        if !ok {
            return Err(Error::invalid("frequencies are not monotone in the stated direction"));
        }
        if amplitude.iter().any(|&a| a < 0.0) {
            return Err(Error::invalid("amplitudes must be non-negative"));
        }
        Ok(Self {
            frequencies,
            amplitude,
            direction,
            drive_amplitude,
            start_time,
            temperature_k,
        })
    }

    /// Splits a recorded sweep into its monotone portions. `meters_per_unit`
    /// converts the recorded amplitude to displacement.
    pub fn from_record(rec: &SweepRecord, meters_per_unit: f64) -> Result<Vec<DrivenSweep>> {
        rec.validate()?;
        let f = &rec.frequencies;
        let n = f.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < n {
            let up = f[start + 1] > f[start];
            let mut end = start + 1;
            while end + 1 < n && ((f[end + 1] > f[end]) == up) && f[end + 1] != f[end] {
                end += 1;
            }
            let dir = if up { SweepDirection::Up } else { SweepDirection::Down };
            let amp: Vec<f64> = rec.amplitude[start..=end].iter().map(|a| a.abs() * meters_per_unit).collect();
            out.push(DrivenSweep::new(
                f[start..=end].to_vec(),
                amp,
                dir,
                rec.drive_amplitude,
                rec.start_time,
                rec.temperature_k,
            )?);
            start = end + 1;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.amplitude.iter_mut().for_each(|a| *a *= factor);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LorentzianForm {
    /// `A (G/2) / sqrt((f - fc)^2 + (G/2)^2)`
    #[default]
    Amplitude,
    /// `A (G/2)^2 / ((f - fc)^2 + (G/2)^2)`
    Power,
}

impl LorentzianForm {
    pub fn eval(self, f: f64, a: f64, fc: f64, gamma: f64) -> f64 {
        let h2 = 0.25 * gamma * gamma;
        let d2 = (f - fc) * (f - fc);
        match self {
            LorentzianForm::Amplitude => a * (0.5 * gamma.abs()) / (d2 + h2).sqrt(),
            LorentzianForm::Power => a * h2 / (d2 + h2),
        }
    }

    /// Fraction of the peak height reached at `f = fc +- gamma / 2`.
    fn half_width_level(self) -> f64 {
        match self {
            LorentzianForm::Amplitude => std::f64::consts::FRAC_1_SQRT_2,
            LorentzianForm::Power => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzianOptions {
    #[serde(default)]
    pub form: LorentzianForm,
    #[serde(default = "yes")]
    pub background: bool,
    #[serde(default = "d_boot")]
    pub n_bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn d_boot() -> usize {
    1000
}

impl Default for LorentzianOptions {
    fn default() -> Self {
        Self {
            form: LorentzianForm::Amplitude,
            background: true,
            n_bootstrap: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub a: Estimate,
    pub fc: Estimate,
    pub gamma: Estimate,
    pub q: Estimate,
    pub background: Option<Estimate>,
    pub form: LorentzianForm,
    pub direction: SweepDirection,
    pub rss: f64,
    pub n_points: usize,
    pub bootstrap: Option<BootstrapReport>,
}

fn lorentz_guess(f: &[f64], y: &[f64], form: LorentzianForm) -> Result<[f64; 4]> {
    let n = f.len();
    let imax = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    if imax < 2 || imax + 2 >= n {
        return Err(Error::PeakAtEdge);
    }
    let edge = (n / 10).max(2);
    let mut tails: Vec<f64> = y[..edge].iter().chain(&y[n - edge..]).copied().collect();
    tails.sort_by(f64::total_cmp);
    let bg = stats::median(&tails).min(y[imax]);
    let a = y[imax] - bg;
    let level = bg + a * form.half_width_level();
    let mut lo = imax;
    while lo > 0 && y[lo] > level {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && y[hi] > level {
        hi += 1;
    }
    let mut gamma = (f[hi] - f[lo]).abs();
    if !(gamma > 0.0) {
        gamma = (f[n - 1] - f[0]).abs() / 20.0;
    }
    Ok([a, f[imax], gamma, bg])
}

struct LorentzCore {
    params: Vec<f64>,
    rss: f64,
    covariance: Vec<Vec<f64>>,
}

fn lorentz_lm(f: &[f64], y: &[f64], p0: &[f64], form: LorentzianForm, background: bool) -> Result<LorentzCore> {
    let n = f.len();
    let np = if background { 4 } else { 3 };
    let scale = vec![p0[0].abs().max(1e-300), p0[2], p0[2], p0[0].abs().max(1e-300)];
    let opts = LmOptions {
        scale: Some(scale[..np].to_vec()),
        ..Default::default()
    };
    let res = levenberg_marquardt(
        |p, r| {
            let bg = if background { p[3] } else { 0.0 };
            for i in 0..n {
                r[i] = form.eval(f[i], p[0], p[1], p[2]) + bg - y[i];
            }
        },
        &p0[..np],
        n,
        &opts,
    )?;
    let mut p = res.params.clone();
    p[2] = p[2].abs();
    let fmin = f[0].min(f[n - 1]);
    let fmax = f[0].max(f[n - 1]);
    if !(p[2] > 0.0 && p[0] > 0.0) {
        return Err(Error::NonConvergence("Lorentzian width or height is not positive".into()));
    }
    if !(p[1] > fmin && p[1] < fmax) {
        return Err(Error::PeakAtEdge);
    }
    Ok(LorentzCore {
        params: p,
        rss: res.rss,
        covariance: res.covariance,
    })
}

/// Least-squares Lorentzian fit of displacement amplitude against frequency.
/// Uncertainties come from a case-resampling bootstrap, or from the
/// linearised covariance when `n_bootstrap` is zero.
pub fn fit_lorentzian(sweep: &DrivenSweep, opts: &LorentzianOptions) -> Result<LorentzianFit> {
    let (f, y) = (&sweep.frequencies, &sweep.amplitude);
    let p0 = lorentz_guess(f, y, opts.form)?;
    let core = lorentz_lm(f, y, &p0, opts.form, opts.background)?;
    let p = &core.params;
    let q = p[1] / p[2];

    let mut names = vec!["a", "fc", "gamma", "q"];
    if opts.background {
        names.push("background");
    }
    let (sig, report) = if opts.n_bootstrap > 0 {
        let start = [p[0], p[1], p[2], if opts.background { p[3] } else { 0.0 }];
        let pts: Vec<(f64, f64)> = f.iter().copied().zip(y.iter().copied()).collect();
        let rep = stats::bootstrap(&pts, &names, opts.n_bootstrap, opts.seed, |d| {
            let mut d = d.to_vec();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (ff, yy): (Vec<f64>, Vec<f64>) = d.into_iter().unzip();
            let c = lorentz_lm(&ff, &yy, &start, opts.form, opts.background)?;
            let mut out = vec![c.params[0], c.params[1], c.params[2], c.params[1] / c.params[2]];
            if opts.background {
                out.push(c.params[3]);
            }
            Ok(out)
        })?;
        (rep.parameters.iter().map(|s| s.std).collect::<Vec<_>>(), Some(rep))
    } else {
        let cov = &core.covariance;
        if cov[2][2].is_nan() {
            return Err(Error::NonConvergence("singular Lorentzian covariance".into()));
        }
        let rel_q2 = cov[1][1] / (p[1] * p[1]) + cov[2][2] / (p[2] * p[2]) - 2.0 * cov[1][2] / (p[1] * p[2]);
        let mut s = vec![cov[0][0].sqrt(), cov[1][1].sqrt(), cov[2][2].sqrt(), q * rel_q2.max(0.0).sqrt()];
        if opts.background {
            s.push(cov[3][3].sqrt());
        }
        (s, None)
    };
    Ok(LorentzianFit {
        a: Estimate::new(p[0], sig[0]),
        fc: Estimate::new(p[1], sig[1]),
        gamma: Estimate::new(p[2], sig[2]),
        q: Estimate::new(q, sig[3]),
        background: opts.background.then(|| Estimate::new(p[3], sig[4])),
        form: opts.form,
        direction: sweep.direction,
        rss: core.rss,
        n_points: f.len(),
        bootstrap: report,
    })
}

/// Sweeps recorded while the sample sat at one temperature step.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGroup {
    pub temperature_k: f64,
    pub sigma_t: f64,
    pub sweeps: Vec<DrivenSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPoint {
    pub temperature_k: f64,
    pub sigma_t: f64,
    pub q: f64,
    pub sigma_q: f64,
    pub n_sweeps: usize,
}

/// Fits every sweep direction separately and pools the Q estimates of each
/// group by inverse-variance weighting. Sweep `j` of group `i` is
/// bootstrapped with seed `opts.seed + 1000 * i + j`.
pub fn split_and_pool(groups: &[SweepGroup], opts: &LorentzianOptions) -> Result<Vec<QPoint>> {
    groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            if g.sweeps.is_empty() {
                return Err(Error::InsufficientData(format!("temperature group {gi} has no sweeps")));
            }
            let fits: Vec<LorentzianFit> = g
                .sweeps
                .iter()
                .enumerate()
                .filter_map(|(j, s)| {
                    let o = LorentzianOptions {
                        seed: opts.seed.wrapping_add(1000 * gi as u64 + j as u64),
                        ..opts.clone()
                    };
                    fit_lorentzian(s, &o).ok()
                })
                .filter(|f| f.q.sigma > 0.0 && f.q.sigma.is_finite())
                .collect();
            if fits.is_empty() {
                return Err(Error::NonConvergence(format!(
                    "every sweep fit failed at T = {} K",
                    g.temperature_k
                )));
            }
            let pooled = stats::pool_inverse_variance(&fits.iter().map(|f| f.q).collect::<Vec<_>>())?;
            Ok(QPoint {
                temperature_k: g.temperature_k,
                sigma_t: g.sigma_t,
                q: pooled.value,
                sigma_q: pooled.sigma,
                n_sweeps: fits.len(),
            })
        })
        .collect()
}

/// Mean and standard error of the series over the step that contains
/// `start_time`. `steps` are `(t_start, t_end)` intervals.
pub fn assign_step_temperature(
    start_time: f64,
    steps: &[(f64, f64)],
    series: &TemperatureSeries,
) -> Option<(f64, f64)> {
    let &(a, b) = steps.iter().find(|(a, b)| start_time >= *a && start_time < *b)?;
    let t: Vec<f64> = series
        .points
        .iter()
        .filter(|p| p.time_s >= a && p.time_s < b)
        .map(|p| p.temperature_k)
        .collect();
    match t.len() {
        0 => None,
        1 => Some((t[0], 0.0)),
        n => Some((stats::mean(&t), stats::std_dev(&t) / (n as f64).sqrt())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Exponent in `1/Q ~ T^alpha`.
    pub alpha: Estimate,
    /// Intercept of `ln(1/Q)` at `ln T = 0`.
    pub log_intercept: f64,
    pub n_points: usize,
    pub residual_sd: f64,
}

impl PowerLawFit {
    pub fn q_at(&self, t: f64) -> f64 {
        (-(self.log_intercept + self.alpha.value * t.ln())).exp()
    }
}

/// Ordinary least squares of `ln(1/Q)` against `ln T`.
pub fn fit_power_law(points: &[QPoint]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData("power law needs at least 3 points".into()));
    }
    if points.iter().any(|p| !(p.q > 0.0 && p.temperature_k > 0.0)) {
        return Err(Error::invalid("Q and T must be positive"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.temperature_k.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| -p.q.ln()).collect();
    let f = stats::fit_line(&x, &y, None)?;
    Ok(PowerLawFit {
        alpha: Estimate::new(f.slope, f.sigma_slope()),
        log_intercept: f.intercept,
        n_points: points.len(),
        residual_sd: f.residual_sd,
    })
}

/// Thermal force noise `sqrt(4 kB T k / (omega_c Q))`, N/sqrt(Hz), with
/// `omega_c = 2 pi fc`.
pub fn force_noise(t: f64, k: f64, fc: f64, q: f64) -> f64 {
    (4.0 * BOLTZMANN * t * k / (TWO_PI * fc * q)).sqrt()
}

/// Temperature at which `force_noise` equals `sqrt_sf`.
pub fn temperature_for_force_noise(sqrt_sf: f64, k: f64, fc: f64, q: f64) -> f64 {
    sqrt_sf * sqrt_sf * TWO_PI * fc * q / (4.0 * BOLTZMANN * k)
}

pub fn write_q_table(points: &[QPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("T_K,sigma_T,Q,sigma_Q,n_sweeps\n");
    for p in points {
        out.push_str(&format!(
            "{:e},{:e},{:e},{:e},{}\n",
            p.temperature_k, p.sigma_t, p.q, p.sigma_q, p.n_sweeps
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_q_table(path: impl AsRef<Path>) -> Result<Vec<QPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("T_K,sigma_T,Q,sigma_Q,n_sweeps") {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "expected T_K,sigma_T,Q,sigma_Q,n_sweeps".into(),
        });
    }
    let bad = |l: &str| Error::invalid(format!("bad Q-table row {l:?}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 5 {
                return Err(bad(l));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(l));
            Ok(QPoint {
                temperature_k: num(c[0])?,
                sigma_t: num(c[1])?,
                q: num(c[2])?,
                sigma_q: num(c[3])?,
                n_sweeps: c[4].trim().parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}
