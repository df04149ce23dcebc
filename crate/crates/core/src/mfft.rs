//! Magnetic-flux-fluctuation thermometry: theoretical noise spectrum,
//! interference rejection, band power, calibration and temperature readout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constants::{BOLTZMANN, FLUX_QUANTUM, MU0};
use crate::error::{Error, Result};
use crate::sigio::{PowerSpectrum, TemperatureSeries};
use crate::stats::{self, fit_line, fit_through_origin};

pub const DEFAULT_CUTOFF_HZ: f64 = 500.0;
pub const DEFAULT_BAND: (f64, f64) = (50.0, 3000.0);
pub const DEFAULT_CAL_RANGE: (f64, f64) = (0.040, 0.080);

pub const FLAG_NOISE_FLOOR: &str = "at_noise_floor";
pub const FLAG_EXTRAPOLATED: &str = "extrapolated";

/// Dimensionless geometry factor `G(R / delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometryG {
    /// `g0 / (1 + (f / cutoff_hz)^2)`
    SinglePole { g0: f64, cutoff_hz: f64 },
    Constant { g0: f64 },
    /// Linear interpolation in `x = R / delta`, held constant outside the table.
    Tabulated { x: Vec<f64>, g: Vec<f64> },
}

impl Default for GeometryG {
    fn default() -> Self {
        GeometryG::SinglePole {
            g0: 1.0,
            cutoff_hz: DEFAULT_CUTOFF_HZ,
        }
    }
}

impl GeometryG {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeometryG::SinglePole { g0, cutoff_hz } => {
                if !(*g0 >= 0.0 && g0.is_finite() && *cutoff_hz > 0.0 && cutoff_hz.is_finite()) {
                    return Err(Error::invalid("single-pole G needs g0 >= 0 and cutoff > 0"));
                }
            }
            GeometryG::Constant { g0 } => {
                if !(*g0 >= 0.0 && g0.is_finite()) {
                    return Err(Error::invalid("constant G must be finite and >= 0"));
                }
            }
            GeometryG::Tabulated { x, g } => {
                if x.len() < 2 || x.len() != g.len() {
                    return Err(Error::invalid("tabulated G needs >= 2 matching (x, g) pairs"));
                }
                crate::sigio::check_finite(x)?;
                crate::sigio::check_finite(g)?;
                if x[0] < 0.0 || !x.windows(2).all(|w| w[1] > w[0]) {
                    return Err(Error::invalid("tabulated x must be non-negative and increasing"));
                }
                if g.iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid("tabulated G must be non-negative"));
                }
                let n = g.len();
                if g[n - 1] > g[n - 2] {
                    return Err(Error::invalid("tabulated G must not increase at high frequency"));
                }
            }
        }
        Ok(())
    }

    /// Evaluates G at frequency `f` for the given skin-depth argument `x`.
    pub fn eval(&self, f: f64, x: f64) -> f64 {
        match self {
            GeometryG::SinglePole { g0, cutoff_hz } => g0 / (1.0 + (f / cutoff_hz).powi(2)),
            GeometryG::Constant { g0 } => *g0,
            GeometryG::Tabulated { x: xs, g } => {
                if x <= xs[0] {
                    return g[0];
                }
                let n = xs.len();
                if x >= xs[n - 1] {
                    return g[n - 1];
                }
                let j = xs.partition_point(|&v| v <= x);
                let t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
                g[j - 1] + t * (g[j] - g[j - 1])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfftTheoryParams {
    /// Wire conductivity, S/m.
    pub sigma: f64,
    /// Wire radius, m.
    pub radius: f64,
    #[serde(default = "default_mu0")]
    pub mu0: f64,
    /// K
    pub temperature: f64,
    #[serde(default)]
    pub geometry: GeometryG,
}

fn default_mu0() -> f64 {
    MU0
}

impl MfftTheoryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.radius > 0.0 && self.mu0 > 0.0) {
            return Err(Error::invalid("sigma, radius and mu0 must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.geometry.validate()
    }

    /// Skin depth at cyclic frequency `f`, m.
    pub fn skin_depth(&self, f: f64) -> f64 {
        (2.0 / (self.mu0 * self.sigma * crate::constants::TWO_PI * f)).sqrt()
    }

    /// Flux noise density at `f`, Φ₀²/Hz.
    pub fn density(&self, f: f64) -> f64 {
        let x = if f > 0.0 { self.radius / self.skin_depth(f) } else { 0.0 };
        4.0 * BOLTZMANN * self.temperature * self.sigma * self.mu0 * self.mu0 * self.radius.powi(3)
            * self.geometry.eval(f, x)
            / (FLUX_QUANTUM * FLUX_QUANTUM)
    }

    pub fn with_temperature(&self, t: f64) -> Self {
        Self {
            temperature: t,
            ..self.clone()
        }
    }
}

/// Theoretical flux-noise PSD on the uniform grid `f_start + i * df`.
pub fn theory_psd(params: &MfftTheoryParams, f_start: f64, df: f64, n_bins: usize) -> Result<PowerSpectrum> {
    params.validate()?;
    if f_start < 0.0 {
        return Err(Error::invalid("grid must start at f >= 0"));
    }
    let psd = (0..n_bins).map(|i| params.density(f_start + i as f64 * df)).collect();
    PowerSpectrum::new(f_start, df, psd, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceConfig {
    #[serde(default = "d_bin_width")]
    pub bin_width: f64,
    #[serde(default = "d_height")]
    pub height_factor: f64,
    #[serde(default = "d_z")]
    pub z_threshold: f64,
    #[serde(default = "d_occ")]
    pub occurrence_fraction: f64,
    /// Bins start here; lower frequencies are never examined.
    #[serde(default = "d_fmin")]
    pub f_min: f64,
    /// Spectra whose reference temperature exceeds this are not used.
    #[serde(default)]
    pub max_reference_temperature: Option<f64>,
}

fn d_bin_width() -> f64 {
    50.0
}
fn d_height() -> f64 {
    5.0
}
fn d_z() -> f64 {
    4.0
}
fn d_occ() -> f64 {
    0.025
}
fn d_fmin() -> f64 {
    50.0
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            bin_width: d_bin_width(),
            height_factor: d_height(),
            z_threshold: d_z(),
            occurrence_fraction: d_occ(),
            f_min: d_fmin(),
            max_reference_temperature: None,
        }
    }
}

impl InterferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.height_factor > 1.0 && self.z_threshold > 0.0) {
            return Err(Error::invalid("bin_width > 0, height_factor > 1 and z_threshold > 0 required"));
        }
        if !(0.0..1.0).contains(&self.occurrence_fraction) {
            return Err(Error::invalid("occurrence_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Frequencies excluded from band-power integrals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterferenceMask {
    /// Sorted grid frequencies, Hz.
    pub frequencies: Vec<f64>,
    pub df: f64,
}

impl InterferenceMask {
    pub fn empty(df: f64) -> Self {
        Self {
            frequencies: Vec::new(),
            df,
        }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn contains(&self, f: f64) -> bool {
        let tol = 1e-6 * self.df.max(f64::MIN_POSITIVE);
        let j = self.frequencies.partition_point(|&v| v < f - tol);
        j < self.frequencies.len() && (self.frequencies[j] - f).abs() <= tol
    }

    /// Per-bin exclusion flags on the grid of `s`.
    pub fn flags_for(&self, s: &PowerSpectrum) -> Vec<bool> {
        let mut out = vec![false; s.len()];
        for &f in &self.frequencies {
            if let Some(i) = s.index_of(f) {
                if (s.frequencies()[i] - f).abs() <= 1e-6 * s.df() {
                    out[i] = true;
                }
            }
        }
        out
    }

    /// SHA-256 over the little-endian frequency values, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.frequencies {
            h.update(f.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn flag_outliers(s: &PowerSpectrum, cfg: &InterferenceConfig) -> Vec<bool> {
    let f = s.frequencies();
    let p = s.psd();
    let mut flags = vec![false; p.len()];
    let mut start = f.partition_point(|&v| v < cfg.f_min - 1e-9 * s.df());
    while start < p.len() {
        let edge = f[start] + cfg.bin_width;
        let end = start + f[start..].partition_point(|&v| v < edge - 1e-9 * s.df());
        let vals = &p[start..end];
        if vals.len() >= 3 {
            let med = stats::median(vals);
            let mean = stats::mean(vals);
            let sd = stats::std_dev(vals);
            for (j, &v) in vals.iter().enumerate() {
                let high = v > cfg.height_factor * med;
                let z = sd > 0.0 && (v - mean) / sd > cfg.z_threshold;
                flags[start + j] = high || z;
            }
        }
        start = end.max(start + 1);
    }
    flags
}

/// Builds the interference mask from the spectra whose reference
/// temperature is unknown or below `cfg.max_reference_temperature`.
pub fn detect_interference_filtered(
    spectra: &[(&PowerSpectrum, Option<f64>)],
    cfg: &InterferenceConfig,
) -> Result<InterferenceMask> {
    cfg.validate()?;
    let used: Vec<&PowerSpectrum> = spectra
        .iter()
        .filter(|(_, t)| match (cfg.max_reference_temperature, t) {
            (Some(max), Some(t)) => *t <= max,
            _ => true,
        })
        .map(|(s, _)| *s)
        .collect();
    let first = *used
        .first()
        .ok_or_else(|| Error::InsufficientData("no spectra for interference detection".into()))?;
    if used.iter().any(|s| !s.same_grid(first)) {
        return Err(Error::GridMismatch);
    }
    let counts = used
        .par_iter()
        .map(|s| flag_outliers(s, cfg).into_iter().map(usize::from).collect::<Vec<_>>())
        .reduce(
            || vec![0usize; first.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let limit = cfg.occurrence_fraction * used.len() as f64;
    let frequencies = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c as f64 > limit)
        .map(|(i, _)| first.frequencies()[i])
        .collect();
    Ok(InterferenceMask {
        frequencies,
        df: first.df(),
    })
}

pub fn detect_interference(spectra: &[PowerSpectrum], cfg: &InterferenceConfig) -> Result<InterferenceMask> {
    let tagged: Vec<(&PowerSpectrum, Option<f64>)> = spectra.iter().map(|s| (s, None)).collect();
    detect_interference_filtered(&tagged, cfg)
}

/// Trapezoidal integral of the PSD over `[f0, f1]`, Φ₀² when the PSD is in
/// Φ₀²/Hz. Masked bins are replaced by linear interpolation between the
/// nearest unmasked neighbours.
pub fn band_power(s: &PowerSpectrum, f0: f64, f1: f64, mask: &InterferenceMask) -> Result<f64> {
    let tol = 1e-9 * s.df();
    if !(f0 < f1) || f0 < s.f_start() - tol || f1 > s.f_end() + tol {
        return Err(Error::BandOutsideGrid { f0, f1 });
    }
    let masked = mask.flags_for(s);
    let p = s.psd();
    let n = p.len();
    // nearest unmasked neighbours on each side
    let mut left = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if !masked[i] {
            last = Some(i);
        }
        left[i] = last;
    }
    let mut right = vec![None; n];
    last = None;
    for i in (0..n).rev() {
        if !masked[i] {
            last = Some(i);
        }
        right[i] = last;
    }
    let value = |i: usize| -> Result<f64> {
        if !masked[i] {
            return Ok(p[i]);
        }
        match (left[i], right[i]) {
            (Some(a), Some(b)) => {
                let t = (i - a) as f64 / (b - a) as f64;
                Ok(p[a] + t * (p[b] - p[a]))
            }
            (Some(a), None) => Ok(p[a]),
            (None, Some(b)) => Ok(p[b]),
            (None, None) => Err(Error::InsufficientData("every bin is masked".into())),
        }
    };
    let df = s.df();
    let pos = |f: f64| ((f - s.f_start()) / df).clamp(0.0, (n - 1) as f64);
    let (x0, x1) = (pos(f0), pos(f1));
    let interp = |x: f64| -> Result<f64> {
        let i = (x.floor() as usize).min(n - 1);
        if i + 1 >= n {
            return value(i);
        }
        let t = x - i as f64;
        Ok(value(i)? * (1.0 - t) + value(i + 1)? * t)
    };
    // knots: x0, interior grid indices, x1
    let mut knots = vec![(x0, interp(x0)?)];
    let mut i = x0.floor() as usize + 1;
    while (i as f64) < x1 {
        if (i as f64) > x0 {
            knots.push((i as f64, value(i)?));
        }
        i += 1;
    }
    knots.push((x1, interp(x1)?));
    let mut total = 0.0;
    for w in knots.windows(2) {
        total += 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0) * df;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// `P = P0 + T / slope`
    #[default]
    Intercept,
    /// `P = T / slope`
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfftCalibration {
    /// K per unit band power.
    pub slope: f64,
    /// Band power at T = 0.
    pub intercept: f64,
    pub sigma_intercept: f64,
    /// Covariance of the fitted line `P = a + b T`, entries (a, b).
    pub var_a: f64,
    pub var_b: f64,
    pub cov_ab: f64,
    pub range: (f64, f64),
    pub band: (f64, f64),
    pub mode: CalibrationMode,
    pub n_points: usize,
    pub residual_sd: f64,
    #[serde(default)]
    pub mask_digest: Option<String>,
}

/// Fits band power against reference temperature over `range` (K).
/// `points` are `(band power, reference temperature)` pairs.
pub fn calibrate(
    points: &[(f64, f64)],
    range: (f64, f64),
    band: (f64, f64),
    mode: CalibrationMode,
) -> Result<MfftCalibration> {
    if !(range.0 < range.1) {
        return Err(Error::invalid("calibration range must satisfy T_lo < T_hi"));
    }
    let (p, t): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|(_, t)| *t >= range.0 && *t <= range.1)
        .copied()
        .unzip();
    if p.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} calibration points inside [{}, {}] K, need 3",
            p.len(),
            range.0,
            range.1
        )));
    }
    let (a, b, var_a, var_b, cov_ab, resid) = match mode {
        CalibrationMode::Intercept => {
            let f = fit_line(&t, &p, None)?;
            (f.intercept, f.slope, f.var_intercept, f.var_slope, f.cov_slope_intercept, f.residual_sd)
        }
        CalibrationMode::Proportional => {
            let f = fit_through_origin(&t, &p, None)?;
            let rsd = (f.chi2 / (f.n as f64 - 1.0)).sqrt();
            (0.0, f.slope, 0.0, f.sigma_slope * f.sigma_slope, 0.0, rsd)
        }
    };
    if !(b > 0.0) {
        return Err(Error::NonPositiveSlope(b));
    }
    Ok(MfftCalibration {
        slope: 1.0 / b,
        intercept: a,
        sigma_intercept: var_a.sqrt(),
        var_a,
        var_b,
        cov_ab,
        range,
        band,
        mode,
        n_points: p.len(),
        residual_sd: resid,
        mask_digest: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureReading {
    pub temperature_k: f64,
    pub sigma_k: f64,
    pub flags: Vec<String>,
}

/// `T = (P - P0) * slope` with the calibration covariance propagated.
pub fn temperature(p: f64, cal: &MfftCalibration) -> Result<TemperatureReading> {
    if !p.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let floor = 3.0 * cal.sigma_intercept;
    if p < cal.intercept - floor {
        return Err(Error::BelowNoiseFloor {
            power: p,
            floor: cal.intercept,
        });
    }
    let b = 1.0 / cal.slope;
    let t = (p - cal.intercept) * cal.slope;
    let var = (cal.var_a + t * t * cal.var_b + 2.0 * t * cal.cov_ab) / (b * b);
    let mut flags = Vec::new();
    if p - cal.intercept <= floor {
        flags.push(FLAG_NOISE_FLOOR.to_string());
    }
    if t < cal.range.0 || t > cal.range.1 {
        flags.push(FLAG_EXTRAPOLATED.to_string());
    }
    Ok(TemperatureReading {
        temperature_k: t,
        sigma_k: var.max(0.0).sqrt(),
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEpoch {
    pub start_index: usize,
    pub end_index: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Largest |T - rolling median| in units of the robust sigma.
    pub max_deviation: f64,
}

/// Excursions more than `n_sigma` robust standard deviations away from a
/// rolling median of `window` points. Nothing is removed.
pub fn flag_spikes(series: &TemperatureSeries, window: usize, n_sigma: f64) -> Result<Vec<SpikeEpoch>> {
    let t = series.temperatures();
    let n = t.len();
    if window < 3 || n < window {
        return Err(Error::InsufficientData(format!("{n} points for a rolling window of {window}")));
    }
    let half = window / 2;
    let med: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            stats::median(&t[lo..hi])
        })
        .collect();
    let dev: Vec<f64> = t.iter().zip(&med).map(|(a, b)| a - b).collect();
    let abs: Vec<f64> = dev.iter().map(|d| d.abs()).collect();
    let sigma = 1.4826 * stats::median(&abs);
    let mut out: Vec<SpikeEpoch> = Vec::new();
    if sigma == 0.0 {
        return Ok(out);
    }
    let times = series.times();
    for i in 0..n {
        let z = abs[i] / sigma;
        if z <= n_sigma {
            continue;
        }
        match out.last_mut() {
            Some(e) if e.end_index + 1 == i => {
                e.end_index = i;
                e.t_end = times[i];
                e.max_deviation = e.max_deviation.max(z);
            }
            _ => out.push(SpikeEpoch {
                start_index: i,
                end_index: i,
                t_start: times[i],
                t_end: times[i],
                max_deviation: z,
            }),
        }
    }
    Ok(out)
}
