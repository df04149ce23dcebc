//! Thermal-motion extraction and cantilever thermometry.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::BOLTZMANN;
use crate::error::{Error, Result};
use crate::sigio::{PowerSpectrum, TemperatureSeries, TimeTrace};
use crate::stats::{self, fit_through_origin, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalPeakConfig {
    /// Hz
    #[serde(default = "d_window")]
    pub window: (f64, f64),
    /// Hz
    #[serde(default = "d_bin")]
    pub bin_width: f64,
    /// Zero-based index of the bin holding the peak.
    #[serde(default = "d_peak_bin")]
    pub peak_bin: usize,
    /// Coarsest accepted PSD resolution, Hz.
    #[serde(default = "d_max_df")]
    pub max_df: f64,
}

fn d_window() -> (f64, f64) {
    (652.0, 655.0)
}
fn d_bin() -> f64 {
    0.5
}
fn d_peak_bin() -> usize {
    2
}
fn d_max_df() -> f64 {
    1e-3
}

impl Default for ThermalPeakConfig {
    fn default() -> Self {
        Self {
            window: d_window(),
            bin_width: d_bin(),
            peak_bin: d_peak_bin(),
            max_df: d_max_df(),
        }
    }
}

impl ThermalPeakConfig {
    pub fn n_bins(&self) -> usize {
        ((self.window.1 - self.window.0) / self.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bins();
        if !(self.bin_width > 0.0 && self.window.1 > self.window.0) || n < 2 {
            return Err(Error::invalid("thermal window needs at least two positive-width bins"));
        }
        if ((self.window.1 - self.window.0) - n as f64 * self.bin_width).abs() > 1e-9 {
            return Err(Error::invalid("window is not a whole number of bins"));
        }
        if self.peak_bin >= n {
            return Err(Error::invalid("peak bin lies outside the window"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThermalFlag {
    NoiseFloor,
    Artifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalPeakResult {
    /// `<x^2>` of the peak, m^2.
    pub peak_power: f64,
    /// m^2/Hz
    pub background_level: f64,
    pub bin_integrals: Vec<f64>,
    pub temperature_k: f64,
    /// From the scatter of the noise-only bins.
    pub sigma_k: f64,
    pub flags: Vec<ThermalFlag>,
}

impl ThermalPeakResult {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Background-subtracted peak-bin integral of a displacement PSD (m^2/Hz)
/// converted to temperature through `k <x^2> = kB T`.
pub fn extract_thermal_peak(psd: &PowerSpectrum, cfg: &ThermalPeakConfig, k: f64) -> Result<ThermalPeakResult> {
    cfg.validate()?;
    if !(k > 0.0) {
        return Err(Error::invalid("stiffness must be positive"));
    }
    let df = psd.df();
    if df > cfg.max_df * (1.0 + 1e-9) {
        return Err(Error::invalid(format!(
            "PSD resolution {df} Hz is coarser than {} Hz",
            cfg.max_df
        )));
    }
    let f0 = psd.f_start();
    let tol = 1e-9 * df;
    if cfg.window.0 < f0 - tol || cfg.window.1 > psd.f_end() + tol {
        return Err(Error::BandOutsideGrid {
            f0: cfg.window.0,
            f1: cfg.window.1,
        });
    }
    let p = psd.psd();
    // grid points with lo <= f < hi
    let index = |f: f64| (((f - f0) / df) - 1e-7).ceil().max(0.0) as usize;
    let n_bins = cfg.n_bins();
    let integrals: Vec<f64> = (0..n_bins)
        .map(|b| {
            let lo = cfg.window.0 + b as f64 * cfg.bin_width;
            let (i0, i1) = (index(lo), index(lo + cfg.bin_width).min(p.len()));
            p[i0..i1].iter().sum::<f64>() * df
        })
        .collect();
    let mut flags = Vec::new();
    if integrals.iter().any(|v| !v.is_finite()) {
        flags.push(ThermalFlag::Artifact);
    }
    let others: Vec<f64> = integrals
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != cfg.peak_bin)
        .map(|(_, v)| *v)
        .collect();
    let bg = stats::mean(&others);
    let peak = integrals[cfg.peak_bin] - bg;
    if !(peak > 0.0) {
        flags.push(ThermalFlag::NoiseFloor);
    }
    let m = others.len() as f64;
    let sigma_peak = stats::std_dev(&others) * (1.0 + 1.0 / m).sqrt();
    Ok(ThermalPeakResult {
        peak_power: peak,
        background_level: bg / cfg.bin_width,
        bin_integrals: integrals,
        temperature_k: k * peak / BOLTZMANN,
        sigma_k: k * sigma_peak / BOLTZMANN,
        flags,
    })
}

/// Ring-down time `Q / (pi fc)`, s, with `fc` in Hz.
pub fn ring_down_time(q: f64, fc: f64) -> f64 {
    q / (std::f64::consts::PI * fc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterBand {
    pub tau: f64,
    pub delta_t: f64,
    /// Full width `4 delta_t`.
    pub band: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ScatterBand {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }
}

/// `delta_T = sqrt(tau / t_meas) * T_mean` and the `T_mean +- 2 delta_T` band.
pub fn expected_scatter(q: f64, fc: f64, t_meas: f64, t_mean: f64) -> Result<ScatterBand> {
    if !(q > 0.0 && fc > 0.0) {
        return Err(Error::invalid("Q and fc must be positive"));
    }
    let tau = ring_down_time(q, fc);
    if !(t_meas > tau) {
        return Err(Error::invalid(format!("t_meas = {t_meas} s does not exceed tau = {tau} s")));
    }
    let d = (tau / t_meas).sqrt() * t_mean;
    Ok(ScatterBand {
        tau,
        delta_t: d,
        band: 4.0 * d,
        lower: t_mean - 2.0 * d,
        upper: t_mean + 2.0 * d,
    })
}

/// `sqrt(4 kB T / k)`, m.
pub fn position_noise_bound(t: f64, k: f64) -> f64 {
    (4.0 * BOLTZMANN * t / k).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    /// Relative change of the rolling median that opens a new plateau.
    #[serde(default = "d_jump")]
    pub jump_fraction: f64,
    /// Consecutive points the change must persist for.
    #[serde(default = "d_sustain")]
    pub sustain: usize,
    #[serde(default = "d_median_window")]
    pub median_window: usize,
}

fn d_jump() -> f64 {
    0.1
}
fn d_sustain() -> usize {
    3
}
fn d_median_window() -> usize {
    3
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            jump_fraction: d_jump(),
            sustain: d_sustain(),
            median_window: d_median_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start_index: usize,
    /// Exclusive.
    pub end_index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub t_sample: f64,
}

/// Change-point detection on the sample temperature: a plateau ends where the
/// rolling median departs from the plateau median by more than
/// `jump_fraction` for `sustain` consecutive points.
pub fn detect_plateaus(series: &TemperatureSeries, cfg: &PlateauConfig) -> Result<Vec<Plateau>> {
    let t = series.temperatures();
    let n = t.len();
    if n == 0 {
        return Err(Error::EmptyPayload);
    }
    if cfg.sustain == 0 || cfg.jump_fraction <= 0.0 {
        return Err(Error::invalid("sustain >= 1 and jump_fraction > 0 required"));
    }
    let half = cfg.median_window / 2;
    let rm: Vec<f64> = (0..n)
        .map(|i| stats::median(&t[i.saturating_sub(half)..(i + half + 1).min(n)]))
        .collect();
    let times = series.times();
    let departs = |i: usize, level: f64| (rm[i] - level).abs() > cfg.jump_fraction * level.abs();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 1;
    while i < n {
        let level = stats::median(&t[start..i]);
        if i + cfg.sustain <= n && (i..i + cfg.sustain).all(|j| departs(j, level)) {
            out.push((start, i));
            start = i;
        }
        i += 1;
    }
    out.push((start, n));
    Ok(out
        .into_iter()
        .map(|(a, b)| Plateau {
            start_index: a,
            end_index: b,
            t_start: times[a],
            t_end: times[b - 1],
            t_sample: stats::median(&t[a..b]),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibrationConfig {
    pub q: f64,
    pub fc: f64,
    pub t_meas: f64,
    /// Points per test window.
    #[serde(default = "d_vib_window")]
    pub window: usize,
    /// Expected out-of-band fraction.
    #[serde(default = "d_expected")]
    pub expected_fraction: f64,
    /// One-sided significance in standard-normal units.
    #[serde(default = "d_sig")]
    pub significance: f64,
}

fn d_vib_window() -> usize {
    20
}
fn d_expected() -> f64 {
    0.05
}
fn d_sig() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub n_points: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub t_start: f64,
    pub t_end: f64,
    pub t_sample: f64,
    pub t_cantilever_mean: f64,
    pub delta_t_band: f64,
    pub out_of_band_fraction: f64,
    pub n_points: usize,
    pub flagged: Vec<FlaggedInterval>,
}

fn binomial_upper_tail(n: usize, k: usize, p: f64) -> f64 {
    // P(X >= k), summed directly (n is small)
    let mut term = (1.0 - p).powi(n as i32);
    let mut cdf = 0.0;
    for i in 0..k {
        cdf += term;
        term *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    (1.0 - cdf).max(0.0)
}

fn normal_upper_tail(z: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erfc
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc = poly * (-x * x).exp();
    let erfc = if x >= 0.0 { erfc } else { 2.0 - erfc };
    0.5 * erfc
}

/// Per-plateau scatter check of the cantilever temperature. Each plateau is
/// cut into disjoint windows of `cfg.window` points (the remainder joins the
/// last window); a window is flagged when its out-of-band count is
/// significant at `cfg.significance` under the binomial law with
/// probability `cfg.expected_fraction`.
pub fn flag_vibration_epochs(
    cantilever: &TemperatureSeries,
    plateaus: &[Plateau],
    cfg: &VibrationConfig,
) -> Result<Vec<PlateauReport>> {
    let alpha = normal_upper_tail(cfg.significance);
    let mut out = Vec::with_capacity(plateaus.len());
    for (pi, pl) in plateaus.iter().enumerate() {
        let pts: Vec<(f64, f64)> = cantilever
            .points
            .iter()
            .filter(|p| p.time_s >= pl.t_start && p.time_s <= pl.t_end)
            .map(|p| (p.time_s, p.temperature_k))
            .collect();
        if pts.len() < 10 {
            return Err(Error::PlateauTooShort {
                start: pi,
                len: pts.len(),
            });
        }
        let temps: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let mean = stats::median(&temps);
        let band = expected_scatter(cfg.q, cfg.fc, cfg.t_meas, mean)?;
        let out_of: Vec<bool> = temps.iter().map(|&t| !band.contains(t)).collect();
        let n_out = out_of.iter().filter(|&&o| o).count();
        let w = cfg.window.max(1).min(pts.len());
        let n_win = pts.len() / w;
        let mut flagged: Vec<FlaggedInterval> = Vec::new();
        for j in 0..n_win {
            let a = j * w;
            let b = if j + 1 == n_win { pts.len() } else { a + w };
            let k = out_of[a..b].iter().filter(|&&o| o).count();
            if k > 0 && binomial_upper_tail(b - a, k, cfg.expected_fraction) < alpha {
                match flagged.last_mut() {
                    Some(prev) if j > 0 && prev.t_end == pts[a - 1].0 => {
                        prev.t_end = pts[b - 1].0;
                        prev.n_points += b - a;
                        prev.n_out += k;
                    }
                    _ => flagged.push(FlaggedInterval {
                        t_start: pts[a].0,
                        t_end: pts[b - 1].0,
                        n_points: b - a,
                        n_out: k,
                    }),
                }
            }
        }
        out.push(PlateauReport {
            t_start: pl.t_start,
            t_end: pl.t_end,
            t_sample: pl.t_sample,
            t_cantilever_mean: stats::mean(&temps),
            delta_t_band: band.band,
            out_of_band_fraction: n_out as f64 / pts.len() as f64,
            n_points: pts.len(),
            flagged,
        });
    }
    Ok(out)
}

pub fn write_plateau_report(rows: &[PlateauReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("t_start,t_end,T_sample,T_cantilever_mean,delta_T_band,out_of_band_fraction,flags\n");
    for r in rows {
        let flags: Vec<String> = r
            .flagged
            .iter()
            .map(|f| format!("vibration:{}-{}", f.t_start, f.t_end))
            .collect();
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{},{}\n",
            r.t_start,
            r.t_end,
            r.t_sample,
            r.t_cantilever_mean,
            r.delta_t_band,
            r.out_of_band_fraction,
            flags.join("|")
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathPoint {
    pub t_sample: f64,
    pub t_cantilever: f64,
    /// Statistical uncertainty of `t_cantilever`, K.
    pub sigma_stat: f64,
    /// Relative calibration uncertainty of `t_cantilever`.
    pub rel_cal: f64,
}

impl BathPoint {
    pub fn sigma(&self) -> f64 {
        (self.sigma_stat.powi(2) + (self.rel_cal * self.t_cantilever).powi(2)).sqrt()
    }
}

/// Relative temperature uncertainty implied by the displacement scale:
/// `T ~ 1/(c beta)^2`.
pub fn calibration_rel_sigma(rel_c: f64, rel_beta: f64) -> f64 {
    2.0 * (rel_c * rel_c + rel_beta * rel_beta).sqrt()
}

/// Weighted least squares `T_cantilever = c T_sample` through the origin.
pub fn fit_bath_coupling(points: &[BathPoint]) -> Result<Estimate> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!("{} plateaus, need 3", points.len())));
    }
    let x: Vec<f64> = points.iter().map(|p| p.t_sample).collect();
    let y: Vec<f64> = points.iter().map(|p| p.t_cantilever).collect();
    let s: Vec<f64> = points.iter().map(BathPoint::sigma).collect();
    let sigma = if s.iter().all(|&v| v > 0.0) { Some(s.as_slice()) } else { None };
    let f = fit_through_origin(&x, &y, sigma)?;
    Ok(Estimate::new(f.slope, f.sigma_slope))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningConfig {
    /// Largest accepted sample-to-sample step in robust standard deviations
    /// of the first differences.
    #[serde(default = "d_jump_sigma")]
    pub max_jump_sigma: f64,
}

fn d_jump_sigma() -> f64 {
    12.0
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            max_jump_sigma: d_jump_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResult {
    pub accepted: bool,
    pub max_jump_sigma: f64,
    pub non_finite: bool,
}

pub fn screen_trace(trace: &TimeTrace, cfg: &ScreeningConfig) -> ScreenResult {
    let x = trace.samples();
    if x.iter().any(|v| !v.is_finite()) {
        return ScreenResult {
            accepted: false,
            max_jump_sigma: f64::INFINITY,
            non_finite: true,
        };
    }
    let d: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return ScreenResult {
            accepted: true,
            max_jump_sigma: 0.0,
            non_finite: false,
        };
    }
    let med = stats::median(&d);
    let abs: Vec<f64> = d.iter().map(|v| (v - med).abs()).collect();
    let sigma = 1.4826 * stats::median(&abs);
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let z = if sigma > 0.0 {
        max / sigma
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    ScreenResult {
        accepted: z <= cfg.max_jump_sigma,
        max_jump_sigma: z,
        non_finite: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub accepted: Vec<usize>,
    pub excluded: Vec<usize>,
}

pub fn screen_traces(traces: &[TimeTrace], cfg: &ScreeningConfig) -> ScreeningReport {
    let (mut accepted, mut excluded) = (Vec::new(), Vec::new());
    for (i, t) in traces.iter().enumerate() {
        if screen_trace(t, cfg).accepted {
            accepted.push(i);
        } else {
            excluded.push(i);
        }
    }
    ScreeningReport { accepted, excluded }
}
