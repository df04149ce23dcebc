//! Welch power-spectral-density estimation and spectrum averaging.
//!
//! The estimate is one-sided with density normalization: for a zero-mean
//! signal, `sum(psd) * df` equals the window-weighted mean square of the
//! segments, which reduces to the signal variance for broadband input.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigio::{PowerSpectrum, TimeTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hamming,
    Hann,
    Rect,
}

impl Window {
    /// Periodic (DFT-even) window coefficients.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let step = std::f64::consts::TAU / n as f64;
        (0..n)
            .map(|i| match self {
                Window::Hamming => 0.54 - 0.46 * (step * i as f64).cos(),
                Window::Hann => 0.5 - 0.5 * (step * i as f64).cos(),
                Window::Rect => 1.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detrend {
    None,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub window: Window,
    pub detrend: Detrend,
}

impl WelchConfig {
    /// Hamming window, 50 % overlap, mean detrend, with
    /// `segment_length = round(sample_rate / df)`.
    pub fn from_resolution(sample_rate: f64, df: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && df > 0.0 && sample_rate.is_finite() && df.is_finite()) {
            return Err(Error::invalid("sample_rate and df must be positive"));
        }
        let mut segment_length = (sample_rate / df).round() as usize;
        // keep the 50 % overlap integral
        if segment_length % 2 == 1 {
            segment_length += 1;
        }
        let cfg = Self {
            segment_length,
            overlap_fraction: 0.5,
            window: Window::Hamming,
            detrend: Detrend::Mean,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 8 {
            return Err(Error::invalid(format!(
                "segment_length must be >= 8, got {}",
                self.segment_length
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid("overlap_fraction must lie in [0, 1)"));
        }
        let ov = self.overlap_fraction * self.segment_length as f64;
        if (ov - ov.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "overlap_fraction * segment_length = {ov} is not an integer"
            )));
        }
        Ok(())
    }

    pub fn overlap_samples(&self) -> usize {
        (self.overlap_fraction * self.segment_length as f64).round() as usize
    }

    pub fn hop(&self) -> usize {
        self.segment_length - self.overlap_samples()
    }

    pub fn n_segments(&self, len: usize) -> usize {
        if len < self.segment_length {
            0
        } else {
            (len - self.segment_length) / self.hop() + 1
        }
    }
}

// Segments are reduced in fixed-size groups so the summation order does not
// depend on the thread pool.
const SEGMENT_GROUP: usize = 4;

struct SegmentEngine {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    detrend: Detrend,
    n: usize,
}

impl SegmentEngine {
    fn accumulate(&self, seg: &[f64], buf: &mut [Complex64], scratch: &mut [Complex64], acc: &mut [f64]) {
        let mean = match self.detrend {
            Detrend::Mean => seg.iter().sum::<f64>() / self.n as f64,
            Detrend::None => 0.0,
        };
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        self.fft.process_with_scratch(buf, scratch);
        for (a, b) in acc.iter_mut().zip(buf.iter()) {
            *a += b.norm_sqr();
        }
    }
}

/// Welch estimate of the one-sided PSD of `trace`.
pub fn welch_psd(trace: &TimeTrace, config: &WelchConfig) -> Result<PowerSpectrum> {
    config.validate()?;
    let n = config.segment_length;
    let x = trace.samples();
    let n_seg = config.n_segments(x.len());
    if n_seg == 0 {
        return Err(Error::TraceTooShort {
            len: x.len(),
            segment: n,
        });
    }
    let hop = config.hop();
    let n_bins = n / 2 + 1;
    let fs = trace.sample_rate();

    let mut planner = FftPlanner::<f64>::new();
    let engine = SegmentEngine {
        fft: planner.plan_fft_forward(n),
        window: config.window.coefficients(n),
        detrend: config.detrend,
        n,
    };
    let scratch_len = engine.fft.get_inplace_scratch_len();

    let groups: Vec<usize> = (0..n_seg).step_by(SEGMENT_GROUP).collect();
    let partials: Vec<Vec<f64>> = groups
        .par_iter()
        .map(|&g0| {
            let mut acc = vec![0.0; n_bins];
            let mut buf = vec![Complex64::default(); n];
            let mut scratch = vec![Complex64::default(); scratch_len];
            for s in g0..(g0 + SEGMENT_GROUP).min(n_seg) {
                let start = s * hop;
                engine.accumulate(&x[start..start + n], &mut buf, &mut scratch, &mut acc);
            }
            acc
        })
        .collect();

    let mut psd = vec![0.0; n_bins];
    for p in &partials {
        for (a, b) in psd.iter_mut().zip(p) {
            *a += b;
        }
    }

    let s2: f64 = engine.window.iter().map(|w| w * w).sum();
    let scale = 1.0 / (fs * s2 * n_seg as f64);
    let nyquist = if n % 2 == 0 { Some(n / 2) } else { None };
    for (k, p) in psd.iter_mut().enumerate() {
        let one_sided = if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
        *p *= scale * one_sided;
    }
    PowerSpectrum::new(0.0, fs / n as f64, psd, n_seg)
}

/// Pointwise mean of spectra sharing one grid. Masks are merged.
pub fn average_psds(spectra: &[PowerSpectrum]) -> Result<PowerSpectrum> {
    let first = spectra
        .first()
        .ok_or_else(|| Error::InsufficientData("no spectra to average".into()))?;
    if spectra.iter().any(|s| !first.same_grid(s)) {
        return Err(Error::GridMismatch);
    }
    let m = spectra.len() as f64;
    let mut psd = vec![0.0; first.len()];
    for s in spectra {
        for (a, b) in psd.iter_mut().zip(s.psd()) {
            *a += b;
        }
    }
    psd.iter_mut().for_each(|p| *p /= m);
    let n_averaged = spectra.iter().map(PowerSpectrum::n_averaged).sum();
    let mut mask: Vec<f64> = spectra.iter().flat_map(|s| s.mask().iter().copied()).collect();
    mask.sort_by(f64::total_cmp);
    mask.dedup();
    PowerSpectrum::from_parts(first.frequencies().to_vec(), psd, first.df(), n_averaged, mask)
}
