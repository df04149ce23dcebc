//! Two-stage SQUID readout circuit: flux transfer function, phase-response
//! calibration fit, conversion factor and volts-to-displacement conversion.
//!
//! Interfaces take cyclic frequencies in Hz; angular frequencies are used
//! internally.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::TWO_PI;
use crate::error::{Error, Result};
use crate::sigio::SweepRecord;
use crate::stats::{self, levenberg_marquardt, BootstrapReport, Estimate, LmOptions};

/// Relative uncertainty assigned to the conversion factor `c`.
pub const DEFAULT_REL_SIGMA_C: f64 = 0.1;
/// SQUID flux-locked-loop transfer, V/Φ₀.
pub const DEFAULT_FLL_TRANSFER: f64 = 0.43;
pub const DEFAULT_GAIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    /// Primary (pick-up) loop total inductance, H.
    pub l1: f64,
    /// Secondary loop total inductance, H.
    pub l2: f64,
    /// Transformer mutual inductance, H.
    pub m12: f64,
    /// SQUID input coupling, Φ₀/A.
    pub m_in: f64,
    /// Calibration-coil mutual inductance, H (if characterised).
    #[serde(default)]
    pub m_cal: Option<f64>,
    /// Displacement-to-flux coupling, Wb/m.
    pub alpha: f64,
    /// Bare cantilever stiffness, N/m.
    pub k0: f64,
    /// Oscillator mass, kg.
    pub mass: f64,
    /// FLL transfer function, V/Φ₀.
    #[serde(default = "default_fll")]
    pub fll_transfer: f64,
    /// Post-amplifier voltage gain.
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_fll() -> f64 {
    DEFAULT_FLL_TRANSFER
}

fn default_gain() -> f64 {
    DEFAULT_GAIN
}

impl CircuitParams {
    /// Inductances and magnet of the described setup; `alpha` is chosen so
    /// that the coupling reproduces `beta` at `f0`, and `k0` so that the
    /// loaded stiffness equals `m (2 pi f0)^2`.
    pub fn reference_setup(f0: f64, beta: f64) -> Result<Self> {
        let (mass, k) = mass_and_stiffness(3.65e-6, 7600.0, f0)?;
        let mut p = CircuitParams {
            l1: 4e-9,
            l2: 760e-9,
            m12: 5e-9,
            m_in: 2e6,
            m_cal: None,
            alpha: 0.0,
            k0: k,
            mass,
            fll_transfer: DEFAULT_FLL_TRANSFER,
            gain: DEFAULT_GAIN,
        };
        let eta = p.eta();
        let omega0 = TWO_PI * f0;
        p.alpha = beta * omega0 * (mass * p.l1 * eta / (1.0 - eta)).sqrt();
        p.k0 = k + p.alpha * p.alpha / p.l1;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        pos("l1", self.l1)?;
        pos("l2", self.l2)?;
        pos("m_in", self.m_in)?;
        pos("mass", self.mass)?;
        pos("fll_transfer", self.fll_transfer)?;
        pos("gain", self.gain)?;
        if let Some(m) = self.m_cal {
            pos("m_cal", m)?;
        }
        if !(self.m12 >= 0.0 && self.m12.is_finite()) {
            return Err(Error::invalid("m12 must be non-negative"));
        }
        if self.m12 * self.m12 >= self.l1 * self.l2 {
            return Err(Error::invalid("m12^2 must be below l1*l2"));
        }
        if !(self.alpha.is_finite() && self.k0.is_finite()) {
            return Err(Error::invalid("alpha and k0 must be finite"));
        }
        Ok(())
    }

    /// Flux-coupling efficiency `1 - M12^2 / (L1 L2)`.
    pub fn eta(&self) -> f64 {
        1.0 - self.m12 * self.m12 / (self.l1 * self.l2)
    }

    /// Stiffness softened by the pick-up loop, `k0 - alpha^2 / L1`.
    pub fn loaded_stiffness(&self) -> f64 {
        self.k0 - self.alpha * self.alpha / self.l1
    }

    /// `delta^2 = alpha^2 / (m L1) * (1 - eta) / eta`.
    pub fn delta_squared(&self) -> f64 {
        let eta = self.eta();
        self.alpha * self.alpha / (self.mass * self.l1) * (1.0 - eta) / eta
    }

    /// Readout sensitivity `delta / omega0` implied by the circuit.
    pub fn coupling_beta(&self, f0: f64) -> f64 {
        self.delta_squared().sqrt() / (TWO_PI * f0)
    }

    /// Flux injected by a calibration current, Wb.
    pub fn calibration_flux(&self, current: f64) -> Option<f64> {
        self.m_cal.map(|m| m * current)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedCircuit {
    pub eta: f64,
    /// Stiffness `m omega0^2`, N/m.
    pub k: f64,
    /// rad/s
    pub omega0: f64,
    /// rad/s
    pub delta: f64,
    pub beta: f64,
    pub q: f64,
    /// Damping rate `omega0 / Q`, rad/s.
    pub gamma: f64,
    /// Conversion factor `M_in sqrt(k / (eta L2))`, Φ₀/m.
    pub c: f64,
}

impl DerivedCircuit {
    pub fn f0(&self) -> f64 {
        self.omega0 / TWO_PI
    }

    /// Flux through the SQUID per unit displacement, `c * beta`, Φ₀/m.
    pub fn flux_per_meter(&self) -> f64 {
        self.c * self.beta
    }

    /// `T(omega) = Phi2 / Phi_cal`.
    pub fn transfer_function(&self, f: f64) -> Complex64 {
        let w = TWO_PI * f;
        let w02 = self.omega0 * self.omega0;
        let num = Complex64::new(w02 - w * w, self.gamma * w);
        let den = Complex64::new(w02 - self.delta * self.delta - w * w, self.gamma * w);
        num / den / self.eta
    }
}

/// Derived circuit quantities at resonance `f0` with quality factor `q`.
/// Without `beta` the coupling implied by `alpha` is used.
pub fn derive(params: &CircuitParams, f0: f64, q: f64, beta: Option<f64>) -> Result<DerivedCircuit> {
    params.validate()?;
    if !(f0 > 0.0 && q > 0.0) {
        return Err(Error::invalid("f0 and q must be positive"));
    }
    let eta = params.eta();
    if eta <= 0.0 {
        return Err(Error::invalid(format!("eta = {eta} is not positive")));
    }
    let omega0 = TWO_PI * f0;
    let beta = beta.unwrap_or_else(|| params.coupling_beta(f0));
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta must be non-negative"));
    }
    let k = params.mass * omega0 * omega0;
    let c = params.m_in * (k / (eta * params.l2)).sqrt();
    Ok(DerivedCircuit {
        eta,
        k,
        omega0,
        delta: beta * omega0,
        beta,
        q,
        gamma: omega0 / q,
        c,
    })
}

/// Mass of a spherical magnet of radius `r` and density `rho`, and the
/// stiffness giving resonance `f0`.
pub fn mass_and_stiffness(r: f64, rho: f64, f0: f64) -> Result<(f64, f64)> {
    if !(r > 0.0 && rho > 0.0 && f0 > 0.0) {
        return Err(Error::invalid("radius, density and frequency must be positive"));
    }
    let m = 4.0 * std::f64::consts::PI / 3.0 * r.powi(3) * rho;
    let w = TWO_PI * f0;
    Ok((m, m * w * w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSign {
    Positive,
    /// Cantilever response flipped by pi (a dip instead of a peak).
    Negative,
}

impl ResponseSign {
    pub fn factor(self) -> f64 {
        match self {
            ResponseSign::Positive => 1.0,
            ResponseSign::Negative => -1.0,
        }
    }
}

/// Cantilever part of the calibration phase response (no drift), radians.
/// Uses `atan2` so the result is continuous through resonance.
pub fn cantilever_phase(f: f64, f0: f64, q: f64, beta: f64) -> f64 {
    let u = f / f0;
    let one_minus_u2 = ((f0 - f) / f0) * (1.0 + u);
    let b2 = beta * beta;
    let num = q * b2 * u;
    let den = q * q * one_minus_u2 * (one_minus_u2 - b2) + u * u;
    num.atan2(den)
}

/// Phase response plus the linear drift `drift_slope * f + drift_offset`.
pub fn phase_model(f: f64, f0: f64, q: f64, beta: f64, drift_slope: f64, drift_offset: f64) -> f64 {
    cantilever_phase(f, f0, q, beta) + drift_slope * f + drift_offset
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseModel {
    pub f0: f64,
    pub q: f64,
    pub beta: f64,
    /// rad/Hz
    pub drift_slope: f64,
    /// rad
    pub drift_offset: f64,
    pub sign: ResponseSign,
}

impl PhaseModel {
    pub fn eval(&self, f: f64) -> f64 {
        self.sign.factor() * cantilever_phase(f, self.f0, self.q, self.beta) + self.drift_slope * f + self.drift_offset
    }
}

/// Phase-vs-frequency sweep of the readout response to a constant-amplitude
/// calibration flux.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSweep {
    pub frequencies: Vec<f64>,
    pub phase: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub drive_amplitude: f64,
    pub n_averaged: usize,
}

impl CalibrationSweep {
    /// Validates monotone frequencies and unwraps the phase.
    pub fn new(
        frequencies: Vec<f64>,
        phase: Vec<f64>,
        amplitude: Vec<f64>,
        drive_amplitude: f64,
        n_averaged: usize,
    ) -> Result<Self> {
        if frequencies.len() < 8 {
            return Err(Error::InsufficientData("calibration sweep needs at least 8 points".into()));
        }
        if phase.len() != frequencies.len() || amplitude.len() != frequencies.len() {
            return Err(Error::invalid("sweep columns differ in length"));
        }
        crate::sigio::check_finite(&frequencies)?;
        crate::sigio::check_finite(&phase)?;
        crate::sigio::check_finite(&amplitude)?;
        let up = frequencies[1] > frequencies[0];
        if !frequencies
            .windows(2)
            .all(|w| if up { w[1] > w[0] } else { w[1] < w[0] })
        {
            return Err(Error::invalid("sweep frequencies must be strictly monotone"));
        }
        Ok(Self {
            frequencies,
            phase: unwrap_phase(&phase),
            amplitude,
            drive_amplitude,
            n_averaged: n_averaged.max(1),
        })
    }

    pub fn from_record(rec: &SweepRecord) -> Result<Self> {
        Self::new(
            rec.frequencies.clone(),
            rec.phase.clone(),
            rec.amplitude.clone(),
            rec.drive_amplitude,
            rec.n_averaged,
        )
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Removes 2 pi jumps between consecutive samples.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(phase.len());
    let mut offset = 0.0f64;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p + offset - out[i - 1];
            if d > std::f64::consts::PI {
                offset -= TWO_PI * ((d + std::f64::consts::PI) / TWO_PI).floor();
            } else if d < -std::f64::consts::PI {
                offset += TWO_PI * ((-d + std::f64::consts::PI) / TWO_PI).floor();
            }
        }
        out.push(p + offset);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub beta: Estimate,
    pub q: Estimate,
    pub f0: Estimate,
    pub drift_slope: Estimate,
    pub drift_offset: Estimate,
    pub sign: ResponseSign,
    pub residual_rms: f64,
    pub n_points: usize,
    pub bootstrap: Option<BootstrapReport>,
}

impl CalibrationFit {
    pub fn model(&self) -> PhaseModel {
        PhaseModel {
            f0: self.f0.value,
            q: self.q.value,
            beta: self.beta.value,
            drift_slope: self.drift_slope.value,
            drift_offset: self.drift_offset.value,
            sign: self.sign,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PhaseGuess {
    beta: f64,
    q: f64,
    f0: f64,
    slope: f64,
    offset: f64,
    sign: ResponseSign,
}

fn moving_average(x: &[f64], half: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Straight-line baseline from the outer quarters of the sweep, then peak
/// location, height and half-maximum width of the detrended phase.
fn initial_guess(f: &[f64], phi: &[f64]) -> Result<PhaseGuess> {
    let n = f.len();
    let edge = (n / 4).max(2);
    let (mut ex, mut ey) = (Vec::new(), Vec::new());
    for i in (0..edge).chain(n - edge..n) {
        ex.push(f[i]);
        ey.push(phi[i]);
    }
    let base = stats::fit_line(&ex, &ey, None)?;
    let resid: Vec<f64> = (0..n).map(|i| phi[i] - base.eval(f[i])).collect();
    let half = (n / 200).max(1);
    let smooth = moving_average(&resid, half);
    let (imax, _) = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("non-empty");
    if imax < 2 || imax + 2 >= n {
        return Err(Error::ResonanceOutsideBand("phase extremum at the sweep edge".into()));
    }
    let sign = if smooth[imax] >= 0.0 {
        ResponseSign::Positive
    } else {
        ResponseSign::Negative
    };
    let s = sign.factor();
    let h = smooth[imax].abs();
    let diffs: Vec<f64> = resid.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let noise = stats::median(&diffs) / (0.6745 * 2f64.sqrt());
    if h < 3.0 * noise / (2 * half + 1) as f64 {
        return Err(Error::ResonanceOutsideBand("no resonance visible above the phase noise".into()));
    }
    let mut lo = imax;
    while lo > 0 && s * smooth[lo] > h / 2.0 {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && s * smooth[hi] > h / 2.0 {
        hi += 1;
    }
    let span = (f[n - 1] - f[0]).abs();
    let mut fwhm = (f[hi] - f[lo]).abs();
    if !(fwhm > 0.0) || lo == 0 || hi == n - 1 {
        fwhm = span / 20.0;
    }
    if fwhm > span / 4.0 {
        return Err(Error::ResonanceOutsideBand("no resonance narrower than the sweep".into()));
    }
    let f0 = f[imax];
    let q = f0 / fwhm;
    let beta = (h.tan() / q).sqrt();
    Ok(PhaseGuess {
        beta,
        q,
        f0,
        slope: base.slope,
        offset: base.intercept,
        sign,
    })
}

fn fit_phase(f: &[f64], phi: &[f64], start: &PhaseGuess) -> Result<(PhaseModel, f64, Vec<f64>)> {
    let n = f.len();
    let f_ref = 0.5 * (f[0] + f[n - 1]);
    let span = (f[n - 1] - f[0]).abs();
    let s = start.sign.factor();
    let a0 = start.offset + start.slope * f_ref;
    let height = start.q * start.beta * start.beta;
    let p0 = [start.beta, start.q, start.f0, start.slope, a0];
    let scale = vec![
        start.beta,
        start.q,
        start.f0 / start.q,
        height.max(1e-12) / span,
        height.max(1e-12),
    ];
    let opts = LmOptions {
        scale: Some(scale),
        ..Default::default()
    };
    let res = levenberg_marquardt(
        |p, r| {
            for i in 0..n {
                r[i] = s * cantilever_phase(f[i], p[2], p[1], p[0]) + p[3] * (f[i] - f_ref) + p[4] - phi[i];
            }
        },
        &p0,
        n,
        &opts,
    )?;
    let p = &res.params;
    if !(p[0].is_finite() && p[1] > 0.0) {
        return Err(Error::NonConvergence("phase fit left the physical region".into()));
    }
    let fmin = f[0].min(f[n - 1]);
    let fmax = f[0].max(f[n - 1]);
    if !(p[2] > fmin && p[2] < fmax) || p[2] / p[1] > span / 4.0 {
        return Err(Error::ResonanceOutsideBand(format!("fitted f0 = {} Hz", p[2])));
    }
    let model = PhaseModel {
        f0: p[2],
        q: p[1],
        beta: p[0].abs(),
        drift_slope: p[3],
        drift_offset: p[4] - p[3] * f_ref,
        sign: start.sign,
    };
    // linearised sigmas, offset transformed back to f = 0
    let c = &res.covariance;
    let var_off = c[4][4] + f_ref * f_ref * c[3][3] - 2.0 * f_ref * c[3][4];
    let sig = vec![res.sigma(0), res.sigma(1), res.sigma(2), res.sigma(3), var_off.max(0.0).sqrt()];
    Ok((model, (res.rss / n as f64).sqrt(), sig))
}

/// Nonlinear least-squares fit of the phase response with a linear drift.
/// Uncertainties come from a case-resampling bootstrap with `n_bootstrap`
/// replicas, or from the linearised covariance when `n_bootstrap` is zero.
pub fn fit_calibration_sweep(sweep: &CalibrationSweep, n_bootstrap: usize, seed: u64) -> Result<CalibrationFit> {
    let f = &sweep.frequencies;
    let phi = &sweep.phase;
    let guess = initial_guess(f, phi)?;
    let (model, rms, lin_sigma) = fit_phase(f, phi, &guess)?;

    let start = PhaseGuess {
        beta: model.beta,
        q: model.q,
        f0: model.f0,
        slope: model.drift_slope,
        offset: model.drift_offset,
        sign: model.sign,
    };
    let refit = |pts: &[(f64, f64)]| -> Result<Vec<f64>> {
        let mut pts = pts.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (ff, pp): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let (m, _, _) = fit_phase(&ff, &pp, &start)?;
        Ok(vec![m.beta, m.q, m.f0, m.drift_slope, m.drift_offset])
    };

    let (sig, report) = if n_bootstrap > 0 {
        let pts: Vec<(f64, f64)> = f.iter().copied().zip(phi.iter().copied()).collect();
        let rep = stats::bootstrap(
            &pts,
            &["beta", "q", "f0", "drift_slope", "drift_offset"],
            n_bootstrap,
            seed,
            refit,
        )?;
        (rep.parameters.iter().map(|p| p.std).collect::<Vec<_>>(), Some(rep))
    } else {
        (lin_sigma, None)
    };

    Ok(CalibrationFit {
        beta: Estimate::new(model.beta, sig[0]),
        q: Estimate::new(model.q, sig[1]),
        f0: Estimate::new(model.f0, sig[2]),
        drift_slope: Estimate::new(model.drift_slope, sig[3]),
        drift_offset: Estimate::new(model.drift_offset, sig[4]),
        sign: model.sign,
        residual_rms: rms,
        n_points: f.len(),
        bootstrap: report,
    })
}

/// Relative uncertainty contributions entering the displacement scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionUncertainty {
    pub rel_c: f64,
    pub rel_beta: f64,
    /// Statistical term of the voltage itself, if averaging.
    pub rel_stat: f64,
}

impl ConversionUncertainty {
    pub fn from_beta(beta: Estimate) -> Self {
        Self {
            rel_c: DEFAULT_REL_SIGMA_C,
            rel_beta: beta.relative_sigma(),
            rel_stat: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        (self.rel_c.powi(2) + self.rel_beta.powi(2) + self.rel_stat.powi(2)).sqrt()
    }
}

/// SQUID output voltage per metre of displacement, `fll * G * c * beta`.
pub fn volts_per_meter(derived: &DerivedCircuit, params: &CircuitParams) -> f64 {
    params.fll_transfer * params.gain * derived.c * derived.beta
}

/// `x = V / (fll * G * c * beta)` with the quadrature-combined relative
/// uncertainty.
pub fn volts_to_displacement(
    v: f64,
    derived: &DerivedCircuit,
    params: &CircuitParams,
    unc: &ConversionUncertainty,
) -> Result<Estimate> {
    if derived.beta == 0.0 {
        return Err(Error::invalid("beta = 0: displacement is not observable"));
    }
    let x = v / volts_per_meter(derived, params);
    Ok(Estimate::new(x, x.abs() * unc.total()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_params() -> CircuitParams {
        let (mass, k) = mass_and_stiffness(3.65e-6, 7600.0, 653.0).unwrap();
        CircuitParams {
            l1: 4e-9,
            l2: 760e-9,
            m12: 5e-9,
            m_in: 2e6,
            m_cal: None,
            alpha: 1e-9,
            k0: k,
            mass,
            fll_transfer: 0.43,
            gain: 10.0,
        }
    }

    #[test]
    fn zero_coupling_limit() {
        let mut p = reference_params();
        p.m12 = 0.0;
        let d = derive(&p, 653.0, 1e4, None).unwrap();
        assert_eq!(d.eta, 1.0);
        assert_eq!(d.delta, 0.0);
        assert_eq!(d.beta, 0.0);
        let t = d.transfer_function(650.0);
        assert!((t - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn golden_constants() {
        let p = reference_params();
        let d = derive(&p, 653.0, 1e4, Some(3.69e-4)).unwrap();
        assert!((d.eta - 0.99178).abs() < 1e-4);
        assert!((p.mass * 1e3 - 1.54e-9).abs() / 1.54e-9 < 0.01);
        assert!((d.k - 2.6e-5).abs() / 2.6e-5 < 0.02);
        let c_per_nm = d.c * 1e-9;
        assert!((c_per_nm - 0.012).abs() / 0.012 < 0.05, "{c_per_nm}");
    }

    #[test]
    fn conversion_factor_from_quoted_values() {
        // c = M_in sqrt(k / (eta L2)) evaluated by hand: 2e6 * sqrt(2.6e-5 / (0.99 * 760e-9))
        let by_hand = 2e6 * (2.6e-5f64 / (0.99 * 760e-9)).sqrt() * 1e-9;
        assert!((by_hand - 0.0118).abs() < 1e-4);
    }

    #[test]
    fn mass_scaling() {
        let (m1, _) = mass_and_stiffness(1e-6, 1000.0, 1.0).unwrap();
        let (m2, _) = mass_and_stiffness(2e-6, 1000.0, 1.0).unwrap();
        assert!((m2 / m1 - 8.0).abs() < 1e-12);
        assert!(mass_and_stiffness(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn phase_edge_cases() {
        for &f in &[600.0, 653.0, 700.0] {
            assert_eq!(phase_model(f, 653.0, 3e4, 0.0, 1e-3, 0.2), 1e-3 * f + 0.2);
        }
        let (q, b) = (37000.0, 3.77e-5);
        let at = phase_model(653.17, 653.17, q, b, 0.0, 0.0);
        assert!((at - (q * b * b).atan()).abs() < 1e-15);
    }

    #[test]
    fn phase_peak_height_and_width() {
        let (f0, q, b) = (653.0, 2e4, 1e-4);
        let h = q * b * b;
        let peak = (0..20001)
            .map(|i| phase_model(f0 - 0.1 + i as f64 * 1e-5, f0, q, b, 0.0, 0.0))
            .fold(f64::MIN, f64::max);
        assert!((peak - h).abs() / h < 1e-3);
        let gamma_hz = f0 / q;
        let half = phase_model(f0 + gamma_hz / 2.0, f0, q, b, 0.0, 0.0);
        assert!((half / h - 0.5).abs() < 0.01);
    }

    #[test]
    fn phase_matches_transfer_function_argument() {
        let p = reference_params();
        let d = derive(&p, 653.0, 500.0, Some(0.02)).unwrap();
        for i in 0..200 {
            let f = 640.0 + i as f64 * 0.13;
            let arg = -d.transfer_function(f).arg();
            let model = cantilever_phase(f, 653.0, 500.0, 0.02);
            assert!((arg - model).abs() < 1e-9, "{f}: {arg} vs {model}");
        }
    }

    #[test]
    fn phase_is_continuous_for_strong_coupling() {
        // Q beta^2 = 10: the tangent's denominator changes sign twice
        let (f0, q, b) = (653.0, 1e3, 0.1);
        let mut prev = phase_model(600.0, f0, q, b, 0.0, 0.0);
        let mut crossed = false;
        for i in 1..200_000 {
            let f = 600.0 + i as f64 * 5e-4;
            let cur = phase_model(f, f0, q, b, 0.0, 0.0);
            assert!((cur - prev).abs() < std::f64::consts::FRAC_PI_2);
            crossed |= cur > std::f64::consts::FRAC_PI_2;
            prev = cur;
        }
        assert!(crossed);
    }

    fn grid_sweep(f0: f64, q: f64, beta: f64, slope: f64, offset: f64, n: usize) -> CalibrationSweep {
        let gamma = f0 / q;
        let f: Vec<f64> = (0..n)
            .map(|i| f0 - 15.0 * gamma + 30.0 * gamma * i as f64 / (n - 1) as f64)
            .collect();
        let phi: Vec<f64> = f.iter().map(|&x| phase_model(x, f0, q, beta, slope, offset)).collect();
        CalibrationSweep::new(f.clone(), phi, vec![1.0; n], 1.0, 1).unwrap()
    }

    #[test]
    fn noiseless_inversion() {
        let sw = grid_sweep(653.17, 37000.0, 3.77e-5, 2e-4, -0.13, 401);
        let fit = fit_calibration_sweep(&sw, 0, 0).unwrap();
        assert!((fit.beta.value / 3.77e-5 - 1.0).abs() < 1e-8);
        assert!((fit.q.value / 37000.0 - 1.0).abs() < 1e-8);
        assert!((fit.f0.value / 653.17 - 1.0).abs() < 1e-8);
        assert_eq!(fit.sign, ResponseSign::Positive);
    }

    #[test]
    fn flipped_response_is_fitted_with_negative_sign() {
        let (f0, q, b) = (653.11, 18500.0, 3.69e-4);
        let n = 301;
        let gamma = f0 / q;
        let f: Vec<f64> = (0..n).map(|i| f0 - 10.0 * gamma + 20.0 * gamma * i as f64 / 300.0).collect();
        let model = PhaseModel {
            f0,
            q,
            beta: b,
            drift_slope: 0.0,
            drift_offset: 3.0,
            sign: ResponseSign::Negative,
        };
        let phi: Vec<f64> = f.iter().map(|&x| model.eval(x)).collect();
        let sw = CalibrationSweep::new(f, phi, vec![1.0; n], 1.0, 1).unwrap();
        let fit = fit_calibration_sweep(&sw, 0, 0).unwrap();
        assert_eq!(fit.sign, ResponseSign::Negative);
        assert!((fit.beta.value / b - 1.0).abs() < 1e-8);
    }

    #[test]
    fn resonance_outside_band() {
        let f: Vec<f64> = (0..200).map(|i| 600.0 + i as f64 * 0.01).collect();
        let phi: Vec<f64> = f.iter().map(|&x| phase_model(x, 653.0, 3e4, 1e-4, 1e-3, 0.0)).collect();
        let sw = CalibrationSweep::new(f, phi, vec![1.0; 200], 1.0, 1).unwrap();
        let r = fit_calibration_sweep(&sw, 0, 0);
        assert!(matches!(r, Err(Error::ResonanceOutsideBand(_))), "{r:?}");
    }

    #[test]
    fn displacement_conversion() {
        let p = reference_params();
        let mut d = derive(&p, 653.0, 1e4, Some(3.69e-4)).unwrap();
        d.c = 0.012e9;
        let unc = ConversionUncertainty {
            rel_c: 0.1,
            rel_beta: 0.008,
            rel_stat: 0.0,
        };
        assert_eq!(volts_to_displacement(0.0, &d, &p, &unc).unwrap().value, 0.0);
        let x = volts_to_displacement(1.0, &d, &p, &unc).unwrap();
        let by_hand_nm_per_v = 1.0 / (0.43 * 10.0 * 0.012 * 3.69e-4);
        assert!((x.value * 1e9 - by_hand_nm_per_v).abs() / by_hand_nm_per_v < 1e-12);
        assert!((x.value * 1e9 - 5.25e4).abs() / 5.25e4 < 0.001);
        assert!((x.sigma / x.value - 0.10032).abs() < 1e-5);
        d.beta = 0.0;
        assert!(volts_to_displacement(1.0, &d, &p, &unc).is_err());
    }

    #[test]
    fn reference_setup_reproduces_beta() {
        let p = CircuitParams::reference_setup(653.11, 3.69e-4).unwrap();
        assert!((p.coupling_beta(653.11) / 3.69e-4 - 1.0).abs() < 1e-12);
        let d = derive(&p, 653.11, 18500.0, None).unwrap();
        assert!((d.k - p.loaded_stiffness()).abs() / d.k < 1e-12);
    }

    proptest! {
        #[test]
        fn doubling_alpha_doubles_beta(alpha in 1e-12f64..1e-6, f0 in 100.0f64..2000.0) {
            let mut p = reference_params();
            p.alpha = alpha;
            let d1 = derive(&p, f0, 1e4, None).unwrap();
            p.alpha = 2.0 * alpha;
            let d2 = derive(&p, f0, 1e4, None).unwrap();
            prop_assert!((d2.beta / d1.beta - 2.0).abs() < 1e-12);
            prop_assert_eq!(d1.c, d2.c);
        }

        #[test]
        fn fit_is_left_inverse(lb in -5.0f64..-3.0, lq in 3.0f64..5.0) {
            let (beta, q) = (10f64.powf(lb), 10f64.powf(lq));
            let sw = grid_sweep(653.0, q, beta, -1e-4, 0.5, 241);
            let fit = fit_calibration_sweep(&sw, 0, 0).unwrap();
            prop_assert!((fit.beta.value / beta - 1.0).abs() < 1e-6);
            prop_assert!((fit.q.value / q - 1.0).abs() < 1e-6);
            prop_assert!((fit.f0.value / 653.0 - 1.0).abs() < 1e-9);
        }

        #[test]
        fn amplitude_scale_does_not_change_fit(scale in 1e-3f64..1e3) {
            let sw = grid_sweep(653.0, 2e4, 3e-4, 1e-3, 0.5, 241);
            let mut scaled = sw.clone();
            scaled.amplitude.iter_mut().for_each(|a| *a *= scale);
            scaled.drive_amplitude *= scale;
            let a = fit_calibration_sweep(&sw, 0, 0).unwrap();
            let b = fit_calibration_sweep(&scaled, 0, 0).unwrap();
            prop_assert!((a.beta.value / b.beta.value - 1.0).abs() < 1e-12);
            prop_assert!((a.q.value / b.q.value - 1.0).abs() < 1e-12);
        }
    }
}
