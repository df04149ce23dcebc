//! Seeded forward models: flux-noise traces, thermal motion of the
//! cantilever, calibration and driven frequency sweeps.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::circuit::{cantilever_phase, CalibrationSweep, ResponseSign};
use crate::constants::{BOLTZMANN, TWO_PI};
use crate::error::{Error, Result};
use crate::mfft::MfftTheoryParams;
use crate::sigio::{Channel, PowerSpectrum, SweepDirection, SweepRecord, TimeTrace};
use crate::stats::{seeded_rng, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceLine {
    /// Hz
    pub frequency: f64,
    /// Peak amplitude in trace units.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shaping {
    /// Exact component amplitudes `sqrt(2 S df)` with uniform random phases.
    #[default]
    RandomPhase,
    /// Complex Gaussian coefficients with variance `S df / 2`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfftNoiseScenario {
    pub theory: MfftTheoryParams,
    /// White SQUID floor, Φ₀/sqrt(Hz).
    #[serde(default = "d_floor")]
    pub floor: f64,
    #[serde(default)]
    pub lines: Vec<InterferenceLine>,
    pub duration: f64,
    pub sample_rate: f64,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default)]
    pub shaping: Shaping,
    pub seed: u64,
}

fn d_floor() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalScenario {
    /// K
    pub temperature: f64,
    pub q: f64,
    /// Hz
    pub f0: f64,
    /// N/m
    pub k: f64,
    pub duration: f64,
    pub sample_rate: f64,
    /// White readout floor, m/sqrt(Hz).
    #[serde(default)]
    pub readout_floor: f64,
    /// Output in volts when set, otherwise in metres.
    #[serde(default)]
    pub volts_per_meter: Option<f64>,
    /// Start at rest at this displacement instead of a stationary draw.
    #[serde(default)]
    pub initial_displacement: Option<f64>,
    #[serde(default)]
    pub start_time: f64,
    pub seed: u64,
}

impl ThermalScenario {
    pub fn mass(&self) -> f64 {
        self.k / (TWO_PI * self.f0).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSweepScenario {
    pub beta: f64,
    pub q: f64,
    pub f0: f64,
    #[serde(default)]
    pub drift_slope: f64,
    #[serde(default)]
    pub drift_offset: f64,
    #[serde(default = "d_sign")]
    pub sign: ResponseSign,
    pub f_start: f64,
    pub f_stop: f64,
    pub n_points: usize,
    /// Phase noise of one sweep, rad.
    pub phase_noise: f64,
    /// Averaged sweeps; the noise shrinks by `sqrt(n_averaged)`.
    #[serde(default = "d_one")]
    pub n_averaged: usize,
    /// Relative amplitude-gain drift across the sweep.
    #[serde(default)]
    pub gain_drift: f64,
    #[serde(default = "d_drive")]
    pub drive_amplitude: f64,
    pub seed: u64,
}

fn d_sign() -> ResponseSign {
    ResponseSign::Positive
}
fn d_one() -> usize {
    1
}
fn d_drive() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPlan {
    Up,
    Down,
    /// Up, then back down over the same grid.
    RoundTrip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivenSweepScenario {
    pub f0: f64,
    pub q: f64,
    /// Peak displacement amplitude, m.
    pub amplitude: f64,
    #[serde(default)]
    pub background: f64,
    /// Additive amplitude noise, m rms.
    #[serde(default)]
    pub noise: f64,
    pub f_start: f64,
    pub f_stop: f64,
    pub n_points: usize,
    #[serde(default = "d_plan")]
    pub plan: SweepPlan,
    /// Resonance shift seen by the down portion, Hz.
    #[serde(default)]
    pub hysteresis_shift: f64,
    #[serde(default)]
    pub temperature_k: Option<f64>,
    #[serde(default = "d_drive")]
    pub drive_amplitude: f64,
    #[serde(default)]
    pub start_time: f64,
    pub seed: u64,
}

fn d_plan() -> SweepPlan {
    SweepPlan::RoundTrip
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthScenario {
    MfftNoise(MfftNoiseScenario),
    CalibrationSweep(CalibrationSweepScenario),
    DrivenSweep(DrivenSweepScenario),
    ThermalMotion(ThermalScenario),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthOutput {
    Trace(TimeTrace),
    Sweep(SweepRecord),
}

pub fn run_scenario(s: &SynthScenario) -> Result<SynthOutput> {
    Ok(match s {
        SynthScenario::MfftNoise(m) => SynthOutput::Trace(synth_mfft_trace(m)?),
        SynthScenario::ThermalMotion(t) => SynthOutput::Trace(synth_thermal_trace(t)?),
        SynthScenario::CalibrationSweep(c) => {
            let sw = synth_calibration_sweep(c)?;
            SynthOutput::Sweep(SweepRecord {
                frequencies: sw.frequencies,
                amplitude: sw.amplitude,
                phase: sw.phase,
                direction: None,
                drive_amplitude: sw.drive_amplitude,
                start_time: 0.0,
                n_averaged: sw.n_averaged,
                temperature_k: None,
            })
        }
        SynthScenario::DrivenSweep(d) => SynthOutput::Sweep(synth_driven_sweep(d)?),
    })
}

fn sample_count(duration: f64, sample_rate: f64) -> Result<usize> {
    if !(duration > 0.0 && sample_rate > 0.0 && duration.is_finite() && sample_rate.is_finite()) {
        return Err(Error::invalid("duration and sample_rate must be positive"));
    }
    let n = (duration * sample_rate).round() as usize;
    if n < 2 {
        return Err(Error::invalid("scenario yields fewer than 2 samples"));
    }
    Ok(n)
}

fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Real signal of length `n` whose one-sided PSD follows `density(f)`.
pub fn shaped_noise(
    n: usize,
    sample_rate: f64,
    density: impl Fn(f64) -> f64,
    shaping: Shaping,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let df = sample_rate / n as f64;
    let mut spec = vec![Complex64::default(); n];
    let top = (n - 1) / 2;
    for k in 1..=top {
        let s = density(k as f64 * df).max(0.0);
        let c = match shaping {
            Shaping::RandomPhase => {
                let phi = rng.random::<f64>() * TWO_PI;
                Complex64::from_polar(0.5 * (2.0 * s * df).sqrt(), phi)
            }
            Shaping::Gaussian => {
                let sd = (s * df / 4.0).sqrt();
                Complex64::new(sd * normal(rng), sd * normal(rng))
            }
        };
        spec[k] = c;
        spec[n - k] = c.conj();
    }
    if n % 2 == 0 {
        // Nyquist bin carries a real cosine
        let s = density(sample_rate / 2.0).max(0.0);
        let a = match shaping {
            Shaping::RandomPhase => (s * df).sqrt() * if rng.random::<bool>() { 1.0 } else { -1.0 },
            Shaping::Gaussian => (s * df).sqrt() * normal(rng),
        };
        spec[n / 2] = Complex64::new(a, 0.0);
    }
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

/// Flux trace (Φ₀) whose PSD is the theoretical thermal spectrum plus the
/// white floor, with sinusoidal interference lines on top.
pub fn synth_mfft_trace(s: &MfftNoiseScenario) -> Result<TimeTrace> {
    let n = sample_count(s.duration, s.sample_rate)?;
    if !(s.theory.temperature >= 0.0 && s.floor >= 0.0) {
        return Err(Error::invalid("temperature and floor must be non-negative"));
    }
    if s.theory.temperature > 0.0 {
        s.theory.validate()?;
    } else {
        s.theory.with_temperature(1.0).validate()?;
    }
    let mut rng = seeded_rng(s.seed);
    let floor2 = s.floor * s.floor;
    let theory = &s.theory;
    let mut x = shaped_noise(n, s.sample_rate, |f| theory.density(f) + floor2, s.shaping, &mut rng);
    for line in &s.lines {
        let phi = rng.random::<f64>() * TWO_PI;
        let w = TWO_PI * line.frequency / s.sample_rate;
        for (i, v) in x.iter_mut().enumerate() {
            *v += line.amplitude * (w * i as f64 + phi).sin();
        }
    }
    TimeTrace::new(x, s.sample_rate, s.start_time, Channel::MfftSquid)
}

/// One-step propagator and noise factor of the damped oscillator.
#[derive(Debug, Clone, Copy)]
pub struct OscillatorStep {
    pub phi: [[f64; 2]; 2],
    /// Lower Cholesky factor of the one-step noise covariance.
    pub chol: [[f64; 2]; 2],
}

/// Exact discretisation over `h` of `x'' + (w0/Q) x' + w0^2 x = F/m` with
/// white force noise at temperature `t`.
pub fn oscillator_step(f0: f64, q: f64, k: f64, t: f64, h: f64) -> Result<OscillatorStep> {
    if !(q > 0.5) {
        return Err(Error::UnstableDiscretization(format!("Q = {q} is not underdamped")));
    }
    if !(f0 > 0.0 && h > 0.0 && f0 * h < 0.5) {
        return Err(Error::UnstableDiscretization(format!(
            "f0 = {f0} Hz is not below the Nyquist frequency {} Hz",
            0.5 / h
        )));
    }
    let w0 = TWO_PI * f0;
    let a = w0 / (2.0 * q);
    let wd = w0 * (1.0 - 1.0 / (4.0 * q * q)).sqrt();
    let (s, c) = (wd * h).sin_cos();
    let e = (-a * h).exp();
    let phi = [
        [e * (c + a / wd * s), e * s / wd],
        [-e * w0 * w0 * s / wd, e * (c - a / wd * s)],
    ];
    let m = k / (w0 * w0);
    let (sx, sv) = (BOLTZMANN * t / k, BOLTZMANN * t / m);
    // Sigma_h = Sigma_inf - Phi Sigma_inf Phi^T
    let s11 = sx - (phi[0][0] * phi[0][0] * sx + phi[0][1] * phi[0][1] * sv);
    let s12 = -(phi[0][0] * phi[1][0] * sx + phi[0][1] * phi[1][1] * sv);
    let s22 = sv - (phi[1][0] * phi[1][0] * sx + phi[1][1] * phi[1][1] * sv);
    let l11 = s11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { s12 / l11 } else { 0.0 };
    let l22 = (s22 - l21 * l21).max(0.0).sqrt();
    Ok(OscillatorStep {
        phi,
        chol: [[l11, 0.0], [l21, l22]],
    })
}

/// Displacement (or voltage) trace of the thermally driven cantilever plus
/// a white readout floor.
pub fn synth_thermal_trace(s: &ThermalScenario) -> Result<TimeTrace> {
    let n = sample_count(s.duration, s.sample_rate)?;
    if !(s.temperature >= 0.0 && s.k > 0.0 && s.readout_floor >= 0.0) {
        return Err(Error::invalid("temperature, k and readout floor must be valid"));
    }
    let h = 1.0 / s.sample_rate;
    let step = oscillator_step(s.f0, s.q, s.k, s.temperature, h)?;
    let mut rng = seeded_rng(s.seed);
    let (mut x, mut v) = match s.initial_displacement {
        Some(x0) => (x0, 0.0),
        None => {
            let sx = (BOLTZMANN * s.temperature / s.k).sqrt();
            let sv = (BOLTZMANN * s.temperature / s.mass()).sqrt();
            (sx * normal(&mut rng), sv * normal(&mut rng))
        }
    };
    let noisy = s.temperature > 0.0;
    let floor_sd = s.readout_floor * (s.sample_rate / 2.0).sqrt();
    let scale = s.volts_per_meter.unwrap_or(1.0);
    let p = step.phi;
    let l = step.chol;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = if floor_sd > 0.0 { floor_sd * normal(&mut rng) } else { 0.0 };
        out.push((x + r) * scale);
        let (nx, nv) = (p[0][0] * x + p[0][1] * v, p[1][0] * x + p[1][1] * v);
        if noisy {
            let (z1, z2) = (normal(&mut rng), normal(&mut rng));
            x = nx + l[0][0] * z1;
            v = nv + l[1][0] * z1 + l[1][1] * z2;
        } else {
            x = nx;
            v = nv;
        }
    }
    TimeTrace::new(out, s.sample_rate, s.start_time, Channel::ReadoutSquid)
}

fn grid(f_start: f64, f_stop: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(f_start > 0.0 && f_stop > 0.0) || f_start == f_stop {
        return Err(Error::invalid("sweep grid needs n >= 2 and distinct positive limits"));
    }
    Ok((0..n)
        .map(|i| f_start + (f_stop - f_start) * i as f64 / (n - 1) as f64)
        .collect())
}

/// Phase response plus Gaussian phase noise; the amplitude channel is the
/// modulus of the flux transfer function times a slowly drifting gain.
pub fn synth_calibration_sweep(s: &CalibrationSweepScenario) -> Result<CalibrationSweep> {
    let f = grid(s.f_start, s.f_stop, s.n_points)?;
    if !(s.beta >= 0.0 && s.q > 0.0 && s.f0 > 0.0 && s.phase_noise >= 0.0 && s.n_averaged >= 1) {
        return Err(Error::invalid("invalid calibration sweep scenario"));
    }
    let mut rng = seeded_rng(s.seed);
    let sd = s.phase_noise / (s.n_averaged as f64).sqrt();
    let sign = s.sign.factor();
    let w0 = TWO_PI * s.f0;
    let (gamma, delta) = (w0 / s.q, s.beta * w0);
    let n = f.len();
    let mut phase = Vec::with_capacity(n);
    let mut amplitude = Vec::with_capacity(n);
    for (i, &fi) in f.iter().enumerate() {
        let p = sign * cantilever_phase(fi, s.f0, s.q, s.beta) + s.drift_slope * fi + s.drift_offset;
        phase.push(p + if sd > 0.0 { sd * normal(&mut rng) } else { 0.0 });
        let w = TWO_PI * fi;
        let t = Complex64::new(w0 * w0 - w * w, gamma * w) / Complex64::new(w0 * w0 - delta * delta - w * w, gamma * w);
        let gain = 1.0 + s.gain_drift * i as f64 / (n - 1) as f64;
        amplitude.push(s.drive_amplitude * t.norm() * gain);
    }
    CalibrationSweep::new(f, phase, amplitude, s.drive_amplitude, s.n_averaged)
}

/// Steady-state response of the driven oscillator, normalised so that the
/// peak displacement is `amplitude`.
pub fn driven_response(f: f64, f0: f64, q: f64, amplitude: f64) -> Complex64 {
    let (w, w0) = (TWO_PI * f, TWO_PI * f0);
    let g = w0 / q;
    amplitude * g * w0 / Complex64::new(w0 * w0 - w * w, g * w)
}

pub fn synth_driven_sweep(s: &DrivenSweepScenario) -> Result<SweepRecord> {
    if !(s.q > 0.5 && s.f0 > 0.0 && s.amplitude >= 0.0 && s.noise >= 0.0) {
        return Err(Error::invalid("invalid driven sweep scenario"));
    }
    let up = grid(s.f_start.min(s.f_stop), s.f_start.max(s.f_stop), s.n_points)?;
    let mut legs: Vec<(Vec<f64>, f64)> = Vec::new();
    match s.plan {
        SweepPlan::Up => legs.push((up, 0.0)),
        SweepPlan::Down => legs.push((up.into_iter().rev().collect(), s.hysteresis_shift)),
        SweepPlan::RoundTrip => {
            let down: Vec<f64> = up.iter().rev().copied().collect();
            legs.push((up, 0.0));
            legs.push((down, s.hysteresis_shift));
        }
    }
    let mut rng = seeded_rng(s.seed);
    let mut rec = SweepRecord {
        frequencies: Vec::new(),
        amplitude: Vec::new(),
        phase: Vec::new(),
        direction: match s.plan {
            SweepPlan::Up => Some(SweepDirection::Up),
            SweepPlan::Down => Some(SweepDirection::Down),
            SweepPlan::RoundTrip => None,
        },
        drive_amplitude: s.drive_amplitude,
        start_time: s.start_time,
        n_averaged: 1,
        temperature_k: s.temperature_k,
    };
    for (f, shift) in legs {
        for fi in f {
            let x = driven_response(fi, s.f0 + shift, s.q, s.amplitude);
            let noise = if s.noise > 0.0 { s.noise * normal(&mut rng) } else { 0.0 };
            rec.frequencies.push(fi);
            rec.amplitude.push((x.norm() + s.background + noise).abs());
            rec.phase.push(-x.arg());
        }
    }
    Ok(rec)
}

/// Draws an averaged PSD on the grid of `target`: each bin is
/// `S * Gamma(n_avg, 1/n_avg)`, the law of a mean of `n_avg` independent
/// periodogram ordinates. `lines` add `(frequency, extra PSD)` to the nearest
/// bin before the draw.
pub fn synth_averaged_spectrum(
    target: &PowerSpectrum,
    n_averaged: usize,
    lines: &[(f64, f64)],
    rng: &mut SeededRng,
) -> Result<PowerSpectrum> {
    if n_averaged == 0 {
        return Err(Error::invalid("n_averaged must be >= 1"));
    }
    let mut s = target.psd().to_vec();
    for &(f, extra) in lines {
        let i = target
            .index_of(f)
            .ok_or_else(|| Error::invalid(format!("line at {f} Hz lies off the grid")))?;
        s[i] += extra;
    }
    let g = Gamma::new(n_averaged as f64, 1.0 / n_averaged as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let psd = s.iter().map(|&v| v * g.sample(rng)).collect();
    PowerSpectrum::new(target.f_start(), target.df(), psd, n_averaged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::fit_calibration_sweep;
    use crate::mfft::{detect_interference, GeometryG, InterferenceConfig};
    use crate::spectral::{welch_psd, WelchConfig};
    use crate::stats;

    fn mfft_scenario(t: f64, floor: f64, seed: u64) -> MfftNoiseScenario {
        MfftNoiseScenario {
            theory: MfftTheoryParams {
                sigma: 1e9,
                radius: 1e-4,
                mu0: crate::constants::MU0,
                temperature: t,
                geometry: GeometryG::SinglePole {
                    g0: 0.098,
                    cutoff_hz: 500.0,
                },
            },
            floor,
            lines: vec![],
            duration: 16.0,
            sample_rate: 8000.0,
            start_time: 0.0,
            shaping: Shaping::RandomPhase,
            seed,
        }
    }

    #[test]
    fn zero_temperature_and_floor_is_silent() {
        let tr = synth_mfft_trace(&mfft_scenario(0.0, 0.0, 1)).unwrap();
        assert!(tr.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_mfft_trace(&mfft_scenario(0.01, 1e-6, 4)).unwrap();
        let b = synth_mfft_trace(&mfft_scenario(0.01, 1e-6, 4)).unwrap();
        assert_eq!(a, b);
        let c = synth_mfft_trace(&mfft_scenario(0.01, 1e-6, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn welch_matches_theory_per_50hz_bin() {
        // Gaussian coefficients: 16 s x 50 Hz is at most 800 independent
        // components per bin, so about 4 % scatter after windowing
        for (shaping, tol) in [(Shaping::RandomPhase, 0.05), (Shaping::Gaussian, 0.16)] {
            let mut sc = mfft_scenario(0.01, 1e-6, 7);
            sc.shaping = shaping;
            sc.duration = 16.0;
            let tr = synth_mfft_trace(&sc).unwrap();
            // 3.2 s segments at 50 % overlap: 9 averages
            let cfg = WelchConfig::from_resolution(8000.0, 1.0 / 3.2).unwrap();
            let psd = welch_psd(&tr, &cfg).unwrap();
            assert!(psd.n_averaged() >= 9);
            let floor2 = 1e-12;
            let f = psd.frequencies();
            let mut b = 50.0;
            let mut ratios = Vec::new();
            while b + 50.0 <= 3000.0 {
                let idx: Vec<usize> = (0..f.len()).filter(|&i| f[i] >= b && f[i] < b + 50.0).collect();
                let est = stats::mean(&idx.iter().map(|&i| psd.psd()[i]).collect::<Vec<_>>());
                let th = stats::mean(&idx.iter().map(|&i| sc.theory.density(f[i]) + floor2).collect::<Vec<_>>());
                assert!((est / th - 1.0).abs() < tol, "{shaping:?} {b} Hz: {}", est / th);
                ratios.push(est / th);
                b += 50.0;
            }
            assert!((stats::mean(&ratios) - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn injected_lines_are_masked() {
        let cfg = WelchConfig::from_resolution(8000.0, 1.0).unwrap();
        let spectra: Vec<PowerSpectrum> = (0..40)
            .map(|i| {
                let mut sc = mfft_scenario(0.01, 1e-6, 100 + i);
                sc.duration = 8.0;
                sc.lines = vec![InterferenceLine {
                    frequency: 150.0,
                    amplitude: 2e-5,
                }];
                welch_psd(&synth_mfft_trace(&sc).unwrap(), &cfg).unwrap()
            })
            .collect();
        let mask = detect_interference(&spectra, &InterferenceConfig::default()).unwrap();
        assert!(mask.contains(150.0), "{:?}", mask.frequencies);
    }

    fn thermal(t: f64, q: f64, seed: u64, duration: f64) -> ThermalScenario {
        ThermalScenario {
            temperature: t,
            q,
            f0: 653.0,
            k: 2.6e-5,
            duration,
            sample_rate: 5000.0,
            readout_floor: 0.0,
            volts_per_meter: None,
            initial_displacement: None,
            start_time: 0.0,
            seed,
        }
    }

    #[test]
    fn equipartition_monte_carlo() {
        // t_meas = 100 tau with Q = 1e3
        let tau = 1e3 / (std::f64::consts::PI * 653.0);
        let mut acc = 0.0;
        let n_seeds = 400;
        for seed in 0..n_seeds {
            let tr = synth_thermal_trace(&thermal(0.29, 1e3, seed, 100.0 * tau)).unwrap();
            let x = tr.samples();
            acc += x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        }
        let t = 2.6e-5 * acc / n_seeds as f64 / BOLTZMANN;
        assert!((t / 0.29 - 1.0).abs() < 0.02, "{t}");
    }

    #[test]
    fn undamped_limit_is_a_sinusoid() {
        let mut sc = thermal(0.0, 1e15, 0, 2.0);
        sc.initial_displacement = Some(1e-9);
        let tr = synth_thermal_trace(&sc).unwrap();
        let x = tr.samples();
        for (i, &v) in x.iter().enumerate().step_by(97) {
            let want = 1e-9 * (TWO_PI * 653.0 * i as f64 / 5000.0).cos();
            assert!((v - want).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn bad_discretization() {
        let mut sc = thermal(0.1, 1e4, 0, 1.0);
        sc.sample_rate = 1000.0;
        assert!(matches!(synth_thermal_trace(&sc), Err(Error::UnstableDiscretization(_))));
        let sc = thermal(0.1, 0.3, 0, 1.0);
        assert!(matches!(synth_thermal_trace(&sc), Err(Error::UnstableDiscretization(_))));
    }

    fn cal(noise: f64, n_avg: usize, seed: u64) -> CalibrationSweepScenario {
        CalibrationSweepScenario {
            beta: 3.69e-4,
            q: 18500.0,
            f0: 653.11,
            drift_slope: 2e-3,
            drift_offset: -1.0,
            sign: ResponseSign::Positive,
            f_start: 652.6,
            f_stop: 653.6,
            n_points: 501,
            phase_noise: noise,
            n_averaged: n_avg,
            gain_drift: 0.05,
            drive_amplitude: 1.0,
            seed,
        }
    }

    #[test]
    fn calibration_sweep_inverts_and_averages() {
        let sw = synth_calibration_sweep(&cal(0.0, 1, 0)).unwrap();
        let fit = fit_calibration_sweep(&sw, 0, 0).unwrap();
        assert!((fit.beta.value / 3.69e-4 - 1.0).abs() < 1e-8);
        assert!((fit.drift_slope.value - 2e-3).abs() < 1e-9);
        let clean = synth_calibration_sweep(&cal(0.0, 1, 3)).unwrap();
        let one = synth_calibration_sweep(&cal(1e-3, 1, 3)).unwrap();
        let many = synth_calibration_sweep(&cal(1e-3, 24, 3)).unwrap();
        let sd = |s: &CalibrationSweep| {
            let d: Vec<f64> = s.phase.iter().zip(&clean.phase).map(|(a, b)| a - b).collect();
            stats::std_dev(&d)
        };
        let ratio = sd(&one) / sd(&many);
        assert!((ratio / 24f64.sqrt() - 1.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn drift_slope_recovered_within_ci() {
        let sw = synth_calibration_sweep(&cal(2e-4, 1, 12)).unwrap();
        let fit = fit_calibration_sweep(&sw, 200, 5).unwrap();
        assert!((fit.drift_slope.value - 2e-3).abs() < 3.0 * fit.drift_slope.sigma);
    }

    #[test]
    fn driven_round_trip_layout() {
        let s = DrivenSweepScenario {
            f0: 653.0,
            q: 4e4,
            amplitude: 1e-9,
            background: 0.0,
            noise: 0.0,
            f_start: 652.8,
            f_stop: 653.2,
            n_points: 401,
            plan: SweepPlan::RoundTrip,
            hysteresis_shift: 0.0,
            temperature_k: Some(0.002),
            drive_amplitude: 1.0,
            start_time: 0.0,
            seed: 0,
        };
        let rec = synth_driven_sweep(&s).unwrap();
        assert_eq!(rec.frequencies.len(), 802);
        let peak = rec.amplitude.iter().cloned().fold(0.0, f64::max);
        assert!((peak / 1e-9 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn averaged_spectrum_statistics() {
        let target = PowerSpectrum::new(0.0, 1.0, vec![2.0; 20001], 1).unwrap();
        let mut rng = seeded_rng(3);
        let s = synth_averaged_spectrum(&target, 10, &[(150.0, 40.0)], &mut rng).unwrap();
        let p = s.psd();
        let rest: Vec<f64> = p.iter().enumerate().filter(|(i, _)| *i != 150).map(|(_, v)| *v).collect();
        assert!((stats::mean(&rest) / 2.0 - 1.0).abs() < 0.01);
        assert!((stats::std_dev(&rest) / 2.0 - 10f64.sqrt().recip()).abs() < 0.01);
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = SynthScenario::MfftNoise(mfft_scenario(0.01, 1e-6, 1));
        let js = serde_json::to_string(&sc).unwrap();
        assert!(js.contains("\"kind\":\"mfft_noise\""));
        let back: SynthScenario = serde_json::from_str(&js).unwrap();
        assert_eq!(back, sc);
        let missing_seed = js.replace(",\"seed\":1", "");
        assert!(serde_json::from_str::<SynthScenario>(&missing_seed).is_err());
    }
}
