//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every tolerance is a named constant.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use cryotherm::circuit::{derive, fit_calibration_sweep, mass_and_stiffness, CircuitParams, ResponseSign};
use cryotherm::constants::{BOLTZMANN, MU0};
use cryotherm::mfft::{
    band_power, calibrate, detect_interference, temperature, CalibrationMode, GeometryG, InterferenceConfig,
    MfftTheoryParams, DEFAULT_BAND, FLAG_NOISE_FLOOR,
};
use cryotherm::resonator::{
    fit_power_law, force_noise, split_and_pool, DrivenSweep, LorentzianOptions, SweepGroup,
};
use cryotherm::sigio::{Channel, PowerSpectrum, TimeTrace};
use cryotherm::spectral::{welch_psd, Detrend, WelchConfig, Window};
use cryotherm::stats::{self, bootstrap, fit_line, pool_inverse_variance, seeded_rng, Estimate};
use cryotherm::synth::{
    synth_averaged_spectrum, synth_calibration_sweep, synth_driven_sweep, synth_mfft_trace, synth_thermal_trace,
    CalibrationSweepScenario, DrivenSweepScenario, InterferenceLine, MfftNoiseScenario, Shaping, SweepPlan,
    ThermalScenario,
};
use cryotherm::thermal::{expected_scatter, extract_thermal_peak, position_noise_bound, ThermalPeakConfig};
use cryotherm::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, limit: Duration, f: fn() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let el = t0.elapsed();
    let in_time = el <= limit;
    let pass = out.pass && in_time;
    println!(
        "{} criterion {id:>2} {name}: {} [{:.2} s, limit {} s{}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        el.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

// ---- 1 ---------------------------------------------------------------

const C1_R: f64 = 3.65e-6;
const C1_RHO: f64 = 7600.0;
const C1_F0: f64 = 653.0;
const C1_TOL_ETA: f64 = 0.005;
const C1_TOL_M: f64 = 0.01;
const C1_TOL_K: f64 = 0.02;
const C1_TOL_C: f64 = 0.05;
const C1_TOL_ORACLE: f64 = 1e-12;

fn circuit_constants() -> Outcome {
    let (mass, k0) = mass_and_stiffness(C1_R, C1_RHO, C1_F0).unwrap();
    let p = CircuitParams {
        l1: 4e-9,
        l2: 760e-9,
        m12: 5e-9,
        m_in: 2e6,
        m_cal: None,
        alpha: 1e-9,
        k0,
        mass,
        fll_transfer: 0.43,
        gain: 10.0,
    };
    let d = derive(&p, C1_F0, 1e4, Some(3.69e-4)).unwrap();
    // independent oracle
    let eta_o = 1.0 - 5e-9f64.powi(2) / (4e-9 * 760e-9);
    let m_o = 4.0 / 3.0 * PI * C1_R.powi(3) * C1_RHO;
    let k_o = m_o * (2.0 * PI * C1_F0).powi(2);
    let c_o = 2e6 * (k_o / (eta_o * 760e-9)).sqrt();
    let grams = mass * 1e3;
    let c_nm = d.c * 1e-9;
    let oracle_ok = rel(d.eta, eta_o) < C1_TOL_ORACLE
        && rel(mass, m_o) < C1_TOL_ORACLE
        && rel(d.k, k_o) < C1_TOL_ORACLE
        && rel(d.c, c_o) < C1_TOL_ORACLE;
    let pass = oracle_ok
        && rel(d.eta, 0.993) <= C1_TOL_ETA
        && rel(grams, 1.54e-9) <= C1_TOL_M
        && rel(d.k, 2.6e-5) <= C1_TOL_K
        && rel(c_nm, 0.012) <= C1_TOL_C;
    Outcome {
        pass,
        detail: format!(
            "eta {:.5} (0.993 +-{C1_TOL_ETA}), m {grams:.4e} g (1.54e-9 +-{C1_TOL_M}), k {:.4e} N/m (2.6e-5 +-{C1_TOL_K}), \
             c {c_nm:.5} Phi0/nm (0.012 +-{C1_TOL_C}), oracle match {oracle_ok}",
            d.eta, d.k
        ),
    }
}

// ---- 2 ---------------------------------------------------------------

const C2_TOL: f64 = 0.05;

fn force_noise_golden() -> Outcome {
    let v = force_noise(0.5e-3, 2.6e-5, 653.0, 5e4);
    let oracle = (4.0f64 * 1.380649e-23 * 0.5e-3 * 2.6e-5 / (2.0 * PI * 653.0 * 5e4)).sqrt();
    let pass = rel(v, 6e-20) <= C2_TOL && rel(v, oracle) < 1e-12;
    Outcome {
        pass,
        detail: format!("{v:.4e} N/sqrt(Hz) (6e-20 +-{C2_TOL}, oracle {oracle:.4e})"),
    }
}

// ---- 3 ---------------------------------------------------------------

const C3_TAU: f64 = 4.9;
const C3_TOL_TAU: f64 = 0.1;
const C3_BAND: f64 = 0.36;
const C3_TOL_BAND: f64 = 0.01;

fn scatter_band_golden() -> Outcome {
    let b = expected_scatter(1e4, 653.0, 600.0, 1.0).unwrap();
    let tau_o = 1e4 / (PI * 653.0);
    let band_o = 4.0 * (tau_o / 600.0).sqrt();
    let pass = (b.tau - C3_TAU).abs() <= C3_TOL_TAU
        && (b.band - C3_BAND).abs() <= C3_TOL_BAND
        && rel(b.tau, tau_o) < 1e-12
        && rel(b.band, band_o) < 1e-12;
    Outcome {
        pass,
        detail: format!(
            "tau {:.4} s ({C3_TAU} +-{C3_TOL_TAU}), 4dT/T {:.4} ({C3_BAND} +-{C3_TOL_BAND})",
            b.tau, b.band
        ),
    }
}

// ---- 4 ---------------------------------------------------------------

const C4_TOL: f64 = 0.05;

fn position_noise_golden() -> Outcome {
    let x = position_noise_bound(0.02, 2.6e-5);
    let oracle = (4.0f64 * 1.380649e-23 * 0.02 / 2.6e-5).sqrt();
    let pass = rel(x * 1e9, 0.20) <= C4_TOL && rel(x, oracle) < 1e-12;
    Outcome {
        pass,
        detail: format!("{:.4} nm (0.20 +-{C4_TOL})", x * 1e9),
    }
}

// ---- 5 ---------------------------------------------------------------

const C5_T: f64 = 0.29;
const C5_Q: f64 = 4e4;
const C5_F0: f64 = 653.25;
const C5_K: f64 = 2.6e-5;
const C5_T_MEAS: f64 = 1000.0;
const C5_FS: f64 = 5000.0;
const C5_FLOOR: f64 = 3e-11;
const C5_REPLICATES: u64 = 200;
const C5_MIN_FRACTION: f64 = 0.95;
const C5_INVARIANCE_REPLICATES: u64 = 5;
const C5_INVARIANCE_TOL: f64 = 0.02;
const C5_RMS_TOL: f64 = 0.02;

fn thermal_scenario(seed: u64, fs: f64) -> ThermalScenario {
    ThermalScenario {
        temperature: C5_T,
        q: C5_Q,
        f0: C5_F0,
        k: C5_K,
        duration: C5_T_MEAS,
        sample_rate: fs,
        readout_floor: C5_FLOOR,
        volts_per_meter: None,
        initial_displacement: None,
        start_time: 0.0,
        seed,
    }
}

/// One rectangular segment spanning the whole trace: 1 mHz bins, and the
/// band integral equals the time average of the band-passed motion.
fn thermal_welch(tr: &TimeTrace) -> WelchConfig {
    WelchConfig {
        segment_length: tr.len(),
        overlap_fraction: 0.0,
        window: Window::Rect,
        detrend: Detrend::Mean,
    }
}

fn recovered_t(tr: &TimeTrace) -> f64 {
    let psd = welch_psd(tr, &thermal_welch(tr)).unwrap();
    assert!(psd.df() <= 1e-3 + 1e-12);
    extract_thermal_peak(&psd, &ThermalPeakConfig::default(), C5_K)
        .unwrap()
        .temperature_k
}

fn thermal_closed_loop() -> Outcome {
    let band = expected_scatter(C5_Q, C5_F0, C5_T_MEAS, C5_T).unwrap();
    let rms_o = (BOLTZMANN * C5_T / C5_K).sqrt();
    let results: Vec<(f64, f64)> = (0..C5_REPLICATES)
        .into_par_iter()
        .map(|seed| {
            let tr = synth_thermal_trace(&thermal_scenario(seed, C5_FS)).unwrap();
            (recovered_t(&tr), stats::variance(tr.samples()))
        })
        .collect();
    let inside = results.iter().filter(|r| band.contains(r.0)).count();
    let frac = inside as f64 / C5_REPLICATES as f64;
    let ts: Vec<f64> = results.iter().map(|r| r.0).collect();
    // motion rms: total variance minus the white readout floor up to Nyquist
    let var: Vec<f64> = results.iter().map(|r| r.1).collect();
    let mean_rms = (stats::mean(&var) - C5_FLOOR * C5_FLOOR * C5_FS / 2.0).sqrt();

    let ratios: Vec<f64> = (0..C5_INVARIANCE_REPLICATES)
        .into_par_iter()
        .map(|i| {
            let fast = synth_thermal_trace(&thermal_scenario(10_000 + i, 2.0 * C5_FS)).unwrap();
            let slow = fast.decimate(2).unwrap();
            recovered_t(&slow) / recovered_t(&fast)
        })
        .collect();
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);

    let pass = frac >= C5_MIN_FRACTION && worst <= C5_INVARIANCE_TOL && rel(mean_rms, rms_o) <= C5_RMS_TOL;
    Outcome {
        pass,
        detail: format!(
            "{inside}/{C5_REPLICATES} inside [{:.4}, {:.4}] K (need >= {C5_MIN_FRACTION}), mean T {:.4} K, sd {:.4} K \
             vs dT {:.4} K, motion rms {:.3} nm (oracle {:.3} +-{C5_RMS_TOL}), 10->5 kHz worst |dT/T| {worst:.2e} (<= {C5_INVARIANCE_TOL})",
            band.lower,
            band.upper,
            stats::mean(&ts),
            stats::std_dev(&ts),
            band.delta_t,
            mean_rms * 1e9,
            rms_o * 1e9
        ),
    }
}

// ---- 6 ---------------------------------------------------------------

const C6_FS: f64 = 8000.0;
const C6_DURATION: f64 = 16.0;
const C6_DF: f64 = 1.0;
const C6_N_REF: usize = 81;
const C6_TARGETS: [f64; 3] = [0.6e-3, 2e-3, 100e-3];
const C6_TOL: f64 = 0.10;
const C6_LINE: InterferenceLine = InterferenceLine {
    frequency: 1234.0,
    amplitude: 1e-4,
};

fn mfft_scenario(t: f64, seed: u64) -> MfftNoiseScenario {
    MfftNoiseScenario {
        theory: MfftTheoryParams {
            sigma: 1e9,
            radius: 1e-4,
            mu0: MU0,
            temperature: t,
            geometry: GeometryG::SinglePole {
                g0: 0.098,
                cutoff_hz: 500.0,
            },
        },
        floor: 1e-6,
        lines: vec![C6_LINE],
        duration: C6_DURATION,
        sample_rate: C6_FS,
        start_time: 0.0,
        shaping: Shaping::RandomPhase,
        seed,
    }
}

fn mfft_spectrum(t: f64, seed: u64) -> PowerSpectrum {
    let tr = synth_mfft_trace(&mfft_scenario(t, seed)).unwrap();
    welch_psd(&tr, &WelchConfig::from_resolution(C6_FS, C6_DF).unwrap()).unwrap()
}

fn mfft_closed_loop() -> Outcome {
    let refs: Vec<(PowerSpectrum, f64)> = (0..C6_N_REF)
        .into_par_iter()
        .map(|i| {
            let t = 0.040 + 0.040 * i as f64 / (C6_N_REF - 1) as f64;
            (mfft_spectrum(t, i as u64), t)
        })
        .collect();
    let spectra: Vec<PowerSpectrum> = refs.iter().map(|r| r.0.clone()).collect();
    let mask = detect_interference(&spectra, &InterferenceConfig::default()).unwrap();
    let line_masked = mask.contains(C6_LINE.frequency);
    let pts: Vec<(f64, f64)> = refs
        .iter()
        .map(|(s, t)| (band_power(s, DEFAULT_BAND.0, DEFAULT_BAND.1, &mask).unwrap(), *t))
        .collect();
    let cal = calibrate(&pts, (0.040, 0.080), DEFAULT_BAND, CalibrationMode::Intercept).unwrap();
    let mut pass = line_masked;
    let mut parts = vec![format!("line masked {line_masked}, {} masked bins", mask.len())];
    for (j, &t) in C6_TARGETS.iter().enumerate() {
        let s = mfft_spectrum(t, 50_000 + j as u64);
        let p = band_power(&s, DEFAULT_BAND.0, DEFAULT_BAND.1, &mask).unwrap();
        match temperature(p, &cal) {
            Ok(r) => {
                let err = rel(r.temperature_k, t);
                let floor = r.flags.iter().any(|f| f == FLAG_NOISE_FLOOR);
                let ok = err <= C6_TOL || (j == 0 && floor);
                pass &= ok;
                parts.push(format!(
                    "{:.1} mK -> {:.4} +- {:.4} mK ({:+.1}%) flags {:?}",
                    t * 1e3,
                    r.temperature_k * 1e3,
                    r.sigma_k * 1e3,
                    (r.temperature_k / t - 1.0) * 100.0,
                    r.flags
                ));
            }
            Err(Error::BelowNoiseFloor { .. }) if j == 0 => {
                parts.push(format!("{:.1} mK -> below noise floor", t * 1e3));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{:.1} mK -> error {e}", t * 1e3));
            }
        }
    }
    Outcome {
        pass,
        detail: format!("{} (tol {C6_TOL})", parts.join("; ")),
    }
}

// ---- 7 ---------------------------------------------------------------

const C7_SCENARIOS: u64 = 50;
const C7_N_SPECTRA: usize = 1000;
const C7_N_AVG: usize = 10;
const C7_LINE_FACTOR: f64 = 20.0;
const C7_COMMON: [f64; 3] = [0.5, 0.75, 1.0];
const C7_RARE: [f64; 3] = [0.01, 0.015, 0.02];

fn mask_scenario(seed: u64) -> bool {
    let theory = MfftTheoryParams {
        sigma: 1e9,
        radius: 1e-4,
        mu0: MU0,
        temperature: 0.06,
        geometry: GeometryG::SinglePole {
            g0: 0.098,
            cutoff_hz: 500.0,
        },
    };
    let psd: Vec<f64> = (0..3001).map(|i| theory.density(i as f64) + 1e-12).collect();
    let target = PowerSpectrum::new(0.0, 1.0, psd, C7_N_AVG).unwrap();
    let mut rng = seeded_rng(seed);
    let mut freqs: Vec<f64> = Vec::new();
    while freqs.len() < C7_COMMON.len() + C7_RARE.len() {
        let f = rng.random_range(60..2990) as f64;
        if freqs.iter().all(|g| (g - f).abs() > 1.5) {
            freqs.push(f);
        }
    }
    let fractions: Vec<f64> = C7_COMMON.iter().chain(&C7_RARE).copied().collect();
    let mut present = vec![vec![false; C7_N_SPECTRA]; freqs.len()];
    for (l, frac) in fractions.iter().enumerate() {
        let m = (frac * C7_N_SPECTRA as f64).round() as usize;
        for i in rand::seq::index::sample(&mut rng, C7_N_SPECTRA, m) {
            present[l][i] = true;
        }
    }
    let spectra: Vec<PowerSpectrum> = (0..C7_N_SPECTRA)
        .map(|i| {
            let lines: Vec<(f64, f64)> = freqs
                .iter()
                .enumerate()
                .filter(|(l, _)| present[*l][i])
                .map(|(_, &f)| (f, C7_LINE_FACTOR * target.psd()[f as usize]))
                .collect();
            synth_averaged_spectrum(&target, C7_N_AVG, &lines, &mut rng).unwrap()
        })
        .collect();
    let mask = detect_interference(&spectra, &InterferenceConfig::default()).unwrap();
    let common_ok = freqs[..C7_COMMON.len()].iter().all(|&f| mask.contains(f));
    let rare_ok = freqs[C7_COMMON.len()..].iter().all(|&f| !mask.contains(f));
    common_ok && rare_ok
}

fn interference_mask_property() -> Outcome {
    let ok: Vec<bool> = (0..C7_SCENARIOS).into_par_iter().map(mask_scenario).collect();
    let n_ok = ok.iter().filter(|v| **v).count();
    Outcome {
        pass: n_ok as u64 == C7_SCENARIOS,
        detail: format!(
            "{n_ok}/{C7_SCENARIOS} scenarios correct (lines at {C7_LINE_FACTOR}x, occupancy {C7_COMMON:?} masked, \
             {C7_RARE:?} unmasked, {C7_N_SPECTRA} spectra, K = {C7_N_AVG})"
        ),
    }
}

// ---- 8 ---------------------------------------------------------------

struct CalCase {
    beta: f64,
    sigma_beta: f64,
    q: f64,
    sigma_q: f64,
    f0: f64,
    phase_noise: f64,
}

const C8_CASES: [CalCase; 2] = [
    CalCase {
        beta: 3.77e-5,
        sigma_beta: 0.02e-5,
        q: 37000.0,
        sigma_q: 500.0,
        f0: 653.17,
        phase_noise: 1e-6,
    },
    CalCase {
        beta: 3.69e-4,
        sigma_beta: 0.03e-4,
        q: 18500.0,
        sigma_q: 400.0,
        f0: 653.11,
        phase_noise: 1e-4,
    },
];
const C8_RUNS: u64 = 100;
const C8_N_BOOT: usize = 200;
const C8_HALF_SPAN: f64 = 0.5;
const C8_N_POINTS: usize = 501;
const C8_SIGMA_FACTOR: f64 = 2.0;
const C8_N_SIGMA: f64 = 3.0;
const C8_MIN_FRACTION: f64 = 0.95;

fn calibration_recovery() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for c in &C8_CASES {
        let res: Vec<(f64, f64, f64, f64)> = (0..C8_RUNS)
            .into_par_iter()
            .map(|seed| {
                let s = CalibrationSweepScenario {
                    beta: c.beta,
                    q: c.q,
                    f0: c.f0,
                    drift_slope: 2e-3,
                    drift_offset: -1.0,
                    sign: ResponseSign::Positive,
                    f_start: c.f0 - C8_HALF_SPAN,
                    f_stop: c.f0 + C8_HALF_SPAN,
                    n_points: C8_N_POINTS,
                    phase_noise: c.phase_noise,
                    n_averaged: 1,
                    gain_drift: 0.05,
                    drive_amplitude: 1.0,
                    seed,
                };
                let fit = fit_calibration_sweep(&synth_calibration_sweep(&s).unwrap(), C8_N_BOOT, seed).unwrap();
                (fit.beta.value, fit.beta.sigma, fit.q.value, fit.q.sigma)
            })
            .collect();
        let sb = stats::median(&res.iter().map(|r| r.1).collect::<Vec<_>>());
        let sq = stats::median(&res.iter().map(|r| r.3).collect::<Vec<_>>());
        let within = res
            .iter()
            .filter(|r| (r.0 - c.beta).abs() <= C8_N_SIGMA * r.1 && (r.2 - c.q).abs() <= C8_N_SIGMA * r.3)
            .count();
        let frac = within as f64 / C8_RUNS as f64;
        let factor_ok = |s: f64, quoted: f64| s / quoted <= C8_SIGMA_FACTOR && quoted / s <= C8_SIGMA_FACTOR;
        let ok = frac >= C8_MIN_FRACTION && factor_ok(sb, c.sigma_beta) && factor_ok(sq, c.sigma_q);
        pass &= ok;
        parts.push(format!(
            "beta {:.2e}: median sigma {sb:.2e} (quoted {:.0e}), Q {}: median sigma {sq:.0} (quoted {}), \
             {within}/{C8_RUNS} within {C8_N_SIGMA} sigma",
            c.beta, c.sigma_beta, c.q, c.sigma_q
        ));
    }
    Outcome {
        pass,
        detail: format!("{} (need >= {C8_MIN_FRACTION}, sigma factor {C8_SIGMA_FACTOR})", parts.join("; ")),
    }
}

// ---- 9 ---------------------------------------------------------------

const C9_ALPHA: f64 = 0.19;
const C9_TOL: f64 = 0.02;
const C9_N_TEMPERATURES: usize = 25;
const C9_T_RANGE: (f64, f64) = (1.5e-3, 70e-3);
const C9_Q_AT_2MK: f64 = 37000.0;
const C9_AMPLITUDE: f64 = 1e-9;
const C9_NOISE: f64 = 0.045 * C9_AMPLITUDE;
const C9_SEEDS: u64 = 20;

fn power_law_run(seed: u64) -> (f64, f64) {
    let (lo, hi) = C9_T_RANGE;
    let groups: Vec<SweepGroup> = (0..C9_N_TEMPERATURES)
        .map(|i| {
            let t = lo * (hi / lo).powf(i as f64 / (C9_N_TEMPERATURES - 1) as f64);
            let q = C9_Q_AT_2MK * (t / 2e-3).powf(-C9_ALPHA);
            let f0 = 653.0;
            let gamma = f0 / q;
            let s = DrivenSweepScenario {
                f0,
                q,
                amplitude: C9_AMPLITUDE,
                background: 0.0,
                noise: C9_NOISE,
                f_start: f0 - 8.0 * gamma,
                f_stop: f0 + 8.0 * gamma,
                n_points: 201,
                plan: SweepPlan::RoundTrip,
                hysteresis_shift: 0.0,
                temperature_k: Some(t),
                drive_amplitude: 1.0,
                start_time: 0.0,
                seed: seed * 1000 + i as u64,
            };
            let rec = synth_driven_sweep(&s).unwrap();
            SweepGroup {
                temperature_k: t,
                sigma_t: 0.0,
                sweeps: DrivenSweep::from_record(&rec, 1.0).unwrap(),
            }
        })
        .collect();
    let opts = LorentzianOptions {
        n_bootstrap: 0,
        seed,
        ..LorentzianOptions::default()
    };
    let pts = split_and_pool(&groups, &opts).unwrap();
    let fit = fit_power_law(&pts).unwrap();
    (fit.alpha.value, fit.residual_sd)
}

fn power_law_recovery() -> Outcome {
    let res: Vec<(f64, f64)> = (0..C9_SEEDS).into_par_iter().map(power_law_run).collect();
    let worst = res.iter().map(|r| (r.0 - C9_ALPHA).abs()).fold(0.0, f64::max);
    let scatter = stats::mean(&res.iter().map(|r| r.1).collect::<Vec<_>>());
    Outcome {
        pass: worst <= C9_TOL,
        detail: format!(
            "{C9_SEEDS} seeded runs of {C9_N_TEMPERATURES} temperatures, worst |alpha - {C9_ALPHA}| {worst:.4} \
             (<= {C9_TOL}), first alpha {:.4}, mean log-Q scatter {:.2}%",
            res[0].0,
            scatter * 100.0
        ),
    }
}

// ---- 10 --------------------------------------------------------------

const C10_EXACT: f64 = 1e-12;
const C10_BOOT_TOL: f64 = 0.20;
const C10_N: usize = 60;
const C10_RESAMPLES: usize = 2000;

fn statistical_kernels() -> Outcome {
    let cases: [(&[(f64, f64)], f64, f64); 3] = [
        (&[(1.0, 1.0), (3.0, 1.0)], 2.0, 1.0 / 2f64.sqrt()),
        (&[(10.0, 2.0), (20.0, 1.0)], 18.0, 1.0 / 1.25f64.sqrt()),
        (&[(5.0, 0.5)], 5.0, 0.5),
    ];
    let mut worst_pool: f64 = 0.0;
    for (est, v, s) in cases {
        let e: Vec<Estimate> = est.iter().map(|&(a, b)| Estimate::new(a, b)).collect();
        let p = pool_inverse_variance(&e).unwrap();
        worst_pool = worst_pool.max((p.value - v).abs()).max((p.sigma - s).abs());
    }
    let mut worst_boot: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = seeded_rng(seed);
        let data: Vec<(f64, f64)> = (0..C10_N)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..10.0);
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                (x, 2.0 + 0.5 * x + e)
            })
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = data.iter().copied().unzip();
        let ols = fit_line(&x, &y, None).unwrap();
        let rep = bootstrap(&data, &["slope"], C10_RESAMPLES, seed, |d| {
            let (x, y): (Vec<f64>, Vec<f64>) = d.iter().copied().unzip();
            Ok(vec![fit_line(&x, &y, None)?.slope])
        })
        .unwrap();
        worst_boot = worst_boot.max(rel(rep.get("slope").unwrap().std, ols.sigma_slope()));
    }
    Outcome {
        pass: worst_pool <= C10_EXACT && worst_boot <= C10_BOOT_TOL,
        detail: format!(
            "pooling worst error {worst_pool:.1e} (<= {C10_EXACT:.0e}), bootstrap vs OLS slope SE worst {:.1}% \
             (<= {:.0}%) over 5 seeds",
            worst_boot * 100.0,
            C10_BOOT_TOL * 100.0
        ),
    }
}

// ---- 11 --------------------------------------------------------------

const C11_EXACT: f64 = 1e-9;
const C11_HAMMING: f64 = 0.05;

fn spectral_estimator() -> Outcome {
    let fs = 1024.0;
    let n = 4096;
    let tones: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            1.3 * (2.0 * PI * 50.0 * t).sin() + 0.4 * (2.0 * PI * 123.25 * t + 0.3).cos()
        })
        .collect();
    let mut rng = seeded_rng(11);
    let white: Vec<f64> = (0..n)
        .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let rect = WelchConfig {
        segment_length: n,
        overlap_fraction: 0.0,
        window: Window::Rect,
        detrend: Detrend::None,
    };
    let parseval = |x: &[f64], cfg: &WelchConfig| {
        let tr = TimeTrace::new(x.to_vec(), fs, 0.0, Channel::MfftSquid).unwrap();
        let s = welch_psd(&tr, cfg).unwrap();
        let lhs: f64 = s.psd().iter().sum::<f64>() * s.df();
        let rhs = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        rel(lhs, rhs)
    };
    let e_tone = parseval(&tones, &rect);
    let e_white = parseval(&white, &rect);

    let long: Vec<f64> = (0..200_000)
        .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let hamming = WelchConfig::from_resolution(1000.0, 1.0).unwrap();
    let tr = TimeTrace::new(long.clone(), 1000.0, 0.0, Channel::MfftSquid).unwrap();
    let s = welch_psd(&tr, &hamming).unwrap();
    let e_ham = rel(s.psd().iter().sum::<f64>() * s.df(), stats::variance(&long));

    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| welch_psd(&tr, &hamming).unwrap())
    };
    let a = in_pool(1);
    let b = in_pool(4);
    let bits = |s: &PowerSpectrum| s.psd().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let deterministic = bits(&a) == bits(&b) && bits(&a) == bits(&s);

    Outcome {
        pass: e_tone <= C11_EXACT && e_white <= C11_EXACT && e_ham <= C11_HAMMING && deterministic,
        detail: format!(
            "rect Parseval error tones {e_tone:.1e}, white {e_white:.1e} (<= {C11_EXACT:.0e}); \
             Hamming defaults {:.2}% (<= {:.0}%); bit-identical across 1/4 threads {deterministic}",
            e_ham * 100.0,
            C11_HAMMING * 100.0
        ),
    }
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        check(1, "circuit constants", s(1), circuit_constants),
        check(2, "force-noise golden value", s(1), force_noise_golden),
        check(3, "scatter-band golden values", s(1), scatter_band_golden),
        check(4, "position-noise golden value", s(1), position_noise_golden),
        check(5, "thermal closed loop", s(600), thermal_closed_loop),
        check(6, "MFFT closed loop", s(300), mfft_closed_loop),
        check(7, "interference-mask property", s(300), interference_mask_property),
        check(8, "calibration-fit recovery", s(300), calibration_recovery),
        check(9, "power-law recovery", s(60), power_law_recovery),
        check(10, "statistical kernels", s(60), statistical_kernels),
        check(11, "spectral estimator", s(60), spectral_estimator),
    ];
    let n_pass = results.iter().filter(|r| **r).count();
    println!("acceptance: {n_pass}/{} criteria passed", results.len());
    if n_pass != results.len() {
        std::process::exit(1);
    }
}
