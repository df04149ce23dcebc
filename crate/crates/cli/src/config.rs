//! The single JSON document that parameterises a run. See
//! `config.schema.json` next to this crate's manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cryotherm::circuit::{CircuitParams, DEFAULT_REL_SIGMA_C};
use cryotherm::mfft::{CalibrationMode, InterferenceConfig, DEFAULT_BAND, DEFAULT_CAL_RANGE};
use cryotherm::resonator::LorentzianOptions;
use cryotherm::sigio::TraceFormat;
use cryotherm::spectral::{Detrend, WelchConfig, Window};
use cryotherm::synth::SynthScenario;
use cryotherm::thermal::{PlateauConfig, ScreeningConfig, ThermalPeakConfig};
use cryotherm::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
    pub welch: WelchSection,
    pub mfft: MfftSection,
    pub calibration: CalibrationSection,
    pub qfactor: QFactorSection,
    pub thermal: ThermalSection,
    pub synth: SynthSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            welch: WelchSection::default(),
            mfft: MfftSection::default(),
            calibration: CalibrationSection::default(),
            qfactor: QFactorSection::default(),
            thermal: ThermalSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchSettings {
    /// Frequency resolution, Hz; the segment holds `round(fs / df)` samples.
    pub df: f64,
    pub window: Window,
    pub overlap_fraction: f64,
    pub detrend: Detrend,
}

impl WelchSettings {
    pub fn for_rate(&self, sample_rate: f64) -> Result<WelchConfig> {
        let mut c = WelchConfig::from_resolution(sample_rate, self.df)?;
        c.window = self.window;
        c.overlap_fraction = self.overlap_fraction;
        c.detrend = self.detrend;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WelchSection {
    pub mfft: WelchSettings,
    /// One rectangular segment per 1000 s trace by default.
    pub thermal: WelchSettings,
}

impl Default for WelchSection {
    fn default() -> Self {
        Self {
            mfft: WelchSettings {
                df: 1.0,
                window: Window::Hamming,
                overlap_fraction: 0.5,
                detrend: Detrend::Mean,
            },
            thermal: WelchSettings {
                df: 1e-3,
                window: Window::Rect,
                overlap_fraction: 0.0,
                detrend: Detrend::Mean,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfftSection {
    /// Hz
    pub band: (f64, f64),
    /// K
    pub calibration_range: (f64, f64),
    pub mode: CalibrationMode,
    pub interference: InterferenceConfig,
    pub spike_window: usize,
    pub spike_sigma: f64,
}

impl Default for MfftSection {
    fn default() -> Self {
        Self {
            band: DEFAULT_BAND,
            calibration_range: DEFAULT_CAL_RANGE,
            mode: CalibrationMode::Intercept,
            interference: InterferenceConfig::default(),
            spike_window: 11,
            spike_sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub n_bootstrap: usize,
    /// Enables the displacement conversion output of `cal-fit`.
    pub circuit: Option<CircuitParams>,
    pub rel_sigma_c: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            n_bootstrap: 1000,
            circuit: None,
            rel_sigma_c: DEFAULT_REL_SIGMA_C,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFactorSection {
    pub lorentzian: LorentzianOptions,
    /// Sweep amplitude unit in metres.
    pub meters_per_unit: f64,
    /// Temperature steps `(t_start, t_end)`, s, used to date sweeps that carry
    /// no temperature from the MFFT series.
    pub steps: Vec<(f64, f64)>,
}

impl Default for QFactorSection {
    fn default() -> Self {
        Self {
            lorentzian: LorentzianOptions::default(),
            meters_per_unit: 1.0,
            steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermalSection {
    /// N/m
    pub k: f64,
    /// Readout traces are in metres when absent.
    pub volts_per_meter: Option<f64>,
    pub peak: ThermalPeakConfig,
    pub screening: ScreeningConfig,
    pub plateau: PlateauConfig,
    /// Enables vibration flagging together with `fc`.
    pub q: Option<f64>,
    /// Hz
    pub fc: Option<f64>,
    pub vibration_window: usize,
    pub rel_c: f64,
    pub rel_beta: f64,
}

impl Default for ThermalSection {
    fn default() -> Self {
        Self {
            k: 2.6e-5,
            volts_per_meter: None,
            peak: ThermalPeakConfig::default(),
            screening: ScreeningConfig::default(),
            plateau: PlateauConfig::default(),
            q: None,
            fc: None,
            vibration_window: 20,
            rel_c: DEFAULT_REL_SIGMA_C,
            rel_beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub jobs: Vec<SynthJob>,
}

fn scenario_without_seed<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<SynthScenario, D::Error> {
    let mut v = serde_json::Value::deserialize(d)?;
    if let Some(m) = v.as_object_mut() {
        m.entry("seed").or_insert(0.into());
    }
    serde_json::from_value(v).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthJob {
    pub name: String,
    /// The seed may be omitted; it is replaced by one derived from the run seed.
    #[serde(deserialize_with = "scenario_without_seed")]
    pub scenario: SynthScenario,
    #[serde(default = "raw")]
    pub format: TraceFormat,
    #[serde(default)]
    pub start_time: f64,
    /// Record the injected temperature in the manifest (as reference
    /// temperature for flux-noise traces, sample temperature otherwise).
    #[serde(default = "yes")]
    pub label_temperature: bool,
    #[serde(default)]
    pub repeat: Option<Repeat>,
}

fn raw() -> TraceFormat {
    TraceFormat::RawBinary
}

fn yes() -> bool {
    true
}

/// Expands one job into a temperature series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repeat {
    /// K
    pub temperatures: Temperatures,
    /// Start-time increment between repetitions, s.
    #[serde(default)]
    pub spacing_s: f64,
    /// Driven sweeps: `Q = q_ref * (T / t_ref)^(-alpha)`.
    #[serde(default)]
    pub q_law: Option<QLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Temperatures {
    List(Vec<f64>),
    Range {
        from: f64,
        to: f64,
        n: usize,
        #[serde(default)]
        log: bool,
    },
}

impl Temperatures {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Temperatures::List(v) => v.clone(),
            &Temperatures::Range { from, to, n, log } => (0..n)
                .map(|i| {
                    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    if log {
                        from * (to / from).powf(u)
                    } else {
                        from + (to - from) * u
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QLaw {
    pub q_ref: f64,
    pub t_ref: f64,
    pub alpha: f64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for w in [&self.welch.mfft, &self.welch.thermal] {
            if !(w.df > 0.0 && w.df.is_finite()) {
                return Err(Error::invalid("welch df must be positive"));
            }
            if !(0.0..1.0).contains(&w.overlap_fraction) {
                return Err(Error::invalid("welch overlap_fraction must lie in [0, 1)"));
            }
        }
        let m = &self.mfft;
        if !(m.band.0 >= 0.0 && m.band.0 < m.band.1) {
            return Err(Error::invalid("mfft.band must satisfy 0 <= f0 < f1"));
        }
        if !(m.calibration_range.0 < m.calibration_range.1) {
            return Err(Error::invalid("mfft.calibration_range must satisfy T_lo < T_hi"));
        }
        m.interference.validate()?;
        if m.spike_window < 3 || !(m.spike_sigma > 0.0) {
            return Err(Error::invalid("mfft.spike_window >= 3 and spike_sigma > 0 required"));
        }
        if let Some(c) = &self.calibration.circuit {
            c.validate()?;
        }
        if !(self.calibration.rel_sigma_c >= 0.0) {
            return Err(Error::invalid("calibration.rel_sigma_c must be >= 0"));
        }
        if !(self.qfactor.meters_per_unit > 0.0) {
            return Err(Error::invalid("qfactor.meters_per_unit must be positive"));
        }
        if self.qfactor.steps.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::invalid("qfactor.steps must be (t_start < t_end) pairs"));
        }
        let t = &self.thermal;
        if !(t.k > 0.0) {
            return Err(Error::invalid("thermal.k must be positive"));
        }
        if matches!(t.volts_per_meter, Some(v) if !(v > 0.0)) {
            return Err(Error::invalid("thermal.volts_per_meter must be positive"));
        }
        t.peak.validate()?;
        if t.q.is_some() != t.fc.is_some() {
            return Err(Error::invalid("thermal.q and thermal.fc must be given together"));
        }
        if matches!(self.jobs, Some(0)) {
            return Err(Error::invalid("jobs must be >= 1"));
        }
        for j in &self.synth.jobs {
            if let Some(r) = &j.repeat {
                let v = r.temperatures.values();
                if v.is_empty() || v.iter().any(|t| !(*t >= 0.0)) {
                    return Err(Error::invalid(format!("synth job '{}': temperatures must be >= 0", j.name)));
                }
                if matches!(r.temperatures, Temperatures::Range { log: true, from, .. } if from <= 0.0) {
                    return Err(Error::invalid(format!("synth job '{}': log range needs from > 0", j.name)));
                }
            }
            if j.name.is_empty() || j.name.contains(['/', '\\']) {
                return Err(Error::invalid(format!("synth job name '{}' is not a plain file stem", j.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"mfft": {"bnd": [1, 2]}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = PipelineConfig::default();
        c.mfft.band = (100.0, 50.0);
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.thermal.q = Some(1e4);
        assert!(c.validate().is_err());
    }

    fn same_keys(cfg: &serde_json::Value, schema: &serde_json::Value, at: &str) {
        let serde_json::Value::Object(c) = cfg else { return };
        let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{at}: no properties"));
        assert_eq!(schema["additionalProperties"], false, "{at}");
        let mut a: Vec<&String> = c.keys().collect();
        let mut b: Vec<&String> = props.keys().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "{at}");
        for (k, v) in c {
            if props[k].get("properties").is_some() {
                same_keys(v, &props[k], &format!("{at}.{k}"));
            }
        }
    }

    #[test]
    fn schema_matches_config() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../config.schema.json")).unwrap();
        let cfg = serde_json::to_value(PipelineConfig::default()).unwrap();
        same_keys(&cfg, &schema, "config");
    }

    #[test]
    fn temperature_ranges() {
        let r = Temperatures::Range {
            from: 1.0,
            to: 100.0,
            n: 3,
            log: true,
        };
        let v = r.values();
        assert!((v[1] - 10.0).abs() < 1e-12);
        let l: Temperatures = serde_json::from_str("[0.1, 0.2]").unwrap();
        assert_eq!(l.values(), vec![0.1, 0.2]);
    }
}
