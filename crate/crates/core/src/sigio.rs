//! Data model and file formats for traces, spectra, sweeps and temperature
//! series.
//!
//! Trace files come in two flavours:
//!
//! * `csv`: `# key=value` header lines (`sample_rate`, `start_time`,
//!   `channel`), a `value` column header, then one sample per line.
//! * `raw_binary`: a 256-byte space-padded ASCII header with the same keys
//!   plus `n_samples`, followed by little-endian `f64` samples.
//!
//! Spectra are written as a two-column CSV (`frequency_hz,psd`) with a JSON
//! sidecar next to it carrying the grid metadata and the interference mask.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_HEADER_LEN: usize = 256;
const RAW_MAGIC: &str = "CRYOTRACE/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    MfftSquid,
    ReadoutSquid,
    ReferenceThermometer,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::MfftSquid => "mfft_squid",
            Channel::ReadoutSquid => "readout_squid",
            Channel::ReferenceThermometer => "reference_thermometer",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mfft_squid" => Ok(Channel::MfftSquid),
            "readout_squid" => Ok(Channel::ReadoutSquid),
            "reference_thermometer" => Ok(Channel::ReferenceThermometer),
            other => Err(Error::invalid(format!("unknown channel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Csv,
    RawBinary,
}

/// Uniformly sampled signal. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTrace {
    samples: Vec<f64>,
    sample_rate: f64,
    start_time: f64,
    channel: Channel,
}

impl TimeTrace {
    pub fn new(samples: Vec<f64>, sample_rate: f64, start_time: f64, channel: Channel) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid(format!("sample_rate must be positive, got {sample_rate}")));
        }
        if !start_time.is_finite() {
            return Err(Error::invalid("start_time must be finite"));
        }
        if samples.is_empty() {
            return Err(Error::EmptyPayload);
        }
        check_finite(&samples)?;
        Ok(Self {
            samples,
            sample_rate,
            start_time,
            channel,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Keeps every `factor`-th sample.
    pub fn decimate(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("decimation factor must be >= 1"));
        }
        let samples = self.samples.iter().step_by(factor).copied().collect();
        TimeTrace::new(samples, self.sample_rate / factor as f64, self.start_time, self.channel)
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Header-only view of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub sample_rate: f64,
    pub start_time: f64,
    pub channel: Channel,
    pub n_samples: Option<usize>,
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header_map(path: &Path, map: &BTreeMap<String, String>) -> Result<TraceHeader> {
    let get = |key: &str| map.get(key).ok_or_else(|| header_err(path, format!("missing '{key}'")));
    let num = |key: &str| -> Result<f64> {
        get(key)?
            .parse::<f64>()
            .map_err(|e| header_err(path, format!("bad '{key}': {e}")))
    };
    let sample_rate = num("sample_rate")?;
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(header_err(path, "sample_rate must be positive"));
    }
    let start_time = num("start_time")?;
    if !start_time.is_finite() {
        return Err(header_err(path, "start_time must be finite"));
    }
    let channel = get("channel")?
        .parse::<Channel>()
        .map_err(|e| header_err(path, e.to_string()))?;
    let n_samples = match map.get("n_samples") {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|e| header_err(path, format!("bad 'n_samples': {e}")))?,
        ),
        None => None,
    };
    Ok(TraceHeader {
        sample_rate,
        start_time,
        channel,
        n_samples,
    })
}

fn split_kv(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

pub fn read_trace(path: impl AsRef<Path>, format: TraceFormat) -> Result<TimeTrace> {
    match format {
        TraceFormat::Csv => read_trace_csv(path.as_ref()),
        TraceFormat::RawBinary => read_trace_raw(path.as_ref()),
    }
}

pub fn write_trace(trace: &TimeTrace, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
    match format {
        TraceFormat::Csv => write_trace_csv(trace, path.as_ref()),
        TraceFormat::RawBinary => write_trace_raw(trace, path.as_ref()),
    }
}

pub fn read_trace_header(path: impl AsRef<Path>, format: TraceFormat) -> Result<TraceHeader> {
    let path = path.as_ref();
    match format {
        TraceFormat::RawBinary => {
            let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut buf = [0u8; RAW_HEADER_LEN];
            f.read_exact(&mut buf)
                .map_err(|_| header_err(path, "file shorter than the 256-byte header"))?;
            parse_raw_header(path, &buf)
        }
        TraceFormat::Csv => {
            let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut map = BTreeMap::new();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                match line.trim().strip_prefix('#') {
                    Some(rest) => {
                        if let Some((k, v)) = split_kv(rest) {
                            map.insert(k, v);
                        }
                    }
                    None => break,
                }
            }
            parse_header_map(path, &map)
        }
    }
}

fn read_trace_csv(path: &Path) -> Result<TimeTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    let mut samples = Vec::new();
    let mut seen_column_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = split_kv(rest) {
                map.insert(k, v);
            }
            continue;
        }
        if !seen_column_header && line.eq_ignore_ascii_case("value") {
            seen_column_header = true;
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !v.is_finite() {
            return Err(Error::NonFinite { index: samples.len() });
        }
        samples.push(v);
    }
    let header = parse_header_map(path, &map)?;
    if samples.is_empty() {
        return Err(Error::EmptyPayload);
    }
    TimeTrace::new(samples, header.sample_rate, header.start_time, header.channel)
}

fn write_trace_csv(trace: &TimeTrace, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut out = String::new();
    let _ = writeln!(out, "# sample_rate={}", trace.sample_rate);
    let _ = writeln!(out, "# start_time={}", trace.start_time);
    let _ = writeln!(out, "# channel={}", trace.channel.as_str());
    out.push_str("value\n");
    for s in &trace.samples {
        let _ = writeln!(out, "{s}");
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn raw_header_bytes(trace: &TimeTrace) -> Result<[u8; RAW_HEADER_LEN]> {
    let text = format!(
        "{RAW_MAGIC}\nsample_rate={}\nstart_time={}\nchannel={}\nn_samples={}\n",
        trace.sample_rate,
        trace.start_time,
        trace.channel.as_str(),
        trace.samples.len()
    );
    if text.len() >= RAW_HEADER_LEN {
        return Err(Error::invalid("raw header overflow"));
    }
    let mut buf = [b' '; RAW_HEADER_LEN];
    buf[..text.len()].copy_from_slice(text.as_bytes());
    buf[RAW_HEADER_LEN - 1] = b'\n';
    Ok(buf)
}

fn parse_raw_header(path: &Path, buf: &[u8]) -> Result<TraceHeader> {
    let text = std::str::from_utf8(buf).map_err(|_| header_err(path, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RAW_MAGIC) {
        return Err(header_err(path, "bad magic"));
    }
    let map: BTreeMap<_, _> = lines.filter_map(split_kv).collect();
    let header = parse_header_map(path, &map)?;
    if header.n_samples.is_none() {
        return Err(header_err(path, "missing 'n_samples'"));
    }
    Ok(header)
}

fn read_trace_raw(path: &Path) -> Result<TimeTrace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < RAW_HEADER_LEN {
        return Err(header_err(path, "file shorter than the 256-byte header"));
    }
    let header = parse_raw_header(path, &bytes[..RAW_HEADER_LEN])?;
    let payload = &bytes[RAW_HEADER_LEN..];
    if payload.is_empty() {
        return Err(Error::EmptyPayload);
    }
    if payload.len() % 8 != 0 {
        return Err(Error::invalid(format!(
            "{}: payload length {} is not a multiple of 8",
            path.display(),
            payload.len()
        )));
    }
    let n = payload.len() / 8;
    if header.n_samples != Some(n) {
        return Err(header_err(
            path,
            format!("n_samples={:?} but payload holds {n}", header.n_samples),
        ));
    }
    let samples: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    TimeTrace::new(samples, header.sample_rate, header.start_time, header.channel)
}

fn write_trace_raw(trace: &TimeTrace, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&raw_header_bytes(trace)?).map_err(|e| Error::io(path, e))?;
    for s in &trace.samples {
        w.write_all(&s.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One-sided power spectral density on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    frequencies: Vec<f64>,
    psd: Vec<f64>,
    df: f64,
    n_averaged: usize,
    mask: Vec<f64>,
}

impl PowerSpectrum {
    /// Builds the grid `f_start + i * df`.
    pub fn new(f_start: f64, df: f64, psd: Vec<f64>, n_averaged: usize) -> Result<Self> {
        let frequencies = (0..psd.len()).map(|i| f_start + i as f64 * df).collect();
        Self::from_parts(frequencies, psd, df, n_averaged, Vec::new())
    }

    pub fn from_parts(
        frequencies: Vec<f64>,
        psd: Vec<f64>,
        df: f64,
        n_averaged: usize,
        mask: Vec<f64>,
    ) -> Result<Self> {
        if !(df.is_finite() && df > 0.0) {
            return Err(Error::invalid(format!("df must be positive, got {df}")));
        }
        if psd.is_empty() {
            return Err(Error::EmptyPayload);
        }
        if frequencies.len() != psd.len() {
            return Err(Error::invalid("frequency and psd lengths differ"));
        }
        if n_averaged == 0 {
            return Err(Error::invalid("n_averaged must be >= 1"));
        }
        check_finite(&psd)?;
        check_finite(&frequencies)?;
        if let Some(i) = psd.iter().position(|&p| p < 0.0) {
            return Err(Error::invalid(format!("negative psd at bin {i}")));
        }
        let tol = 1e-6 * df;
        for w in frequencies.windows(2) {
            if ((w[1] - w[0]) - df).abs() > tol.max(1e-12 * w[1].abs()) {
                return Err(Error::invalid("frequency grid is not uniform with step df"));
            }
        }
        check_finite(&mask)?;
        Ok(Self {
            frequencies,
            psd,
            df,
            n_averaged,
            mask,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn psd(&self) -> &[f64] {
        &self.psd
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn n_averaged(&self) -> usize {
        self.n_averaged
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    pub fn f_start(&self) -> f64 {
        self.frequencies[0]
    }

    pub fn f_end(&self) -> f64 {
        *self.frequencies.last().expect("non-empty")
    }

    pub fn with_mask(mut self, mask: Vec<f64>) -> Result<Self> {
        check_finite(&mask)?;
        self.mask = mask;
        Ok(self)
    }

    /// Multiplies every PSD value by `factor` (e.g. a squared unit conversion).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::invalid("scale factor must be finite and non-negative"));
        }
        let mut out = self.clone();
        out.psd.iter_mut().for_each(|p| *p *= factor);
        Ok(out)
    }

    /// Rectangle-rule integral over the whole grid, `sum(psd) * df`.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.df
    }

    /// Index of the grid point nearest `f`, if `f` lies within half a bin of
    /// the grid.
    pub fn index_of(&self, f: f64) -> Option<usize> {
        let pos = (f - self.f_start()) / self.df;
        let i = pos.round();
        if i < 0.0 || i >= self.len() as f64 || (pos - i).abs() > 0.5 + 1e-9 {
            return None;
        }
        Some(i as usize)
    }

    pub fn same_grid(&self, other: &PowerSpectrum) -> bool {
        self.len() == other.len()
            && (self.df - other.df).abs() <= 1e-12 * self.df
            && (self.f_start() - other.f_start()).abs() <= 1e-9 * self.df
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub df: f64,
    pub n_averaged: usize,
    pub f_start: f64,
    pub n_bins: usize,
    pub mask: Vec<f64>,
}

/// Path of the JSON sidecar belonging to a spectrum CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_spectrum(spectrum: &PowerSpectrum, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut out = String::with_capacity(spectrum.len() * 32);
    out.push_str("frequency_hz,psd\n");
    for (f, p) in spectrum.frequencies.iter().zip(&spectrum.psd) {
        let _ = writeln!(out, "{f},{p}");
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = SpectrumSidecar {
        df: spectrum.df,
        n_averaged: spectrum.n_averaged,
        f_start: spectrum.f_start(),
        n_bins: spectrum.len(),
        mask: spectrum.mask.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_spectrum(path: impl AsRef<Path>) -> Result<PowerSpectrum> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let sidecar: SpectrumSidecar =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "frequency_hz,psd" => {}
        _ => return Err(header_err(path, "expected 'frequency_hz,psd' header")),
    }
    let mut freqs = Vec::with_capacity(sidecar.n_bins);
    let mut psd = Vec::with_capacity(sidecar.n_bins);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("{}:{}: expected two columns", path.display(), lineno + 2)))?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 2)))
        };
        freqs.push(parse(a)?);
        psd.push(parse(b)?);
    }
    if psd.len() != sidecar.n_bins {
        return Err(Error::invalid(format!(
            "{}: sidecar declares {} bins, file has {}",
            path.display(),
            sidecar.n_bins,
            psd.len()
        )));
    }
    PowerSpectrum::from_parts(freqs, psd, sidecar.df, sidecar.n_averaged, sidecar.mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDirection {
    Up,
    Down,
}

/// Frequency sweep as stored on disk: `(frequency, amplitude, phase)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub frequencies: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub direction: Option<SweepDirection>,
    pub drive_amplitude: f64,
    pub start_time: f64,
    pub n_averaged: usize,
    pub temperature_k: Option<f64>,
}

impl SweepRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.frequencies.len();
        if n == 0 {
            return Err(Error::EmptyPayload);
        }
        if self.amplitude.len() != n || self.phase.len() != n {
            return Err(Error::invalid("sweep columns differ in length"));
        }
        check_finite(&self.frequencies)?;
        check_finite(&self.amplitude)?;
        check_finite(&self.phase)?;
        if self.n_averaged == 0 {
            return Err(Error::invalid("n_averaged must be >= 1"));
        }
        Ok(())
    }
}

pub fn write_sweep(sweep: &SweepRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    sweep.validate()?;
    let mut out = String::new();
    if let Some(d) = sweep.direction {
        let _ = writeln!(out, "# direction={}", if d == SweepDirection::Up { "up" } else { "down" });
    }
    let _ = writeln!(out, "# drive_amplitude={}", sweep.drive_amplitude);
    let _ = writeln!(out, "# start_time={}", sweep.start_time);
    let _ = writeln!(out, "# n_averaged={}", sweep.n_averaged);
    if let Some(t) = sweep.temperature_k {
        let _ = writeln!(out, "# temperature_k={t}");
    }
    out.push_str("frequency_hz,amplitude,phase_rad\n");
    for i in 0..sweep.frequencies.len() {
        let _ = writeln!(out, "{},{},{}", sweep.frequencies[i], sweep.amplitude[i], sweep.phase[i]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<SweepRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    let (mut f, mut a, mut p) = (Vec::new(), Vec::new(), Vec::new());
    let mut seen_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = split_kv(rest) {
                map.insert(k, v);
            }
            continue;
        }
        if !seen_header {
            if line != "frequency_hz,amplitude,phase_rad" {
                return Err(header_err(path, "expected 'frequency_hz,amplitude,phase_rad' header"));
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::invalid(format!("{}:{}: expected three columns", path.display(), lineno + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        f.push(parse(cols[0])?);
        a.push(parse(cols[1])?);
        p.push(parse(cols[2])?);
    }
    let num = |key: &str, default: Option<f64>| -> Result<f64> {
        match map.get(key) {
            Some(v) => v.parse().map_err(|e| header_err(path, format!("bad '{key}': {e}"))),
            None => default.ok_or_else(|| header_err(path, format!("missing '{key}'"))),
        }
    };
    let direction = match map.get("direction").map(String::as_str) {
        None => None,
        Some("up") => Some(SweepDirection::Up),
        Some("down") => Some(SweepDirection::Down),
        Some(other) => return Err(header_err(path, format!("bad direction '{other}'"))),
    };
    let sweep = SweepRecord {
        frequencies: f,
        amplitude: a,
        phase: p,
        direction,
        drive_amplitude: num("drive_amplitude", Some(1.0))?,
        start_time: num("start_time", Some(0.0))?,
        n_averaged: num("n_averaged", Some(1.0))? as usize,
        temperature_k: map
            .get("temperature_k")
            .map(|v| v.parse::<f64>())
            .transpose()
            .map_err(|e| header_err(path, format!("bad 'temperature_k': {e}")))?,
    };
    sweep.validate()?;
    Ok(sweep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSource {
    Mfft,
    Reference,
    Cantilever,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePoint {
    pub time_s: f64,
    pub temperature_k: f64,
    pub sigma_k: f64,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Timestamped temperatures from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSeries {
    pub source: TemperatureSource,
    pub points: Vec<TemperaturePoint>,
}

impl TemperatureSeries {
    pub fn new(source: TemperatureSource) -> Self {
        Self {
            source,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, time_s: f64, temperature_k: f64, sigma_k: f64, flags: Vec<String>) {
        self.points.push(TemperaturePoint {
            time_s,
            temperature_k,
            sigma_k,
            flags,
        });
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.time_s).collect()
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.temperature_k).collect()
    }

    /// Mean temperature of the points with `t_start <= time < t_end`.
    pub fn mean_between(&self, t_start: f64, t_end: f64) -> Option<f64> {
        let sel: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.time_s >= t_start && p.time_s < t_end)
            .map(|p| p.temperature_k)
            .collect();
        if sel.is_empty() {
            None
        } else {
            Some(sel.iter().sum::<f64>() / sel.len() as f64)
        }
    }
}

pub fn write_temperature_series(series: &TemperatureSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("time_s,T_K,sigma_T_K,flags\n");
    for p in &series.points {
        let _ = writeln!(out, "{},{},{},{}", p.time_s, p.temperature_k, p.sigma_k, p.flags.join("|"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_temperature_series(path: impl AsRef<Path>, source: TemperatureSource) -> Result<TemperatureSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "time_s,T_K,sigma_T_K,flags" => {}
        _ => return Err(header_err(path, "expected 'time_s,T_K,sigma_T_K,flags' header")),
    }
    let mut series = TemperatureSeries::new(source);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, ',').collect();
        if cols.len() < 3 {
            return Err(Error::invalid(format!("{}:{}: expected 4 columns", path.display(), lineno + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 2)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { index: lineno })
            }
        };
        let flags = cols
            .get(3)
            .map(|s| s.split('|').filter(|f| !f.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        series.push(parse(cols[0])?, parse(cols[1])?, parse(cols[2])?, flags);
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRef {
    pub path: PathBuf,
    pub format: TraceFormat,
    pub channel: Channel,
    pub start_time: f64,
    pub sample_rate: f64,
    /// Reference-thermometer reading during the trace, if available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_temperature_k: Option<f64>,
    /// Sample-stage temperature during the trace, if available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_temperature_k: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Calibration,
    Driven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRef {
    pub path: PathBuf,
    pub kind: SweepKind,
    pub start_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationEpoch {
    pub label: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// JSON index of every file belonging to a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Wall-clock description of the run epoch; metadata only.
    #[serde(default)]
    pub epoch: String,
    #[serde(default)]
    pub traces: Vec<TraceRef>,
    #[serde(default)]
    pub sweeps: Vec<SweepRef>,
    #[serde(default)]
    pub calibration_epochs: Vec<CalibrationEpoch>,
}

impl RunManifest {
    /// Reads a manifest, resolves relative paths against its directory and
    /// validates every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: RunManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for t in &mut manifest.traces {
            if t.path.is_relative() {
                t.path = base.join(&t.path);
            }
        }
        for s in &mut manifest.sweeps {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: BTreeMap<Channel, f64> = BTreeMap::new();
        for t in &self.traces {
            let header = read_trace_header(&t.path, t.format)?;
            if header.channel != t.channel {
                return Err(Error::invalid(format!("{}: channel differs from manifest", t.path.display())));
            }
            if (header.sample_rate - t.sample_rate).abs() > 1e-9 * t.sample_rate {
                return Err(Error::invalid(format!("{}: sample_rate differs from manifest", t.path.display())));
            }
            if let Some(prev) = last.insert(t.channel, t.start_time) {
                if t.start_time < prev {
                    return Err(Error::invalid(format!(
                        "timestamps not monotone on channel {}",
                        t.channel.as_str()
                    )));
                }
            }
        }
        for s in &self.sweeps {
            if !s.path.exists() {
                return Err(Error::io(
                    &s.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "sweep file missing"),
                ));
            }
        }
        for e in &self.calibration_epochs {
            if !(e.t_start < e.t_end) {
                return Err(Error::invalid(format!("calibration epoch '{}' is empty", e.label)));
            }
        }
        Ok(())
    }

    pub fn traces_on(&self, channel: Channel) -> impl Iterator<Item = &TraceRef> {
        self.traces.iter().filter(move |t| t.channel == channel)
    }
}
