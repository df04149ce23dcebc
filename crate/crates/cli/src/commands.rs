use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cryotherm::circuit::{derive, fit_calibration_sweep, volts_per_meter, CalibrationFit, CalibrationSweep};
use cryotherm::mfft::{
    band_power, calibrate, detect_interference_filtered, flag_spikes, temperature, InterferenceMask,
    MfftCalibration, FLAG_NOISE_FLOOR,
};
use cryotherm::resonator::{
    assign_step_temperature, fit_lorentzian, fit_power_law, read_q_table, split_and_pool, write_q_table,
    DrivenSweep, LorentzianOptions, PowerLawFit, QPoint, SweepGroup,
};
use cryotherm::sigio::{
    read_sweep, read_temperature_series, read_trace, write_spectrum, write_sweep, write_temperature_series,
    write_trace, Channel, PowerSpectrum, RunManifest, SweepKind, SweepRef, TemperatureSeries, TemperatureSource,
    TraceFormat, TraceRef,
};
use cryotherm::spectral::welch_psd;
use cryotherm::synth::{run_scenario, SynthOutput, SynthScenario};
use cryotherm::thermal::{
    calibration_rel_sigma, detect_plateaus, extract_thermal_peak, fit_bath_coupling, flag_vibration_epochs,
    screen_trace, write_plateau_report, BathPoint, PlateauReport, ThermalFlag, VibrationConfig,
};
use cryotherm::{stats, Error, Result};

use crate::config::{PipelineConfig, SynthJob};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub manifest: Option<RunManifest>,
    pub out_dir: PathBuf,
}

#[derive(Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Every result carries a data-quality flag.
    pub flagged_only: bool,
    pub message: String,
}

impl Ctx {
    fn manifest(&self) -> Result<&RunManifest> {
        self.manifest
            .as_ref()
            .ok_or_else(|| Error::invalid("this command needs --manifest"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn trace_inputs(refs: &[TraceRef]) -> Vec<PathBuf> {
    refs.iter().map(|t| t.path.clone()).collect()
}

fn mid_time(t: &TraceRef, duration: f64) -> f64 {
    t.start_time + 0.5 * duration
}

/// SplitMix64 over (global seed, job, repetition).
pub fn job_seed(global: u64, job: usize, rep: usize) -> u64 {
    let mut z = global ^ (((job as u64) << 32) | rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---- synth ------------------------------------------------------------

struct Expanded {
    file: String,
    scenario: SynthScenario,
    start_time: f64,
    temperature: Option<f64>,
    job: usize,
}

fn expand(job: &SynthJob, index: usize, global: u64) -> Vec<Expanded> {
    let reps: Vec<Option<f64>> = match &job.repeat {
        None => vec![None],
        Some(r) => r.temperatures.values().into_iter().map(Some).collect(),
    };
    let n = reps.len();
    reps.into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut sc = job.scenario.clone();
            let seed = job_seed(global, index, i);
            let start = job.start_time + job.repeat.as_ref().map_or(0.0, |r| r.spacing_s * i as f64);
            let mut label = None;
            match &mut sc {
                SynthScenario::MfftNoise(m) => {
                    m.seed = seed;
                    m.start_time = start;
                    if let Some(t) = t {
                        m.theory.temperature = t;
                    }
                    label = Some(m.theory.temperature);
                }
                SynthScenario::ThermalMotion(m) => {
                    m.seed = seed;
                    m.start_time = start;
                    if let Some(t) = t {
                        m.temperature = t;
                    }
                    label = Some(m.temperature);
                }
                SynthScenario::DrivenSweep(d) => {
                    d.seed = seed;
                    d.start_time = start;
                    if let Some(t) = t {
                        d.temperature_k = Some(t);
                        if let Some(law) = job.repeat.as_ref().and_then(|r| r.q_law) {
                            d.q = law.q_ref * (t / law.t_ref).powf(-law.alpha);
                        }
                    }
                    label = d.temperature_k;
                }
                SynthScenario::CalibrationSweep(c) => c.seed = seed,
            }
            let file = if n == 1 {
                job.name.clone()
            } else {
                format!("{}_{i:04}", job.name)
            };
            Expanded {
                file,
                scenario: sc,
                start_time: start,
                temperature: if job.label_temperature { label } else { None },
                job: index,
            }
        })
        .collect()
}

pub fn synth(ctx: &Ctx) -> Result<Outcome> {
    let jobs = &ctx.cfg.synth.jobs;
    if jobs.is_empty() {
        return Err(Error::invalid("config.synth.jobs is empty"));
    }
    let items: Vec<Expanded> = jobs
        .iter()
        .enumerate()
        .flat_map(|(i, j)| expand(j, i, ctx.cfg.seed))
        .collect();
    let data_dir = ctx.path("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let written: Vec<Result<Written>> = items
        .par_iter()
        .map(|it| {
            let job = &jobs[it.job];
            match run_scenario(&it.scenario)? {
                SynthOutput::Trace(tr) => {
                    let ext = if job.format == TraceFormat::Csv { "csv" } else { "bin" };
                    let name = format!("{}.{ext}", it.file);
                    write_trace(&tr, data_dir.join(&name), job.format)?;
                    let mfft = tr.channel() == Channel::MfftSquid;
                    Ok(Written::Trace(TraceRef {
                        path: PathBuf::from("data").join(name),
                        format: job.format,
                        channel: tr.channel(),
                        start_time: tr.start_time(),
                        sample_rate: tr.sample_rate(),
                        reference_temperature_k: if mfft { it.temperature } else { None },
                        sample_temperature_k: if mfft { None } else { it.temperature },
                    }))
                }
                SynthOutput::Sweep(mut rec) => {
                    rec.start_time = it.start_time;
                    let kind = match it.scenario {
                        SynthScenario::CalibrationSweep(_) => SweepKind::Calibration,
                        _ => SweepKind::Driven,
                    };
                    let name = format!("{}.csv", it.file);
                    write_sweep(&rec, data_dir.join(&name))?;
                    Ok(Written::Sweep(SweepRef {
                        path: PathBuf::from("data").join(name),
                        kind,
                        start_time: rec.start_time,
                    }))
                }
            }
        })
        .collect();
    let mut manifest = RunManifest {
        epoch: format!("synthetic, seed {}", ctx.cfg.seed),
        ..Default::default()
    };
    for w in written {
        match w? {
            Written::Trace(t) => manifest.traces.push(t),
            Written::Sweep(s) => manifest.sweeps.push(s),
        }
    }
    manifest.traces.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
    manifest.sweeps.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
    let mpath = ctx.path("manifest.json");
    manifest.save(&mpath)?;
    let mut outputs: Vec<PathBuf> = manifest
        .traces
        .iter()
        .map(|t| ctx.out_dir.join(&t.path))
        .chain(manifest.sweeps.iter().map(|s| ctx.out_dir.join(&s.path)))
        .collect();
    outputs.push(mpath);
    Ok(Outcome {
        message: format!("{} traces, {} sweeps", manifest.traces.len(), manifest.sweeps.len()),
        outputs,
        ..Default::default()
    })
}

enum Written {
    Trace(TraceRef),
    Sweep(SweepRef),
}

// ---- psd --------------------------------------------------------------

fn spectrum_of(ctx: &Ctx, t: &TraceRef) -> Result<(PowerSpectrum, f64)> {
    let tr = read_trace(&t.path, t.format)?;
    let settings = match t.channel {
        Channel::ReadoutSquid => &ctx.cfg.welch.thermal,
        _ => &ctx.cfg.welch.mfft,
    };
    let s = welch_psd(&tr, &settings.for_rate(tr.sample_rate())?)?;
    Ok((s, tr.duration()))
}

#[derive(Serialize)]
struct PsdIndexEntry {
    trace: PathBuf,
    spectrum: PathBuf,
    channel: Channel,
    start_time: f64,
}

pub fn psd(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.manifest()?;
    let refs: Vec<TraceRef> = m
        .traces
        .iter()
        .filter(|t| t.channel != Channel::ReferenceThermometer)
        .cloned()
        .collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData("manifest lists no squid traces".into()));
    }
    let dir = ctx.path("psd");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let entries: Vec<Result<PsdIndexEntry>> = refs
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let (s, _) = spectrum_of(ctx, t)?;
            let stem = t.path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
            let out = dir.join(format!("{i:04}_{stem}.csv"));
            write_spectrum(&s, &out)?;
            Ok(PsdIndexEntry {
                trace: t.path.clone(),
                spectrum: out,
                channel: t.channel,
                start_time: t.start_time,
            })
        })
        .collect();
    let entries: Vec<PsdIndexEntry> = entries.into_iter().collect::<Result<_>>()?;
    let index = dir.join("index.json");
    write_json(&index, &entries)?;
    let mut outputs: Vec<PathBuf> = entries.iter().map(|e| e.spectrum.clone()).collect();
    outputs.push(index);
    Ok(Outcome {
        inputs: trace_inputs(&refs),
        message: format!("{} spectra", entries.len()),
        outputs,
        ..Default::default()
    })
}

// ---- mfft -------------------------------------------------------------

struct MfftInputs {
    refs: Vec<TraceRef>,
    spectra: Vec<PowerSpectrum>,
    durations: Vec<f64>,
}

fn mfft_inputs(ctx: &Ctx) -> Result<MfftInputs> {
    let m = ctx.manifest()?;
    let refs: Vec<TraceRef> = m.traces_on(Channel::MfftSquid).cloned().collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData("manifest lists no mfft_squid traces".into()));
    }
    let res: Vec<(PowerSpectrum, f64)> = refs
        .par_iter()
        .map(|t| spectrum_of(ctx, t))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let (spectra, durations) = res.into_iter().unzip();
    Ok(MfftInputs {
        refs,
        spectra,
        durations,
    })
}

fn build_mask(ctx: &Ctx, inp: &MfftInputs) -> Result<InterferenceMask> {
    let pairs: Vec<(&PowerSpectrum, Option<f64>)> = inp
        .spectra
        .iter()
        .zip(&inp.refs)
        .map(|(s, r)| (s, r.reference_temperature_k))
        .collect();
    detect_interference_filtered(&pairs, &ctx.cfg.mfft.interference)
}

fn in_epochs(m: &RunManifest, t: f64) -> bool {
    m.calibration_epochs.is_empty() || m.calibration_epochs.iter().any(|e| t >= e.t_start && t < e.t_end)
}

struct CalPoint {
    time_s: f64,
    t_ref: f64,
    power: f64,
}

fn build_calibration(ctx: &Ctx, inp: &MfftInputs, mask: &InterferenceMask) -> Result<(MfftCalibration, Vec<CalPoint>)> {
    let m = ctx.manifest()?;
    let (f0, f1) = ctx.cfg.mfft.band;
    let mut pts = Vec::new();
    for ((r, s), d) in inp.refs.iter().zip(&inp.spectra).zip(&inp.durations) {
        let (Some(t_ref), true) = (r.reference_temperature_k, in_epochs(m, r.start_time)) else {
            continue;
        };
        pts.push(CalPoint {
            time_s: mid_time(r, *d),
            t_ref,
            power: band_power(s, f0, f1, mask)?,
        });
    }
    let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.power, p.t_ref)).collect();
    let mut cal = calibrate(&pairs, ctx.cfg.mfft.calibration_range, ctx.cfg.mfft.band, ctx.cfg.mfft.mode)?;
    cal.mask_digest = Some(mask.digest());
    Ok((cal, pts))
}

#[derive(Serialize)]
struct MaskFile<'a> {
    digest: String,
    df: f64,
    frequencies: &'a [f64],
    n_spectra: usize,
}

pub fn mfft_mask(ctx: &Ctx) -> Result<Outcome> {
    let inp = mfft_inputs(ctx)?;
    let mask = build_mask(ctx, &inp)?;
    let path = ctx.path("mask.json");
    write_json(
        &path,
        &MaskFile {
            digest: mask.digest(),
            df: mask.df,
            frequencies: &mask.frequencies,
            n_spectra: inp.spectra.len(),
        },
    )?;
    Ok(Outcome {
        inputs: trace_inputs(&inp.refs),
        outputs: vec![path],
        message: format!("{} masked frequencies", mask.len()),
        ..Default::default()
    })
}

pub fn mfft_calibrate(ctx: &Ctx) -> Result<Outcome> {
    let inp = mfft_inputs(ctx)?;
    let mask = build_mask(ctx, &inp)?;
    let (cal, pts) = build_calibration(ctx, &inp, &mask)?;
    let cpath = ctx.path("calibration.json");
    write_json(&cpath, &cal)?;
    let (lo, hi) = cal.range;
    let mut s = String::from("time_s,T_ref_K,band_power,used\n");
    for p in &pts {
        let _ = writeln!(s, "{},{},{:e},{}", p.time_s, p.t_ref, p.power, p.t_ref >= lo && p.t_ref <= hi);
    }
    let ppath = ctx.path("calibration_points.csv");
    write_text(&ppath, &s)?;
    Ok(Outcome {
        inputs: trace_inputs(&inp.refs),
        outputs: vec![cpath, ppath],
        message: format!(
            "{} points, slope {:e} K per unit power, intercept {:e}",
            cal.n_points, cal.slope, cal.intercept
        ),
        ..Default::default()
    })
}

pub fn mfft_temp(ctx: &Ctx) -> Result<Outcome> {
    let inp = mfft_inputs(ctx)?;
    let mask = build_mask(ctx, &inp)?;
    let (cal, _) = build_calibration(ctx, &inp, &mask)?;
    let (f0, f1) = ctx.cfg.mfft.band;
    let mut series = TemperatureSeries::new(TemperatureSource::Mfft);
    let mut below = 0usize;
    for ((r, s), d) in inp.refs.iter().zip(&inp.spectra).zip(&inp.durations) {
        let p = band_power(s, f0, f1, &mask)?;
        match temperature(p, &cal) {
            Ok(t) => series.push(mid_time(r, *d), t.temperature_k, t.sigma_k, t.flags),
            Err(Error::BelowNoiseFloor { .. }) => below += 1,
            Err(e) => return Err(e),
        }
    }
    let clean = series
        .points
        .iter()
        .filter(|p| !p.flags.iter().any(|f| f == FLAG_NOISE_FLOOR))
        .count();
    let tpath = ctx.path("mfft_temperature.csv");
    write_temperature_series(&series, &tpath)?;
    let cpath = ctx.path("calibration.json");
    write_json(&cpath, &cal)?;
    let mut outputs = vec![tpath, cpath];
    let w = ctx.cfg.mfft.spike_window;
    if series.points.len() >= w {
        let spikes = flag_spikes(&series, w, ctx.cfg.mfft.spike_sigma)?;
        let spath = ctx.path("spikes.json");
        write_json(&spath, &spikes)?;
        outputs.push(spath);
    }
    let t = series.temperatures();
    let tmin = t.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        inputs: trace_inputs(&inp.refs),
        outputs,
        flagged_only: clean == 0,
        message: format!(
            "{} readings, {} below the noise floor, minimum {:.4e} K",
            series.points.len(),
            below,
            tmin
        ),
    })
}

// ---- cal-fit ----------------------------------------------------------

#[derive(Serialize)]
struct CalFitEntry {
    path: PathBuf,
    start_time: f64,
    fit: CalibrationFit,
}

#[derive(Serialize)]
struct Conversion {
    volts_per_meter: f64,
    rel_sigma: f64,
    rel_sigma_c: f64,
    rel_sigma_beta: f64,
    beta: f64,
    q: f64,
    f0: f64,
}

pub fn cal_fit(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.manifest()?;
    let refs: Vec<&SweepRef> = m.sweeps.iter().filter(|s| s.kind == SweepKind::Calibration).collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData("manifest lists no calibration sweeps".into()));
    }
    let n_boot = ctx.cfg.calibration.n_bootstrap;
    let fits: Vec<CalFitEntry> = refs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sw = CalibrationSweep::from_record(&read_sweep(&s.path)?)?;
            let fit = fit_calibration_sweep(&sw, n_boot, ctx.cfg.seed.wrapping_add(i as u64))?;
            Ok(CalFitEntry {
                path: s.path.clone(),
                start_time: s.start_time,
                fit,
            })
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let jpath = ctx.path("cal_fit.json");
    write_json(&jpath, &fits)?;
    let mut s = String::from("start_time,beta,sigma_beta,Q,sigma_Q,f0_Hz,sigma_f0_Hz,sign,residual_rms\n");
    for e in &fits {
        let f = &e.fit;
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{},{},{:e},{:?},{:e}",
            e.start_time,
            f.beta.value,
            f.beta.sigma,
            f.q.value,
            f.q.sigma,
            f.f0.value,
            f.f0.sigma,
            f.sign,
            f.residual_rms
        );
    }
    let cpath = ctx.path("cal_fit.csv");
    write_text(&cpath, &s)?;
    let mut outputs = vec![jpath, cpath];
    if let Some(params) = &ctx.cfg.calibration.circuit {
        let f = &fits[0].fit;
        let d = derive(params, f.f0.value, f.q.value, Some(f.beta.value))?;
        let rel_b = f.beta.relative_sigma();
        let rel_c = ctx.cfg.calibration.rel_sigma_c;
        let conv = Conversion {
            volts_per_meter: volts_per_meter(&d, params),
            rel_sigma: (rel_c * rel_c + rel_b * rel_b).sqrt(),
            rel_sigma_c: rel_c,
            rel_sigma_beta: rel_b,
            beta: f.beta.value,
            q: f.q.value,
            f0: f.f0.value,
        };
        let p = ctx.path("conversion.json");
        write_json(&p, &conv)?;
        outputs.push(p);
    }
    Ok(Outcome {
        inputs: refs.iter().map(|s| s.path.clone()).collect(),
        outputs,
        message: format!("{} calibration sweeps fitted", fits.len()),
        ..Default::default()
    })
}

// ---- qfactor / powerlaw -----------------------------------------------

#[derive(Serialize)]
struct SweepFitRow {
    path: PathBuf,
    temperature_k: f64,
    direction: String,
    fc: f64,
    q: f64,
    sigma_q: f64,
}

pub fn qfactor(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.manifest()?;
    let q = &ctx.cfg.qfactor;
    let refs: Vec<&SweepRef> = m.sweeps.iter().filter(|s| s.kind == SweepKind::Driven).collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData("manifest lists no driven sweeps".into()));
    }
    let mfft_series = {
        let p = ctx.path("mfft_temperature.csv");
        if p.exists() && !q.steps.is_empty() {
            Some(read_temperature_series(&p, TemperatureSource::Mfft)?)
        } else {
            None
        }
    };
    let mut groups: BTreeMap<u64, (SweepGroup, Vec<PathBuf>)> = BTreeMap::new();
    for s in &refs {
        let rec = read_sweep(&s.path)?;
        let (t, sigma_t) = match (rec.temperature_k, &mfft_series) {
            (Some(t), _) => (t, 0.0),
            (None, Some(series)) => assign_step_temperature(s.start_time, &q.steps, series).ok_or_else(|| {
                Error::invalid(format!("{}: no temperature step covers the sweep", s.path.display()))
            })?,
            (None, None) => {
                return Err(Error::invalid(format!(
                    "{}: sweep has no temperature and no step assignment is configured",
                    s.path.display()
                )))
            }
        };
        let legs = DrivenSweep::from_record(&rec, q.meters_per_unit)?;
        let (g, paths) = groups.entry(t.to_bits()).or_insert_with(|| {
            (
                SweepGroup {
                    temperature_k: t,
                    sigma_t,
                    sweeps: Vec::new(),
                },
                Vec::new(),
            )
        });
        paths.extend(legs.iter().map(|_| s.path.clone()));
        g.sweeps.extend(legs);
    }
    let mut entries: Vec<(SweepGroup, Vec<PathBuf>)> = groups.into_values().collect();
    entries.sort_by(|a, b| a.0.temperature_k.total_cmp(&b.0.temperature_k));
    let (groups, leg_paths): (Vec<SweepGroup>, Vec<Vec<PathBuf>>) = entries.into_iter().unzip();
    let opts = LorentzianOptions {
        seed: ctx.cfg.seed,
        ..q.lorentzian.clone()
    };
    let points = split_and_pool(&groups, &opts)?;
    let qpath = ctx.path("q_table.csv");
    write_q_table(&points, &qpath)?;

    let mut rows = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (j, s) in g.sweeps.iter().enumerate() {
            let o = LorentzianOptions {
                seed: opts.seed.wrapping_add(1000 * gi as u64 + j as u64),
                ..opts.clone()
            };
            if let Ok(f) = fit_lorentzian(s, &o) {
                rows.push(SweepFitRow {
                    path: leg_paths[gi][j].clone(),
                    temperature_k: g.temperature_k,
                    direction: format!("{:?}", f.direction).to_lowercase(),
                    fc: f.fc.value,
                    q: f.q.value,
                    sigma_q: f.q.sigma,
                });
            }
        }
    }
    let fpath = ctx.path("sweep_fits.json");
    write_json(&fpath, &rows)?;
    Ok(Outcome {
        inputs: refs.iter().map(|s| s.path.clone()).collect(),
        outputs: vec![qpath, fpath],
        message: format!("{} temperatures, {} sweep legs fitted", points.len(), rows.len()),
        ..Default::default()
    })
}

pub fn powerlaw(ctx: &Ctx) -> Result<Outcome> {
    let qpath = ctx.path("q_table.csv");
    let pts = read_q_table(&qpath)?;
    let fit = fit_power_law(&pts)?;
    let path = ctx.path("powerlaw.json");
    write_json(&path, &fit)?;
    Ok(Outcome {
        inputs: vec![qpath],
        outputs: vec![path],
        message: format!("alpha = {:.4} +- {:.4}", fit.alpha.value, fit.alpha.sigma),
        ..Default::default()
    })
}

// ---- thermal ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermalRow {
    pub path: PathBuf,
    pub time_s: f64,
    pub t_sample_k: Option<f64>,
    pub temperature_k: f64,
    pub sigma_k: f64,
    pub peak_power_m2: f64,
    pub background_m2_per_hz: f64,
    pub flags: Vec<ThermalFlag>,
}

#[derive(Serialize)]
struct Screening {
    accepted: Vec<PathBuf>,
    excluded: Vec<(PathBuf, f64)>,
}

pub fn thermal(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.manifest()?;
    let c = &ctx.cfg.thermal;
    let refs: Vec<TraceRef> = m.traces_on(Channel::ReadoutSquid).cloned().collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData("manifest lists no readout_squid traces".into()));
    }
    let scale = c.volts_per_meter.map_or(1.0, |v| 1.0 / (v * v));
    let results: Vec<Result<(bool, f64, Option<ThermalRow>)>> = refs
        .par_iter()
        .map(|t| {
            let tr = read_trace(&t.path, t.format)?;
            let sc = screen_trace(&tr, &c.screening);
            if !sc.accepted {
                return Ok((false, sc.max_jump_sigma, None));
            }
            let cfg = ctx.cfg.welch.thermal.for_rate(tr.sample_rate())?;
            let psd = welch_psd(&tr, &cfg)?.scaled(scale)?;
            let r = extract_thermal_peak(&psd, &c.peak, c.k)?;
            Ok((
                true,
                sc.max_jump_sigma,
                Some(ThermalRow {
                    path: t.path.clone(),
                    time_s: mid_time(t, tr.duration()),
                    t_sample_k: t.sample_temperature_k,
                    temperature_k: r.temperature_k,
                    sigma_k: r.sigma_k,
                    peak_power_m2: r.peak_power,
                    background_m2_per_hz: r.background_level,
                    flags: r.flags,
                }),
            ))
        })
        .collect();
    let mut rows = Vec::new();
    let mut screening = Screening {
        accepted: Vec::new(),
        excluded: Vec::new(),
    };
    for (t, r) in refs.iter().zip(results) {
        let (ok, z, row) = r?;
        if ok {
            screening.accepted.push(t.path.clone());
        } else {
            screening.excluded.push((t.path.clone(), z));
        }
        rows.extend(row);
    }
    let mut series = TemperatureSeries::new(TemperatureSource::Cantilever);
    let mut sample = TemperatureSeries::new(TemperatureSource::Reference);
    for r in &rows {
        let flags = r.flags.iter().map(|f| format!("{f:?}").to_lowercase()).collect();
        series.push(r.time_s, r.temperature_k, r.sigma_k, flags);
        if let Some(ts) = r.t_sample_k {
            sample.push(r.time_s, ts, 0.0, Vec::new());
        }
    }
    let spath = ctx.path("cantilever_temperature.csv");
    write_temperature_series(&series, &spath)?;
    let jpath = ctx.path("thermal_peaks.json");
    write_json(&jpath, &rows)?;
    let scpath = ctx.path("screening.json");
    write_json(&scpath, &screening)?;
    let mut outputs = vec![spath, jpath, scpath];

    let mut note = String::new();
    if let (Some(q), Some(fc), false) = (c.q, c.fc, sample.points.is_empty()) {
        let t_meas = stats::median(
            &refs
                .iter()
                .map(|t| read_trace_duration(t))
                .collect::<Result<Vec<_>>>()?,
        );
        let plateaus = detect_plateaus(&sample, &c.plateau)?;
        let long: Vec<_> = plateaus
            .into_iter()
            .filter(|p| series.points.iter().filter(|x| x.time_s >= p.t_start && x.time_s <= p.t_end).count() >= 10)
            .collect();
        let vcfg = VibrationConfig {
            q,
            fc,
            t_meas,
            window: c.vibration_window,
            expected_fraction: 0.05,
            significance: 2.0,
        };
        let reports = flag_vibration_epochs(&series, &long, &vcfg)?;
        let ppath = ctx.path("plateau_report.csv");
        write_plateau_report(&reports, &ppath)?;
        let pj = ctx.path("plateau_report.json");
        write_json(&pj, &reports)?;
        outputs.extend([ppath, pj]);
        let rel = calibration_rel_sigma(c.rel_c, c.rel_beta);
        let bath: Vec<BathPoint> = reports.iter().map(|r| bath_point(r, &series, rel)).collect();
        if let Ok(fit) = fit_bath_coupling(&bath) {
            let bpath = ctx.path("bath_fit.json");
            write_json(&bpath, &fit)?;
            outputs.push(bpath);
            let _ = write!(note, ", bath slope {:.4} +- {:.4}", fit.value, fit.sigma);
        }
        let _ = write!(note, ", {} plateaus", reports.len());
    }
    let clean = rows.iter().filter(|r| r.flags.is_empty()).count();
    Ok(Outcome {
        inputs: trace_inputs(&refs),
        outputs,
        flagged_only: clean == 0,
        message: format!(
            "{} traces analysed, {} excluded by screening{note}",
            rows.len(),
            screening.excluded.len()
        ),
    })
}

fn read_trace_duration(t: &TraceRef) -> Result<f64> {
    let h = cryotherm::sigio::read_trace_header(&t.path, t.format)?;
    match h.n_samples {
        Some(n) => Ok(n as f64 / h.sample_rate),
        None => Ok(read_trace(&t.path, t.format)?.duration()),
    }
}

fn bath_point(r: &PlateauReport, series: &TemperatureSeries, rel_cal: f64) -> BathPoint {
    let t: Vec<f64> = series
        .points
        .iter()
        .filter(|p| p.time_s >= r.t_start && p.time_s <= r.t_end)
        .map(|p| p.temperature_k)
        .collect();
    BathPoint {
        t_sample: r.t_sample,
        t_cantilever: r.t_cantilever_mean,
        sigma_stat: stats::std_dev(&t) / (t.len() as f64).sqrt(),
        rel_cal,
    }
}

// ---- report -----------------------------------------------------------

pub fn report(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::default();
    let dir = ctx.path("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mt = ctx.path("mfft_temperature.csv");
    if mt.exists() {
        let s = read_temperature_series(&mt, TemperatureSource::Mfft)?;
        let mut csv = String::from("time_h,T_mfft_mK,sigma_T_mK,flags\n");
        for p in &s.points {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                p.time_s / 3600.0,
                p.temperature_k * 1e3,
                p.sigma_k * 1e3,
                p.flags.join("|")
            );
        }
        let p = dir.join("fig2_temperature_vs_time.csv");
        write_text(&p, &csv)?;
        out.inputs.push(mt);
        out.outputs.push(p);
    }

    let qt = ctx.path("q_table.csv");
    if qt.exists() {
        let pts: Vec<QPoint> = read_q_table(&qt)?;
        let pl = ctx.path("powerlaw.json");
        let fit: Option<PowerLawFit> = if pl.exists() { Some(read_json(&pl)?) } else { None };
        let mut csv = String::from("T_mK,sigma_T_mK,inv_Q,sigma_inv_Q,fit_inv_Q\n");
        for p in &pts {
            let fitted = fit.as_ref().map_or(String::new(), |f| format!("{:e}", 1.0 / f.q_at(p.temperature_k)));
            let _ = writeln!(
                csv,
                "{},{},{:e},{:e},{fitted}",
                p.temperature_k * 1e3,
                p.sigma_t * 1e3,
                1.0 / p.q,
                p.sigma_q / (p.q * p.q)
            );
        }
        let p = dir.join("fig3d_inverse_q_vs_t.csv");
        write_text(&p, &csv)?;
        out.inputs.push(qt);
        if pl.exists() {
            out.inputs.push(pl);
        }
        out.outputs.push(p);
    }

    let pr = ctx.path("plateau_report.json");
    let tp = ctx.path("thermal_peaks.json");
    if pr.exists() {
        let rows: Vec<PlateauReport> = read_json(&pr)?;
        let bf = ctx.path("bath_fit.json");
        let slope: Option<stats::Estimate> = if bf.exists() { Some(read_json(&bf)?) } else { None };
        let mut csv = String::from("T_sample_mK,T_cantilever_mK,band_4dT_mK,out_of_band_fraction,n_flagged,fit_T_cantilever_mK\n");
        for r in &rows {
            let fitted = slope.map_or(String::new(), |s| format!("{}", s.value * r.t_sample * 1e3));
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{fitted}",
                r.t_sample * 1e3,
                r.t_cantilever_mean * 1e3,
                r.delta_t_band * 1e3,
                r.out_of_band_fraction,
                r.flagged.len()
            );
        }
        let p = dir.join("fig4b_cantilever_vs_sample.csv");
        write_text(&p, &csv)?;
        out.inputs.push(pr);
        out.outputs.push(p);
    } else if tp.exists() {
        let rows: Vec<ThermalRow> = read_json(&tp)?;
        let mut csv = String::from("time_h,T_sample_mK,T_cantilever_mK,sigma_mK,flags\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.time_s / 3600.0,
                r.t_sample_k.map_or(String::new(), |t| (t * 1e3).to_string()),
                r.temperature_k * 1e3,
                r.sigma_k * 1e3,
                r.flags.iter().map(|f| format!("{f:?}").to_lowercase()).collect::<Vec<_>>().join("|")
            );
        }
        let p = dir.join("fig4b_cantilever_vs_sample.csv");
        write_text(&p, &csv)?;
        out.inputs.push(tp);
        out.outputs.push(p);
    }

    if out.outputs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no module outputs found in {}",
            ctx.out_dir.display()
        )));
    }
    out.message = format!("{} report tables", out.outputs.len());
    Ok(out)
}
