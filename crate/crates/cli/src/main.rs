mod commands;
mod config;
mod runlog;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cryotherm::sigio::RunManifest;
use cryotherm::Error;

use commands::{Ctx, Outcome};
use config::PipelineConfig;
use runlog::{digests, file_digest, sha256_hex, RunLog};

const EXIT_INPUT: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_FLAGGED_ONLY: u8 = 4;

#[derive(Parser)]
#[command(name = "cryotherm", version, about = "Batch analysis of cryogenic cantilever thermometry runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run manifest listing traces and sweeps.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `jobs` in the config.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate synthetic traces and sweeps plus their manifest.
    Synth,
    /// Welch spectra of every squid trace.
    Psd,
    /// Interference mask over the flux-noise spectra.
    MfftMask,
    /// Band power against reference temperature.
    MfftCalibrate,
    /// Flux-noise temperature series.
    MfftTemp,
    /// Readout-circuit fit of calibration sweeps.
    CalFit,
    /// Quality factor per temperature from driven sweeps.
    Qfactor,
    /// Power-law fit of 1/Q(T) from the q_table.
    Powerlaw,
    /// Cantilever temperature from thermal motion.
    Thermal,
    /// Plot-ready tables from earlier outputs.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Psd => "psd",
            Command::MfftMask => "mfft-mask",
            Command::MfftCalibrate => "mfft-calibrate",
            Command::MfftTemp => "mfft-temp",
            Command::CalFit => "cal-fit",
            Command::Qfactor => "qfactor",
            Command::Powerlaw => "powerlaw",
            Command::Thermal => "thermal",
            Command::Report => "report",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence(_)
        | Error::UnstableFit { .. }
        | Error::ResonanceOutsideBand(_)
        | Error::PeakAtEdge
        | Error::NonPositiveSlope(_) => EXIT_NONCONVERGENCE,
        Error::BelowNoiseFloor { .. } => EXIT_FLAGGED_ONLY,
        _ => EXIT_INPUT,
    }
}

fn load(cli: &Cli) -> cryotherm::Result<(Ctx, Vec<PathBuf>)> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    cfg.validate()?;
    let manifest = cli.manifest.as_ref().map(RunManifest::load).transpose()?;
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let mut inputs: Vec<PathBuf> = cli.config.iter().chain(&cli.manifest).cloned().collect();
    inputs.dedup();
    Ok((
        Ctx {
            cfg,
            manifest,
            out_dir: cli.out_dir.clone(),
        },
        inputs,
    ))
}

fn run(cli: &Cli, ctx: &Ctx) -> cryotherm::Result<Outcome> {
    let work = || match cli.command {
        Command::Synth => commands::synth(ctx),
        Command::Psd => commands::psd(ctx),
        Command::MfftMask => commands::mfft_mask(ctx),
        Command::MfftCalibrate => commands::mfft_calibrate(ctx),
        Command::MfftTemp => commands::mfft_temp(ctx),
        Command::CalFit => commands::cal_fit(ctx),
        Command::Qfactor => commands::qfactor(ctx),
        Command::Powerlaw => commands::powerlaw(ctx),
        Command::Thermal => commands::thermal(ctx),
        Command::Report => commands::report(ctx),
    };
    match ctx.cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let (ctx, extra_inputs) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("cryotherm {name}: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let config_sha256 = sha256_hex(&serde_json::to_vec(&ctx.cfg).expect("config serializes"));
    let result = run(&cli, &ctx);
    let (code, message, inputs, outputs) = match &result {
        Ok(o) => (
            if o.flagged_only { EXIT_FLAGGED_ONLY } else { 0 },
            o.message.clone(),
            o.inputs.clone(),
            o.outputs.clone(),
        ),
        Err(e) => (exit_code(e), e.to_string(), Vec::new(), Vec::new()),
    };
    let mut input_digests: Vec<_> = extra_inputs.iter().filter_map(|p| file_digest(p).ok()).collect();
    input_digests.extend(digests(&inputs));
    let log = RunLog {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.cfg.seed,
        jobs: ctx.cfg.jobs,
        config_sha256,
        inputs: input_digests,
        outputs: digests(&outputs),
        exit_code: code as i32,
        message: message.clone(),
    };
    if let Err(e) = log.write(&ctx.out_dir) {
        eprintln!("cryotherm {name}: could not write log: {e}");
    }
    match result {
        Ok(_) if code == 0 => println!("{name}: {message}"),
        Ok(_) => eprintln!("{name}: flagged data only: {message}"),
        Err(_) => eprintln!("cryotherm {name}: {message}"),
    }
    ExitCode::from(code)
}
