//! Measurement-analysis chain for a sub-kHz cryogenic cantilever experiment:
//! flux-noise thermometry, two-stage SQUID readout calibration, quality-factor
//! extraction, thermal-motion thermometry, and a seeded synthesizer that
//! generates the corresponding raw signals.

pub mod circuit;
pub mod constants;
pub mod error;
pub mod mfft;
pub mod resonator;
pub mod sigio;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod thermal;

pub use error::{Error, Result};
