//! Adversarial MFCC noise for speech privacy.
//!
//! The crate perturbs speech so that the MFCC features an ASR front end
//! extracts are pushed far from their clean values while the waveform
//! change stays small and is steered away from the most audible band.

pub mod adversarial;
pub mod audio;
pub mod error;
pub mod eval;
pub mod masking;
pub mod metrics;
pub mod mfcc;
pub mod scheduler;
pub mod synth;

pub use adversarial::{
    apply_noise, cost, estimate_env_level, generate_noise, gradient_wrt_waveform,
    AdversarialEngine, AttackConfig, AttackMode, EnvNoiseProfile, NoiseSpectrum,
};
pub use audio::{read_wav, resample_check, write_wav, AudioBuffer};
pub use error::{Error, Result};
pub use eval::{
    random_noise_baseline, read_manifest, run_batch, BatchConfig, BatchOutcome, ClipSpec,
    ExternalConfig, ExternalProvider, PerturbationReport, StubProvider, TranscriptionProvider,
};
pub use masking::{GainMap, MaskParams};
pub use metrics::{feature_distortion, word_error_rate, Transcript};
pub use mfcc::{CepstralFeatures, MfccConfig, MfccPipeline};
pub use scheduler::{
    plan_iterations, process_stream, Clock, CostModel, LatencyProfile, ScheduleDecision,
    SimulatedClock, StreamConfig, WallClock,
};
