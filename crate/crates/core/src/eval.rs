//! Batch evaluation: random-noise baselines, transcription providers and
//! per-clip / aggregate reports.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    add_clamped, AdversarialEngine, AttackConfig, IterationRecord, NoiseSpectrum,
};
use crate::audio::{encode_wav, read_wav, resample_check, AudioBuffer, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::masking::{audible_cells, cell_energy, MaskParams};
use crate::metrics::{feature_distortion, snr_db, word_error_rate, Transcript};
use crate::mfcc::MfccConfig;

const SNR_TOLERANCE_DB: f64 = 0.01;
const SNR_REFINEMENTS: usize = 20;

/// `buffer` plus zero-mean uniform noise whose realized SNR (measured on
/// output minus input, after clamping to full scale) is `target_snr_db`.
pub fn random_noise_baseline(
    buffer: &AudioBuffer,
    target_snr_db: f64,
    seed: u64,
) -> Result<AudioBuffer> {
    let x = buffer.samples();
    let signal_rms = buffer.rms();
    if signal_rms == 0.0 {
        return Err(Error::SilentInput);
    }
    if !target_snr_db.is_finite() {
        return Err(Error::config("target_snr_db", "must be finite"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = shape.iter().sum::<f64>() / shape.len() as f64;
    shape.iter_mut().for_each(|v| *v -= mean);
    let shape_rms = crate::audio::rms(&shape);
    if shape_rms == 0.0 {
        return Err(Error::config(
            "target_snr_db",
            "input too short for a noise baseline",
        ));
    }

    let mut gain = signal_rms * 10f64.powf(-target_snr_db / 20.0) / shape_rms;
    let mut out = mix(buffer, &shape, gain)?;
    // clamping at full scale eats noise; rescale until the realized SNR lands
    for _ in 0..SNR_REFINEMENTS {
        let realized = realized_snr(x, out.samples());
        if (realized - target_snr_db).abs() <= SNR_TOLERANCE_DB || !realized.is_finite() {
            break;
        }
        gain *= 10f64.powf((realized - target_snr_db) / 20.0);
        out = mix(buffer, &shape, gain)?;
    }
    Ok(out)
}

fn mix(buffer: &AudioBuffer, shape: &[f64], gain: f64) -> Result<AudioBuffer> {
    let noise: Vec<f64> = shape.iter().map(|v| v * gain).collect();
    add_clamped(buffer, &noise)
}

fn realized_snr(clean: &[f64], noisy: &[f64]) -> f64 {
    let noise: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    snr_db(clean, &noise)
}

/// Offline provider: transcripts come from a clip id keyed mapping.
///
/// A lookup for `clip#variant` falls back to `clip` when the variant key is
/// absent, so a mapping can script distinct transcripts per perturbation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubProvider {
    mapping: HashMap<String, String>,
}

impl StubProvider {
    pub fn new(mapping: HashMap<String, String>) -> Self {
        Self { mapping }
    }

    /// Reads a JSON object of `clip_id -> transcript`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    pub fn transcribe(&self, clip_id: &str) -> Result<Transcript> {
        self.mapping
            .get(clip_id)
            .or_else(|| {
                clip_id
                    .split_once('#')
                    .and_then(|(base, _)| self.mapping.get(base))
            })
            .map(|t| Transcript::from_text(t))
            .ok_or_else(|| Error::UnmappedClip(clip_id.to_string()))
    }
}

/// Connection settings for an HTTP transcription service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub max_concurrent: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            token_env: None,
            timeout_ms: 30_000,
            max_concurrent: 4,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    ready: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            ready: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.ready.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.ready.notify_one();
    }
}

#[derive(Deserialize)]
struct ServiceReply {
    text: String,
}

/// HTTP provider. Each request POSTs the clip as a 16-bit WAV body
/// (`Content-Type: audio/wav`, clip id in `X-Clip-Id`) and expects a JSON
/// reply `{"text": "..."}`.
#[derive(Debug)]
pub struct ExternalProvider {
    config: ExternalConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl ExternalProvider {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("provider.endpoint", "must be set"));
        }
        if config.timeout_ms == 0 {
            return Err(Error::config("provider.timeout_ms", "must be > 0"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::config("provider.endpoint", e.to_string()))?;
        let permits = Permits::new(config.max_concurrent);
        Ok(Self {
            config,
            client,
            permits,
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    pub fn transcribe(&self, clip_id: &str, audio: &AudioBuffer) -> Result<Transcript> {
        let body = encode_wav(audio)?;
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let unavailable = |reason: String| Error::ProviderUnavailable {
            elapsed_ms: started.elapsed().as_millis() as u64,
            reason,
        };

        let mut request = self
            .client
            .post(&self.config.endpoint)
            .header("Content-Type", "audio/wav")
            .header("X-Clip-Id", clip_id)
            .body(body);
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var)
                .map_err(|_| Error::config("provider.token_env", format!("{var} is not set")))?;
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            unavailable(if e.is_timeout() {
                "request timed out".to_string()
            } else {
                e.to_string()
            })
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(unavailable(format!("service answered {status}")));
        }
        let text = response.text().map_err(|e| unavailable(e.to_string()))?;
        let reply: ServiceReply =
            serde_json::from_str(&text).map_err(|e| unavailable(format!("bad reply: {e}")))?;
        Ok(Transcript::from_text(&reply.text))
    }
}

/// Source of hypotheses for WER.
#[derive(Debug)]
pub enum TranscriptionProvider {
    Stub(StubProvider),
    External(ExternalProvider),
}

impl TranscriptionProvider {
    pub fn transcribe(&self, clip_id: &str, audio: &AudioBuffer) -> Result<Transcript> {
        match self {
            Self::Stub(p) => p.transcribe(clip_id),
            Self::External(p) => p.transcribe(clip_id, audio),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_id: String,
    pub wav_path: PathBuf,
    pub reference_text: String,
}

/// Reads a `clip_id,wav_path,reference_text` CSV. Relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipSpec>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    reader
        .deserialize::<ClipSpec>()
        .map(|row| {
            let mut clip = row?;
            if clip.wav_path.is_relative() {
                clip.wav_path = base.join(&clip.wav_path);
            }
            Ok(clip)
        })
        .collect()
}

/// Everything a batch run needs besides the clips.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchConfig {
    pub mfcc: MfccConfig,
    pub attack: AttackConfig,
    pub mask: MaskParams,
    /// Base seed of the random baselines; each clip mixes in its id.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipError {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ClipError {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// Wall-clock cost of each stage of one clip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_ms: f64,
    pub unmasked_ms: f64,
    pub masked_ms: f64,
    pub transcribe_ms: f64,
}

/// Results for one clip. Metric fields are `None` when the clip failed or
/// when no provider was configured (WER fields).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub clip_id: String,
    pub status: Option<ClipStatus>,
    pub error: Option<ClipError>,
    pub iterations: usize,
    /// SNR of the unmasked adversarial noise.
    pub noise_snr_db: Option<f64>,
    /// Cepstral distortion caused by the unmasked adversarial noise.
    pub feature_distortion: Option<f64>,
    pub masked_noise_snr_db: Option<f64>,
    pub masked_feature_distortion: Option<f64>,
    /// Realized SNR of the random baseline, matched to `noise_snr_db`.
    pub random_snr_db: Option<f64>,
    pub random_feature_distortion: Option<f64>,
    /// Noise energy in the audible cells (sensitive band, outside boost
    /// neighbourhoods) without and with masking.
    pub audible_energy_unmasked: Option<f64>,
    pub audible_energy_masked: Option<f64>,
    pub wer_clean: Option<f64>,
    pub wer_adv: Option<f64>,
    pub wer_adv_masked: Option<f64>,
    pub wer_random: Option<f64>,
    pub timings: Timings,
    pub trace_unmasked: Vec<IterationRecord>,
    pub trace_masked: Vec<IterationRecord>,
}

impl PerturbationReport {
    fn failed(clip_id: &str, iterations: usize, error: &Error, timings: Timings) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            status: Some(ClipStatus::Error),
            error: Some(error.into()),
            iterations,
            timings,
            ..Self::default()
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Some(ClipStatus::Ok)
    }

    /// Fractional drop in audible noise energy due to masking.
    pub fn audible_reduction(&self) -> Option<f64> {
        match (self.audible_energy_unmasked, self.audible_energy_masked) {
            (Some(u), Some(m)) if u > 0.0 => Some(1.0 - m / u),
            _ => None,
        }
    }
}

/// Mean curve point over successful clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_cost: f64,
    pub mean_distortion: f64,
    pub mean_masked_cost: f64,
    pub mean_masked_distortion: f64,
}

/// Batch-level means over successful clips.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSummary {
    pub clips: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub mean_feature_distortion: Option<f64>,
    pub mean_masked_feature_distortion: Option<f64>,
    pub mean_random_feature_distortion: Option<f64>,
    pub mean_noise_snr_db: Option<f64>,
    pub mean_audible_reduction: Option<f64>,
    pub mean_wer_clean: Option<f64>,
    pub mean_wer_adv: Option<f64>,
    pub mean_wer_adv_masked: Option<f64>,
    pub mean_wer_random: Option<f64>,
    /// Mean wall-clock ms to reach each iteration, unmasked.
    pub mean_elapsed_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub reports: Vec<PerturbationReport>,
    pub summary: BatchSummary,
    pub curves: Vec<CurvePoint>,
}

/// Aggregate CSV row. Column order is the file format.
#[derive(Serialize)]
struct AggregateRow<'a> {
    clip_id: &'a str,
    status: &'a str,
    error_kind: &'a str,
    iterations: usize,
    noise_snr_db: Option<f64>,
    feature_distortion: Option<f64>,
    masked_noise_snr_db: Option<f64>,
    masked_feature_distortion: Option<f64>,
    random_snr_db: Option<f64>,
    random_feature_distortion: Option<f64>,
    audible_reduction: Option<f64>,
    wer_clean: Option<f64>,
    wer_adv: Option<f64>,
    wer_adv_masked: Option<f64>,
    wer_random: Option<f64>,
}

/// Header of `aggregate.csv`.
pub const AGGREGATE_COLUMNS: [&str; 15] = [
    "clip_id",
    "status",
    "error_kind",
    "iterations",
    "noise_snr_db",
    "feature_distortion",
    "masked_noise_snr_db",
    "masked_feature_distortion",
    "random_snr_db",
    "random_feature_distortion",
    "audible_reduction",
    "wer_clean",
    "wer_adv",
    "wer_adv_masked",
    "wer_random",
];

/// Header of `curves.csv`.
pub const CURVE_COLUMNS: [&str; 5] = [
    "iteration",
    "mean_cost",
    "mean_distortion",
    "mean_masked_cost",
    "mean_masked_distortion",
];

impl BatchOutcome {
    /// One row per clip, in input order. Contains no timing columns, so it
    /// is byte-identical across runs with the same inputs and seed.
    pub fn aggregate_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record(AGGREGATE_COLUMNS)?;
        for r in &self.reports {
            w.serialize(AggregateRow {
                clip_id: &r.clip_id,
                status: if r.is_ok() { "ok" } else { "error" },
                error_kind: r.error.as_ref().map_or("", |e| e.kind.as_str()),
                iterations: r.iterations,
                noise_snr_db: r.noise_snr_db,
                feature_distortion: r.feature_distortion,
                masked_noise_snr_db: r.masked_noise_snr_db,
                masked_feature_distortion: r.masked_feature_distortion,
                random_snr_db: r.random_snr_db,
                random_feature_distortion: r.random_feature_distortion,
                audible_reduction: r.audible_reduction(),
                wer_clean: r.wer_clean,
                wer_adv: r.wer_adv,
                wer_adv_masked: r.wer_adv_masked,
                wer_random: r.wer_random,
            })?;
        }
        finish_csv(w)
    }

    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record(CURVE_COLUMNS)?;
        for p in &self.curves {
            w.serialize(p)?;
        }
        finish_csv(w)
    }

    /// Writes `aggregate.csv`, `curves.csv`, `summary.json` and
    /// `reports/<clip_id>.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let reports = dir.join("reports");
        fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        write_file(&dir.join("aggregate.csv"), self.aggregate_csv()?.as_bytes())?;
        write_file(&dir.join("curves.csv"), self.curves_csv()?.as_bytes())?;
        write_file(
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary)?.as_bytes(),
        )?;
        for r in &self.reports {
            let path = reports.join(format!("{}.json", file_stem(&r.clip_id)));
            write_file(&path, serde_json::to_string_pretty(r)?.as_bytes())?;
        }
        Ok(())
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn file_stem(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// FNV-1a, used to derive a stable per-clip seed from its id.
fn clip_seed(base: u64, clip_id: &str) -> u64 {
    clip_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    }) ^ base
}

/// Runs every clip and aggregates. Clip failures are recorded in their
/// report and never abort the batch. Clips are processed in parallel; report
/// order follows `clips`.
pub fn run_batch(
    clips: &[ClipSpec],
    config: &BatchConfig,
    provider: Option<&TranscriptionProvider>,
) -> Result<BatchOutcome> {
    config.attack.validate()?;
    config.mask.validate()?;
    config.mfcc.validate(CANONICAL_SAMPLE_RATE)?;
    let engine = AdversarialEngine::new(config.mfcc.clone(), CANONICAL_SAMPLE_RATE)?;

    let reports: Vec<PerturbationReport> = clips
        .par_iter()
        .map(|clip| {
            let started = Instant::now();
            match read_wav(&clip.wav_path).and_then(|b| resample_check(b, CANONICAL_SAMPLE_RATE)) {
                Ok(buffer) => {
                    let timings = Timings {
                        load_ms: ms_since(started),
                        ..Timings::default()
                    };
                    evaluate_clip(
                        &engine,
                        &clip.clip_id,
                        &buffer,
                        &clip.reference_text,
                        config,
                        provider,
                        timings,
                    )
                }
                Err(e) => PerturbationReport::failed(
                    &clip.clip_id,
                    config.attack.iterations,
                    &e,
                    Timings::default(),
                ),
            }
        })
        .collect();

    let summary = summarize(&reports);
    let curves = mean_curves(&reports, config.attack.iterations);
    Ok(BatchOutcome {
        reports,
        summary,
        curves,
    })
}

/// All metrics for one in-memory clip. `reference_text` may be empty when no
/// provider is used.
pub fn evaluate_clip(
    engine: &AdversarialEngine,
    clip_id: &str,
    buffer: &AudioBuffer,
    reference_text: &str,
    config: &BatchConfig,
    provider: Option<&TranscriptionProvider>,
    mut timings: Timings,
) -> PerturbationReport {
    let iterations = config.attack.iterations;
    let mut report = PerturbationReport {
        clip_id: clip_id.to_string(),
        iterations,
        ..PerturbationReport::default()
    };
    let result = (|| -> Result<()> {
        if buffer.rms() == 0.0 {
            return Err(Error::SilentInput);
        }
        let x = buffer.samples();
        let pipe = engine.pipeline();
        let clean = pipe.features(x)?;

        let t0 = Instant::now();
        let unmasked_cfg = AttackConfig {
            use_masking: false,
            ..config.attack.clone()
        };
        let unmasked = engine.generate(buffer, &unmasked_cfg, None)?;
        timings.unmasked_ms = ms_since(t0);

        let t0 = Instant::now();
        let speech_power = engine.speech_power(x);
        let mask = crate::masking::build_gain_map(&speech_power, pipe.sample_rate(), &config.mask)?;
        let masked_cfg = AttackConfig {
            use_masking: true,
            ..config.attack.clone()
        };
        let masked = engine.generate(buffer, &masked_cfg, Some(&mask))?;
        timings.masked_ms = ms_since(t0);

        let adv = add_clamped(buffer, &unmasked.waveform)?;
        let adv_masked = add_clamped(buffer, &masked.waveform)?;
        let snr = noise_snr(buffer, &unmasked);
        let random = random_noise_baseline(buffer, snr, clip_seed(config.seed, clip_id))?;

        report.noise_snr_db = Some(snr);
        report.masked_noise_snr_db = Some(noise_snr(buffer, &masked));
        report.random_snr_db = Some(realized_snr(x, random.samples()));
        report.feature_distortion =
            Some(feature_distortion(&clean, &pipe.features(adv.samples())?)?);
        report.masked_feature_distortion = Some(feature_distortion(
            &clean,
            &pipe.features(adv_masked.samples())?,
        )?);
        report.random_feature_distortion = Some(feature_distortion(
            &clean,
            &pipe.features(random.samples())?,
        )?);

        let cells = audible_cells(&speech_power, pipe.sample_rate(), &config.mask);
        report.audible_energy_unmasked =
            Some(cell_energy(engine.shaper(), &unmasked.waveform, &cells));
        report.audible_energy_masked = Some(cell_energy(engine.shaper(), &masked.waveform, &cells));
        report.trace_unmasked = unmasked.trace;
        report.trace_masked = masked.trace;

        if let Some(p) = provider {
            let t0 = Instant::now();
            let reference = Transcript::from_text(reference_text);
            let wer = |variant: &str, audio: &AudioBuffer| -> Result<f64> {
                let id = if variant.is_empty() {
                    clip_id.to_string()
                } else {
                    format!("{clip_id}#{variant}")
                };
                word_error_rate(&reference, &p.transcribe(&id, audio)?)
            };
            report.wer_clean = Some(wer("", buffer)?);
            report.wer_adv = Some(wer("adv", &adv)?);
            report.wer_adv_masked = Some(wer("masked", &adv_masked)?);
            report.wer_random = Some(wer("random", &random)?);
            timings.transcribe_ms = ms_since(t0);
        }
        Ok(())
    })();

    report.timings = timings;
    match result {
        Ok(()) => {
            report.status = Some(ClipStatus::Ok);
            report
        }
        Err(e) => PerturbationReport::failed(clip_id, iterations, &e, timings),
    }
}

fn noise_snr(buffer: &AudioBuffer, noise: &NoiseSpectrum) -> f64 {
    snr_db(buffer.samples(), &noise.waveform)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(reports: &[PerturbationReport]) -> BatchSummary {
    let ok: Vec<&PerturbationReport> = reports.iter().filter(|r| r.is_ok()).collect();
    let mean = |f: fn(&PerturbationReport) -> Option<f64>| mean_of(ok.iter().map(|r| f(r)));
    let iterations = ok.iter().map(|r| r.trace_unmasked.len()).max().unwrap_or(0);
    let mean_elapsed_ms = (0..iterations)
        .filter_map(|i| {
            mean_of(
                ok.iter()
                    .map(|r| r.trace_unmasked.get(i).map(|t| t.elapsed_ms)),
            )
        })
        .collect();
    BatchSummary {
        clips: reports.len(),
        succeeded: ok.len(),
        failed: reports.len() - ok.len(),
        mean_feature_distortion: mean(|r| r.feature_distortion),
        mean_masked_feature_distortion: mean(|r| r.masked_feature_distortion),
        mean_random_feature_distortion: mean(|r| r.random_feature_distortion),
        mean_noise_snr_db: mean(|r| r.noise_snr_db),
        mean_audible_reduction: mean(|r| r.audible_reduction()),
        mean_wer_clean: mean(|r| r.wer_clean),
        mean_wer_adv: mean(|r| r.wer_adv),
        mean_wer_adv_masked: mean(|r| r.wer_adv_masked),
        mean_wer_random: mean(|r| r.wer_random),
        mean_elapsed_ms,
    }
}

fn mean_curves(reports: &[PerturbationReport], iterations: usize) -> Vec<CurvePoint> {
    let ok: Vec<&PerturbationReport> = reports.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Vec::new();
    }
    let at = |trace: fn(&PerturbationReport) -> &Vec<IterationRecord>,
              field: fn(&IterationRecord) -> f64,
              i: usize| {
        mean_of(ok.iter().map(|r| trace(r).get(i).map(field))).unwrap_or(f64::NAN)
    };
    (0..iterations)
        .map(|i| CurvePoint {
            iteration: i + 1,
            mean_cost: at(|r| &r.trace_unmasked, |t| t.cost, i),
            mean_distortion: at(|r| &r.trace_unmasked, |t| t.distortion, i),
            mean_masked_cost: at(|r| &r.trace_masked, |t| t.cost, i),
            mean_masked_distortion: at(|r| &r.trace_masked, |t| t.distortion, i),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::synth::speech_like;
    use std::io::{BufRead, BufReader, Read as _, Write as _};
    use std::net::TcpListener;

    #[test]
    fn baseline_hits_twenty_db_on_unit_rms() {
        let x = AudioBuffer::new(
            (0..4000)
                .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
            16_000,
        )
        .unwrap();
        let y = random_noise_baseline(&x, 20.0, 1).unwrap();
        let noise: Vec<f64> = y
            .samples()
            .iter()
            .zip(x.samples())
            .map(|(a, b)| a - b)
            .collect();
        let noise_db = 20.0 * crate::audio::rms(&noise).log10();
        assert!((noise_db - -20.0).abs() <= 0.1, "{noise_db}");
    }

    #[test]
    fn baseline_is_deterministic_and_matched() {
        let x = speech_like(500.0, 16_000, 9);
        let a = random_noise_baseline(&x, 15.0, 4).unwrap();
        assert_eq!(a, random_noise_baseline(&x, 15.0, 4).unwrap());
        assert_ne!(a, random_noise_baseline(&x, 15.0, 5).unwrap());
        assert!((realized_snr(x.samples(), a.samples()) - 15.0).abs() <= 0.1);
    }

    #[test]
    fn baseline_rejects_silence() {
        let x = AudioBuffer::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            random_noise_baseline(&x, 10.0, 0),
            Err(Error::SilentInput)
        ));
    }

    #[test]
    fn stub_lookup() {
        let stub = StubProvider::new(HashMap::from([
            ("clip1".to_string(), "hello world".to_string()),
            ("clip1#adv".to_string(), "yellow word".to_string()),
        ]));
        assert_eq!(
            stub.transcribe("clip1").unwrap().words(),
            &["hello", "world"]
        );
        assert_eq!(
            stub.transcribe("clip1#adv").unwrap().words(),
            &["yellow", "word"]
        );
        assert_eq!(
            stub.transcribe("clip1#random").unwrap().words(),
            &["hello", "world"]
        );
        assert!(matches!(stub.transcribe("clip2"), Err(Error::UnmappedClip(id)) if id == "clip2"));
    }

    /// Accepts one connection, reads the request, then runs `respond`.
    fn one_shot_server(respond: impl FnOnce(&mut std::net::TcpStream) + Send + 'static) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            assert_eq!(&body[..4], b"RIFF");
            respond(&mut stream);
        });
        format!("http://{addr}/transcribe")
    }

    #[test]
    fn external_provider_normalizes_reply() {
        let url = one_shot_server(|s| {
            let body = r#"{"text": "Hello, World!"}"#;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}", body.len()).unwrap();
        });
        let p = ExternalProvider::new(ExternalConfig {
            endpoint: url,
            ..ExternalConfig::default()
        })
        .unwrap();
        let t = p.transcribe("c", &speech_like(100.0, 16_000, 1)).unwrap();
        assert_eq!(t.words(), &["hello", "world"]);
    }

    #[test]
    fn external_provider_timeout_reports_elapsed() {
        let url = one_shot_server(|_| std::thread::sleep(Duration::from_millis(1500)));
        let p = ExternalProvider::new(ExternalConfig {
            endpoint: url,
            timeout_ms: 200,
            ..ExternalConfig::default()
        })
        .unwrap();
        match p.transcribe("c", &speech_like(100.0, 16_000, 1)) {
            Err(Error::ProviderUnavailable { elapsed_ms, .. }) => {
                assert!((150..1500).contains(&elapsed_ms), "{elapsed_ms}")
            }
            other => panic!("expected ProviderUnavailable, got {other:?}"),
        }
    }

    #[test]
    fn permits_bound_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let permits = Permits::new(2);
        let (live, peak) = (AtomicUsize::new(0), AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _g = permits.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn empty_batch_has_header_only_outputs() {
        let out = run_batch(&[], &BatchConfig::default(), None).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(
            out.aggregate_csv().unwrap(),
            format!("{}\n", AGGREGATE_COLUMNS.join(","))
        );
        assert_eq!(
            out.curves_csv().unwrap(),
            format!("{}\n", CURVE_COLUMNS.join(","))
        );
        assert_eq!(out.summary.clips, 0);
    }

    #[test]
    fn batch_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let silent = dir.path().join("silent.wav");
        write_wav(&AudioBuffer::new(vec![0.0; 8000], 16_000).unwrap(), &silent).unwrap();
        let speech = dir.path().join("speech.wav");
        write_wav(&speech_like(500.0, 16_000, 2), &speech).unwrap();
        let clips = vec![
            ClipSpec {
                clip_id: "silent".into(),
                wav_path: silent,
                reference_text: "x".into(),
            },
            ClipSpec {
                clip_id: "missing".into(),
                wav_path: dir.path().join("nope.wav"),
                reference_text: "x".into(),
            },
            ClipSpec {
                clip_id: "speech".into(),
                wav_path: speech,
                reference_text: "hello there".into(),
            },
        ];
        let stub = TranscriptionProvider::Stub(StubProvider::new(HashMap::from([
            ("speech".to_string(), "hello there".to_string()),
            ("speech#adv".to_string(), "yellow hair".to_string()),
        ])));
        let config = BatchConfig {
            attack: AttackConfig {
                iterations: 3,
                ..AttackConfig::default()
            },
            ..BatchConfig::default()
        };
        let out = run_batch(&clips, &config, Some(&stub)).unwrap();
        assert_eq!(
            out.reports[0].error.as_ref().unwrap().kind,
            Error::SilentInput.kind()
        );
        assert_eq!(out.reports[1].status, Some(ClipStatus::Error));
        let ok = &out.reports[2];
        assert!(ok.is_ok());
        assert_eq!(ok.wer_clean, Some(0.0));
        assert_eq!(ok.wer_adv, Some(1.0));
        assert_eq!(ok.trace_unmasked.len(), 3);
        assert!((ok.random_snr_db.unwrap() - ok.noise_snr_db.unwrap()).abs() <= 0.1);
        assert_eq!(out.summary.succeeded, 1);
        assert_eq!(out.curves.len(), 3);

        let csv = out.aggregate_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(
            csv,
            run_batch(&clips, &config, Some(&stub))
                .unwrap()
                .aggregate_csv()
                .unwrap()
        );

        out.write_to(&dir.path().join("out")).unwrap();
        assert!(dir.path().join("out/reports/speech.json").exists());
        assert!(dir.path().join("out/summary.json").exists());
    }

    #[test]
    fn manifest_paths_resolve_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "clip_id,wav_path,reference_text\na, a.wav ,\"hi, there\"\n",
        )
        .unwrap();
        let clips = read_manifest(&path).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].wav_path, dir.path().join("a.wav"));
        assert_eq!(clips[0].reference_text, "hi, there");
    }
}
