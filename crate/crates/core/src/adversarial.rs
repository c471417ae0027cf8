//! Adversarial noise generation by iterated gradient steps through the MFCC
//! front end.
//!
//! The cost is the mean squared cepstral deviation from an all-zero target.
//! Its gradient with respect to the waveform is computed analytically by
//! walking the MFCC stages backwards: DCT transpose, log slope, filter-bank
//! transpose, power-spectrum adjoint (one inverse FFT per frame), window,
//! overlap-add of frame gradients, and the pre-emphasis transpose.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, AudioBuffer};
use crate::error::{Error, Result};
use crate::masking::{build_gain_map, GainMap, MaskParams, SpectralShaper};
use crate::metrics::feature_distortion;
use crate::mfcc::{
    forward_spectrum, frame_with, CepstralFeatures, MfccConfig, MfccPipeline, MfccTrace,
    PowerSpectrogram, LOG_FLOOR,
};

/// Environmental noise above this level invalidates generation.
pub const ENV_LEVEL_LIMIT_DB: f64 = 81.0;

/// Offset mapping dBFS (rms re full scale) to the reported level scale.
pub const DBFS_TO_LEVEL_OFFSET: f64 = 94.0;

/// Direction of the optimization on the cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Gradient ascent on the zero-target cost, driving the cepstra away
    /// from the clean features.
    #[default]
    AwayFromClean,
    /// Gradient descent toward the zero target.
    TowardTarget,
}

impl AttackMode {
    fn sign(self) -> f64 {
        match self {
            AttackMode::AwayFromClean => 1.0,
            AttackMode::TowardTarget => -1.0,
        }
    }

    /// True when `candidate` is a better cost than `incumbent`.
    fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            AttackMode::AwayFromClean => candidate > incumbent,
            AttackMode::TowardTarget => candidate < incumbent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvNoiseProfile {
    /// Estimated environment level in dB. Ignored when `waveform` is set;
    /// the level is then measured from the waveform.
    pub level_db: f64,
    pub waveform: Option<AudioBuffer>,
}

impl EnvNoiseProfile {
    pub fn from_waveform(waveform: AudioBuffer) -> Self {
        Self {
            level_db: estimate_env_level(&waveform),
            waveform: Some(waveform),
        }
    }

    pub fn effective_level_db(&self) -> f64 {
        self.waveform
            .as_ref()
            .map(estimate_env_level)
            .unwrap_or(self.level_db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Peak per-sample change per iteration, as a fraction of full scale.
    pub step_size: f64,
    /// Per-sample magnitude cap on the noise, as a fraction of full scale.
    pub t_adv_scale: f64,
    pub mode: AttackMode,
    pub use_masking: bool,
    pub env_profile: Option<EnvNoiseProfile>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            step_size: 0.001,
            t_adv_scale: 0.05,
            mode: AttackMode::default(),
            use_masking: true,
            env_profile: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("attack.iterations", "must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(
                "attack.step_size",
                format!("{} must be > 0", self.step_size),
            ));
        }
        if !(self.t_adv_scale > 0.0 && self.t_adv_scale < 1.0) {
            return Err(Error::config(
                "attack.t_adv_scale",
                format!("{} not in (0, 1)", self.t_adv_scale),
            ));
        }
        if let Some(env) = &self.env_profile {
            if !(0.0..=120.0).contains(&env.level_db) {
                return Err(Error::config(
                    "attack.env_level_db",
                    format!("{} not in [0, 120]", env.level_db),
                ));
            }
        }
        Ok(())
    }
}

/// One optimizer step as recorded in the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Cost after this iteration's update.
    pub cost: f64,
    /// Mean per-frame cepstral distance from the clean input.
    pub distortion: f64,
    /// Wall-clock time since generation started.
    pub elapsed_ms: f64,
}

/// Generated perturbation.
#[derive(Debug, Clone)]
pub struct NoiseSpectrum {
    /// One-sided spectrum of each windowed analysis frame of the noise.
    pub spectrum: Array2<Complex64>,
    /// Time-domain noise, same length as the input.
    pub waveform: Vec<f64>,
    /// Cost of the unperturbed (env-mixed) signal.
    pub initial_cost: f64,
    /// Cost of the returned noise.
    pub final_cost: f64,
    /// Iterate that was returned; 0 means the zero noise was best.
    pub best_iteration: usize,
    pub trace: Vec<IterationRecord>,
}

impl NoiseSpectrum {
    pub fn n_frames(&self) -> usize {
        self.spectrum.nrows()
    }

    pub fn peak(&self) -> f64 {
        self.waveform.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        rms(&self.waveform)
    }
}

/// Mean squared difference between features and target.
pub fn cost(features: &CepstralFeatures, target: &CepstralFeatures) -> Result<f64> {
    if features.shape() != target.shape() {
        return Err(Error::DimensionMismatch {
            context: "cost",
            expected: features.shape(),
            actual: target.shape(),
        });
    }
    let n = features.0.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = features
        .0
        .iter()
        .zip(target.0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

fn peak_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Gradient of the cost with respect to each input sample.
pub fn gradient_wrt_waveform(
    buffer: &AudioBuffer,
    config: &MfccConfig,
    target: &CepstralFeatures,
) -> Result<Vec<f64>> {
    let pipe = MfccPipeline::new(config.clone(), buffer.sample_rate())?;
    let trace = pipe.trace(buffer.samples())?;
    if trace.cepstrum.shape() != target.shape() {
        return Err(Error::DimensionMismatch {
            context: "gradient_wrt_waveform",
            expected: trace.cepstrum.shape(),
            actual: target.shape(),
        });
    }
    let count = trace.cepstrum.0.len() as f64;
    let mut d_ceps = &trace.cepstrum.0 - &target.0;
    d_ceps.mapv_inplace(|d| 2.0 * d / count);
    Ok(backpropagate(&pipe, &trace, &d_ceps))
}

/// Pulls a cepstral cotangent back to the input waveform.
pub fn backpropagate(pipe: &MfccPipeline, trace: &MfccTrace, d_ceps: &Array2<f64>) -> Vec<f64> {
    let frames = frame_cotangents(pipe, trace, d_ceps);
    let d_pre = overlap_add(&frames, pipe.hop(), trace.pre_emphasized.len());
    pre_emphasis_adjoint(&d_pre, pipe.config().alpha)
}

/// Cotangent of every pre-emphasized frame sample, before overlap-add.
pub fn frame_cotangents(
    pipe: &MfccPipeline,
    trace: &MfccTrace,
    d_ceps: &Array2<f64>,
) -> Array2<f64> {
    let n_fft = pipe.n_fft();
    let n_bins = n_fft / 2 + 1;
    let frame_len = pipe.frame_len();

    // DCT and log adjoints
    let mut d_mel = d_ceps.dot(pipe.dct());
    d_mel.zip_mut_with(&trace.mel.0, |d, &m| *d /= m + LOG_FLOOR);
    // filter-bank adjoint
    let d_power = d_mel.dot(pipe.mel_bank());

    let ifft = pipe.ifft();
    let mut buf = vec![Complex64::default(); n_fft];
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut out = Array2::zeros((d_power.nrows(), frame_len));
    let scale = 2.0 / n_fft as f64;
    for ((dp, spec), mut dst) in d_power
        .axis_iter(Axis(0))
        .zip(trace.spectrum.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        // power adjoint: 2/N Re(sum_k dP_k X_k e^{+2 pi i k m / N})
        buf.fill(Complex64::default());
        for k in 0..n_bins {
            buf[k] = spec[k] * dp[k];
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        // window adjoint
        for (m, d) in dst.iter_mut().enumerate() {
            *d = scale * buf[m].re * pipe.window()[m];
        }
    }
    out
}

/// Framing adjoint: scatter-add frame rows back to their sample positions.
pub fn overlap_add(frames: &Array2<f64>, hop: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (n, row) in frames.axis_iter(Axis(0)).enumerate() {
        let start = n * hop;
        for (o, v) in out.iter_mut().skip(start).zip(row.iter()) {
            *o += v;
        }
    }
    out
}

/// Transpose of `y[s] = x[s] - alpha x[s-1]`.
pub fn pre_emphasis_adjoint(d_pre: &[f64], alpha: f64) -> Vec<f64> {
    let mut grad = d_pre.to_vec();
    for s in 0..grad.len().saturating_sub(1) {
        grad[s] -= alpha * d_pre[s + 1];
    }
    grad
}

/// `20 log10(rms) + 94`, floored at 0 dB.
pub fn estimate_env_level(env: &AudioBuffer) -> f64 {
    let r = env.rms();
    if r <= 0.0 {
        return 0.0;
    }
    (20.0 * r.log10() + DBFS_TO_LEVEL_OFFSET).max(0.0)
}

/// Samplewise sum clamped to full scale.
pub fn apply_noise(buffer: &AudioBuffer, noise: &NoiseSpectrum) -> Result<AudioBuffer> {
    add_clamped(buffer, &noise.waveform)
}

pub(crate) fn add_clamped(buffer: &AudioBuffer, noise: &[f64]) -> Result<AudioBuffer> {
    if noise.len() != buffer.len() {
        return Err(Error::DimensionMismatch {
            context: "apply_noise",
            expected: (buffer.len(), 1),
            actual: (noise.len(), 1),
        });
    }
    let out = buffer
        .samples()
        .iter()
        .zip(noise)
        .map(|(x, d)| (x + d).clamp(-1.0, 1.0))
        .collect();
    AudioBuffer::new(out, buffer.sample_rate())
}

/// Planned generator for one MFCC configuration and sample rate.
#[derive(Debug, Clone)]
pub struct AdversarialEngine {
    pipeline: MfccPipeline,
    shaper: SpectralShaperHandle,
}

// SpectralShaper holds trait objects without Debug.
#[derive(Clone)]
struct SpectralShaperHandle(SpectralShaper);

impl std::fmt::Debug for SpectralShaperHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SpectralShaper")
    }
}

impl AdversarialEngine {
    pub fn new(config: MfccConfig, sample_rate: u32) -> Result<Self> {
        let pipeline = MfccPipeline::new(config, sample_rate)?;
        let shaper = SpectralShaperHandle(SpectralShaper::new(&pipeline));
        Ok(Self { pipeline, shaper })
    }

    pub fn pipeline(&self) -> &MfccPipeline {
        &self.pipeline
    }

    pub fn shaper(&self) -> &SpectralShaper {
        &self.shaper.0
    }

    /// Power of the raw speech on the shaper's analysis frames.
    pub fn speech_power(&self, samples: &[f64]) -> PowerSpectrogram {
        let scale = 1.0 / self.pipeline.n_fft() as f64;
        PowerSpectrogram(
            self.shaper
                .0
                .analyze(samples)
                .mapv(|c| c.norm_sqr() * scale),
        )
    }

    /// Gain map for `samples` with the given masking parameters.
    pub fn gain_map(&self, samples: &[f64], params: &MaskParams) -> Result<GainMap> {
        build_gain_map(
            &self.speech_power(samples),
            self.pipeline.sample_rate(),
            params,
        )
    }

    /// Zero-target cost of `samples`, its cepstra, and the per-frame
    /// cotangents of the pre-emphasized signal.
    fn evaluate(&self, samples: &[f64]) -> Result<(f64, Array2<f64>, CepstralFeatures)> {
        let trace = self.pipeline.trace(samples)?;
        let count = trace.cepstrum.0.len() as f64;
        let j = trace.cepstrum.0.iter().map(|c| c * c).sum::<f64>() / count;
        let d_ceps = trace.cepstrum.0.mapv(|c| 2.0 * c / count);
        let frames = frame_cotangents(&self.pipeline, &trace, &d_ceps);
        Ok((j, frames, trace.cepstrum))
    }

    /// Zero-target cost and its exact waveform gradient.
    pub fn cost_and_gradient(&self, samples: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (j, frames, _) = self.evaluate(samples)?;
        let d_pre = overlap_add(&frames, self.pipeline.hop(), samples.len());
        Ok((
            j,
            pre_emphasis_adjoint(&d_pre, self.pipeline.config().alpha),
        ))
    }

    /// Gradient direction scaled to unit peak amplitude, or all zeros when
    /// the gradient vanishes. With a mask, the gradient is spectrally shaped
    /// before the peak is taken, so every step spends the full step size on
    /// the permitted bands.
    fn step_direction(&self, frames: &Array2<f64>, len: usize, mask: Option<&GainMap>) -> Vec<f64> {
        let d_pre = overlap_add(frames, self.pipeline.hop(), len);
        let mut dir = pre_emphasis_adjoint(&d_pre, self.pipeline.config().alpha);
        if let Some(m) = mask {
            dir = self.shaper.0.shape(&dir, &m.gains);
        }
        let peak = peak_abs(&dir);
        if peak > 0.0 && peak.is_finite() {
            dir.iter_mut().for_each(|d| *d /= peak);
        } else {
            dir.fill(0.0);
        }
        dir
    }

    /// Runs the iterative attack on `buffer`.
    ///
    /// When `mask` is `None` and `attack.use_masking` is set, a gain map with
    /// default [`MaskParams`] is derived from the clean buffer.
    pub fn generate(
        &self,
        buffer: &AudioBuffer,
        attack: &AttackConfig,
        mask: Option<&GainMap>,
    ) -> Result<NoiseSpectrum> {
        attack.validate()?;
        if buffer.sample_rate() != self.pipeline.sample_rate() {
            return Err(Error::SampleRateMismatch {
                actual: buffer.sample_rate(),
                required: self.pipeline.sample_rate(),
            });
        }
        let started = Instant::now();
        let x = buffer.samples();
        let base = self.working_signal(buffer, attack)?;

        let owned_mask;
        let mask = match (mask, attack.use_masking) {
            (Some(m), _) => Some(m),
            (None, true) => {
                owned_mask = self.gain_map(x, &MaskParams::default())?;
                Some(&owned_mask)
            }
            (None, false) => None,
        };

        let clean = self.pipeline.features(x)?;
        let t_adv = attack.t_adv_scale;
        let step = attack.mode.sign() * attack.step_size;

        let mut delta = vec![0.0; x.len()];
        let mut working = base.clone();
        let (initial_cost, mut frames, _) = self.evaluate(&working)?;
        let mut best = (0usize, initial_cost, delta.clone());
        let mut trace = Vec::with_capacity(attack.iterations);

        for iteration in 1..=attack.iterations {
            let dir = self.step_direction(&frames, x.len(), mask);
            delta
                .iter_mut()
                .zip(&dir)
                .for_each(|(d, g)| *d = (*d + step * g).clamp(-t_adv, t_adv));
            working
                .iter_mut()
                .zip(base.iter().zip(&delta))
                .for_each(|(w, (b, d))| *w = b + d);

            let (j, next_frames, features) = self.evaluate(&working)?;
            frames = next_frames;
            if attack.mode.improves(j, best.1) {
                best = (iteration, j, delta.clone());
            }
            trace.push(IterationRecord {
                iteration,
                cost: j,
                distortion: feature_distortion(&clean, &features)?,
                elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
            });
        }

        let (best_iteration, final_cost, waveform) = best;
        Ok(NoiseSpectrum {
            spectrum: self.noise_spectrum(&waveform)?,
            waveform,
            initial_cost,
            final_cost,
            best_iteration,
            trace,
        })
    }

    /// Input mixed with the environment waveform (tiled to length), after
    /// checking the environment level against the tolerance.
    fn working_signal(&self, buffer: &AudioBuffer, attack: &AttackConfig) -> Result<Vec<f64>> {
        let mut base = buffer.samples().to_vec();
        if let Some(env) = &attack.env_profile {
            let level_db = env.effective_level_db();
            if level_db > ENV_LEVEL_LIMIT_DB {
                return Err(Error::EnvNoiseTooLoud {
                    level_db,
                    limit_db: ENV_LEVEL_LIMIT_DB,
                });
            }
            if let Some(w) = &env.waveform {
                if w.sample_rate() != buffer.sample_rate() {
                    return Err(Error::SampleRateMismatch {
                        actual: w.sample_rate(),
                        required: buffer.sample_rate(),
                    });
                }
                base.iter_mut()
                    .zip(w.samples().iter().cycle())
                    .for_each(|(b, e)| *b += e);
            }
        }
        Ok(base)
    }

    fn noise_spectrum(&self, noise: &[f64]) -> Result<Array2<Complex64>> {
        let mut frames = frame_with(noise, self.pipeline.frame_len(), self.pipeline.hop())?;
        for mut row in frames.frames.axis_iter_mut(Axis(0)) {
            row.iter_mut()
                .zip(self.pipeline.window())
                .for_each(|(v, w)| *v *= w);
        }
        Ok(forward_spectrum(&frames.frames, self.pipeline.fft()))
    }
}

/// One-shot convenience wrapper around [`AdversarialEngine::generate`].
pub fn generate_noise(
    buffer: &AudioBuffer,
    mfcc_cfg: &MfccConfig,
    attack_cfg: &AttackConfig,
    mask: Option<&GainMap>,
) -> Result<NoiseSpectrum> {
    AdversarialEngine::new(mfcc_cfg.clone(), buffer.sample_rate())?
        .generate(buffer, attack_cfg, mask)
}
