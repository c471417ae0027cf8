//! Forward MFCC transform with every intermediate stage exposed.
//!
//! The chain is pre-emphasis, framing, Hamming window, one-sided power
//! spectrum, triangular mel filter bank, log, and DCT-II. [`MfccPipeline`]
//! caches the window, filter bank, DCT basis and FFT plans so that the
//! adversarial engine can run the forward pass and its adjoint many times
//! per clip without re-planning.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Hyperparameters of the MFCC front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    /// Pre-emphasis coefficient.
    pub alpha: f64,
    /// Frame duration in milliseconds (20 to 40).
    pub frame_len_ms: f64,
    /// Frame advance as a fraction of the frame length.
    pub hop_fraction: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub mel_fmin: f64,
    /// Upper mel edge in Hz; `None` means Nyquist.
    pub mel_fmax: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            alpha: 0.97,
            frame_len_ms: 25.0,
            hop_fraction: 0.5,
            n_fft: 512,
            n_mels: 26,
            n_ceps: 13,
            mel_fmin: 0.0,
            mel_fmax: None,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        ((self.frame_len(sample_rate) as f64 * self.hop_fraction).round() as usize).max(1)
    }

    pub fn fmax(&self, sample_rate: u32) -> f64 {
        self.mel_fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(
                "mfcc.alpha",
                format!("{} not in (0, 1)", self.alpha),
            ));
        }
        if !(20.0..=40.0).contains(&self.frame_len_ms) {
            return Err(Error::config(
                "mfcc.frame_len_ms",
                format!("{} not in [20, 40]", self.frame_len_ms),
            ));
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return Err(Error::config(
                "mfcc.hop_fraction",
                format!("{} not in (0, 1]", self.hop_fraction),
            ));
        }
        let frame_len = self.frame_len(sample_rate);
        if !self.n_fft.is_power_of_two() || self.n_fft < frame_len {
            return Err(Error::config(
                "mfcc.n_fft",
                format!(
                    "{} must be a power of two >= frame length {frame_len}",
                    self.n_fft
                ),
            ));
        }
        if !(13..=26).contains(&self.n_mels) {
            return Err(Error::config(
                "mfcc.n_mels",
                format!("{} not in [13, 26]", self.n_mels),
            ));
        }
        if self.n_ceps < 1 || self.n_ceps > self.n_mels {
            return Err(Error::config(
                "mfcc.n_ceps",
                format!("{} not in [1, n_mels = {}]", self.n_ceps, self.n_mels),
            ));
        }
        let fmax = self.fmax(sample_rate);
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::config(
                "mfcc.mel_fmax",
                format!(
                    "need 0 <= mel_fmin ({}) < mel_fmax ({fmax}) <= Nyquist",
                    self.mel_fmin
                ),
            ));
        }
        Ok(())
    }
}

/// Framed signal, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: Array2<f64>,
    pub hop: usize,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn frame_len(&self) -> usize {
        self.frames.ncols()
    }
}

/// `n_frames x (n_fft/2 + 1)` power values, scaled by `1/n_fft`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram(pub Array2<f64>);

/// `n_frames x n_mels` filter-bank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram(pub Array2<f64>);

/// `n_frames x n_ceps` cepstral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralFeatures(pub Array2<f64>);

macro_rules! matrix_accessors {
    ($($ty:ty),*) => {$(
        impl $ty {
            pub fn n_frames(&self) -> usize {
                self.0.nrows()
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.dim()
            }

            pub fn as_array(&self) -> &Array2<f64> {
                &self.0
            }
        }
    )*};
}

matrix_accessors!(PowerSpectrogram, MelSpectrogram, CepstralFeatures);

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `y[0] = x[0]`, `y[s] = x[s] - alpha * x[s-1]`.
pub fn pre_emphasize(samples: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let mut out = Vec::with_capacity(samples.len());
    out.push(samples[0]);
    out.extend(samples.windows(2).map(|w| w[1] - alpha * w[0]));
    Ok(out)
}

/// Number of frames for a signal of `len` samples.
///
/// Full frames start every `hop` samples. One extra zero-padded frame is
/// added when the samples left uncovered by the last full frame amount to
/// at least half a frame.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> Result<usize> {
    if len < frame_len || frame_len == 0 {
        return Err(Error::AudioTooShort {
            len,
            needed: frame_len.max(1),
        });
    }
    let full = (len - frame_len) / hop + 1;
    let covered = (full - 1) * hop + frame_len;
    let tail = len - covered;
    Ok(if tail > 0 && 2 * tail >= frame_len {
        full + 1
    } else {
        full
    })
}

pub fn frame_signal(samples: &[f64], config: &MfccConfig, sample_rate: u32) -> Result<FrameMatrix> {
    frame_with(
        samples,
        config.frame_len(sample_rate),
        config.hop(sample_rate),
    )
}

pub(crate) fn frame_with(samples: &[f64], frame_len: usize, hop: usize) -> Result<FrameMatrix> {
    let n_frames = frame_count(samples.len(), frame_len, hop)?;
    let mut frames = Array2::zeros((n_frames, frame_len));
    for (n, mut row) in frames.axis_iter_mut(Axis(0)).enumerate() {
        let start = n * hop;
        let end = (start + frame_len).min(samples.len());
        for (dst, &src) in row.iter_mut().zip(&samples[start..end]) {
            *dst = src;
        }
    }
    Ok(FrameMatrix { frames, hop })
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

pub fn apply_window(frames: &FrameMatrix) -> FrameMatrix {
    let window = hamming(frames.frame_len());
    let mut out = frames.clone();
    for mut row in out.frames.axis_iter_mut(Axis(0)) {
        row.iter_mut().zip(&window).for_each(|(v, w)| *v *= w);
    }
    out
}

pub fn power_spectrum(frames: &FrameMatrix, n_fft: usize) -> Result<PowerSpectrogram> {
    check_fft_len(n_fft, frames.frame_len())?;
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let spectrum = forward_spectrum(&frames.frames, fft.as_ref());
    Ok(power_from_spectrum(&spectrum, n_fft))
}

fn check_fft_len(n_fft: usize, frame_len: usize) -> Result<()> {
    if !n_fft.is_power_of_two() || n_fft < frame_len {
        Err(Error::InvalidFftLength { n_fft, frame_len })
    } else {
        Ok(())
    }
}

/// One-sided complex spectrum of each (zero-padded) row.
pub(crate) fn forward_spectrum(rows: &Array2<f64>, fft: &dyn Fft<f64>) -> Array2<Complex64> {
    let n_fft = fft.len();
    let n_bins = n_fft / 2 + 1;
    let mut out = Array2::zeros((rows.nrows(), n_bins));
    let mut buf = vec![Complex64::default(); n_fft];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for (row, mut dst) in rows.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        buf.fill(Complex64::default());
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        dst.iter_mut()
            .zip(&buf[..n_bins])
            .for_each(|(d, s)| *d = *s);
    }
    out
}

pub(crate) fn power_from_spectrum(spectrum: &Array2<Complex64>, n_fft: usize) -> PowerSpectrogram {
    let scale = 1.0 / n_fft as f64;
    PowerSpectrogram(spectrum.mapv(|c| c.norm_sqr() * scale))
}

/// Triangular filters evenly spaced on the mel scale, `n_mels x (n_fft/2+1)`.
///
/// Band edges are snapped to FFT bins; every filter is exactly 1.0 at its
/// center bin and falls linearly to 0 at its neighbours' centers.
pub fn mel_filter_bank_weights(config: &MfccConfig, sample_rate: u32) -> Array2<f64> {
    let n_bins = config.n_bins();
    let mel_lo = hz_to_mel(config.mel_fmin);
    let mel_hi = hz_to_mel(config.fmax(sample_rate));
    let n_points = config.n_mels + 2;
    let edges: Vec<usize> = (0..n_points)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64;
            let hz = mel_to_hz(mel);
            let bin = ((config.n_fft + 1) as f64 * hz / sample_rate as f64).floor() as usize;
            bin.min(n_bins - 1)
        })
        .collect();

    let mut bank = Array2::zeros((config.n_mels, n_bins));
    for l in 0..config.n_mels {
        let (left, center, right) = (edges[l], edges[l + 1], edges[l + 2]);
        let mut row = bank.row_mut(l);
        for k in left..center {
            row[k] = (k - left) as f64 / (center - left) as f64;
        }
        for k in center + 1..=right {
            row[k] = (right - k) as f64 / (right - center) as f64;
        }
        row[center] = 1.0;
    }
    bank
}

pub fn mel_filter_bank(
    power: &PowerSpectrogram,
    config: &MfccConfig,
    sample_rate: u32,
) -> Result<MelSpectrogram> {
    let bank = mel_filter_bank_weights(config, sample_rate);
    apply_filter_bank(power, &bank)
}

pub(crate) fn apply_filter_bank(
    power: &PowerSpectrogram,
    bank: &Array2<f64>,
) -> Result<MelSpectrogram> {
    if power.0.ncols() != bank.ncols() {
        return Err(Error::DimensionMismatch {
            context: "mel_filter_bank",
            expected: (power.0.nrows(), bank.ncols()),
            actual: power.0.dim(),
        });
    }
    Ok(MelSpectrogram(power.0.dot(&bank.t())))
}

/// DCT-II basis, `basis[[i, l]] = cos(pi * i * (l + 0.5) / n_mels)`.
pub fn dct_basis(n_ceps: usize, n_mels: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_ceps, n_mels), |(i, l)| {
        (PI * i as f64 * (l as f64 + 0.5) / n_mels as f64).cos()
    })
}

pub fn dct_cepstrum(mel: &MelSpectrogram, n_ceps: usize) -> Result<CepstralFeatures> {
    let n_mels = mel.0.ncols();
    if n_ceps == 0 || n_ceps > n_mels {
        return Err(Error::config(
            "mfcc.n_ceps",
            format!("{n_ceps} not in [1, n_mels = {n_mels}]"),
        ));
    }
    Ok(log_dct(mel, &dct_basis(n_ceps, n_mels)))
}

fn log_dct(mel: &MelSpectrogram, basis: &Array2<f64>) -> CepstralFeatures {
    let log_mel = mel.0.mapv(|m| (m + LOG_FLOOR).ln());
    CepstralFeatures(log_mel.dot(&basis.t()))
}

/// Every stage of one forward pass.
#[derive(Debug, Clone)]
pub struct MfccTrace {
    pub pre_emphasized: Vec<f64>,
    pub frames: FrameMatrix,
    pub windowed: FrameMatrix,
    /// One-sided complex FFT of each windowed frame.
    pub spectrum: Array2<Complex64>,
    pub power: PowerSpectrogram,
    pub mel: MelSpectrogram,
    pub cepstrum: CepstralFeatures,
}

/// Planned MFCC transform for one configuration and sample rate.
#[derive(Clone)]
pub struct MfccPipeline {
    config: MfccConfig,
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    mel_bank: Array2<f64>,
    dct: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccPipeline")
            .field("config", &self.config)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl MfccPipeline {
    pub fn new(config: MfccConfig, sample_rate: u32) -> Result<Self> {
        config.validate(sample_rate)?;
        let frame_len = config.frame_len(sample_rate);
        let hop = config.hop(sample_rate);
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: hamming(frame_len),
            mel_bank: mel_filter_bank_weights(&config, sample_rate),
            dct: dct_basis(config.n_ceps, config.n_mels),
            fft: planner.plan_fft_forward(config.n_fft),
            ifft: planner.plan_fft_inverse(config.n_fft),
            frame_len,
            hop,
            config,
            sample_rate,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.config.n_fft
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn mel_bank(&self) -> &Array2<f64> {
        &self.mel_bank
    }

    pub fn dct(&self) -> &Array2<f64> {
        &self.dct
    }

    pub(crate) fn fft(&self) -> &dyn Fft<f64> {
        self.fft.as_ref()
    }

    pub(crate) fn ifft(&self) -> &dyn Fft<f64> {
        self.ifft.as_ref()
    }

    pub fn frame_count(&self, len: usize) -> Result<usize> {
        frame_count(len, self.frame_len, self.hop)
    }

    /// Runs the full transform on raw samples, keeping every intermediate.
    ///
    /// Samples are not required to lie in `[-1, 1]`, since the optimizer
    /// evaluates working signals that may briefly exceed full scale.
    pub fn trace(&self, samples: &[f64]) -> Result<MfccTrace> {
        let pre_emphasized = pre_emphasize(samples, self.config.alpha)?;
        let frames = frame_with(&pre_emphasized, self.frame_len, self.hop)?;
        let mut windowed = frames.clone();
        for mut row in windowed.frames.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&self.window).for_each(|(v, w)| *v *= w);
        }
        let spectrum = forward_spectrum(&windowed.frames, self.fft.as_ref());
        let power = power_from_spectrum(&spectrum, self.config.n_fft);
        let mel = apply_filter_bank(&power, &self.mel_bank)?;
        let cepstrum = log_dct(&mel, &self.dct);
        Ok(MfccTrace {
            pre_emphasized,
            frames,
            windowed,
            spectrum,
            power,
            mel,
            cepstrum,
        })
    }

    pub fn features(&self, samples: &[f64]) -> Result<CepstralFeatures> {
        self.trace(samples).map(|t| t.cepstrum)
    }

    /// Power spectrogram of the windowed frames, used for loudness masking.
    pub fn power(&self, samples: &[f64]) -> Result<PowerSpectrogram> {
        self.trace(samples).map(|t| t.power)
    }
}

/// Full MFCC of a buffer.
pub fn mfcc(buffer: &AudioBuffer, config: &MfccConfig) -> Result<CepstralFeatures> {
    MfccPipeline::new(config.clone(), buffer.sample_rate())?.features(buffer.samples())
}

/// Euclidean norm of one row.
pub(crate) fn row_norm(row: ArrayView1<f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
