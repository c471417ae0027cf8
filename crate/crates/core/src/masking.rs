//! Frequency-domain gain maps that keep adversarial energy out of the
//! band where hearing is most sensitive, except next to loud components
//! of the speech that mask it anyway.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfcc::{MfccPipeline, PowerSpectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Lower edge of the sensitive band, Hz.
    pub sensitive_lo: f64,
    /// Upper edge of the sensitive band, Hz (inclusive).
    pub sensitive_hi: f64,
    /// Amplitude gain applied inside the sensitive band.
    pub in_band_gain: f64,
    /// Percentage of loudest bins per frame that seed a boost neighbourhood.
    pub top_percent: f64,
    /// Half-width of each boost neighbourhood, in FFT bins.
    pub neighborhood_bins: usize,
    pub boost_gain: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            sensitive_lo: 200.0,
            sensitive_hi: 5000.0,
            in_band_gain: 0.2,
            top_percent: 10.0,
            neighborhood_bins: 3,
            boost_gain: 1.0,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.in_band_gain
            && self.in_band_gain <= self.boost_gain
            && self.boost_gain <= 1.0)
        {
            return Err(Error::config(
                "mask.in_band_gain",
                format!(
                    "need 0 <= in_band_gain ({}) <= boost_gain ({}) <= 1",
                    self.in_band_gain, self.boost_gain
                ),
            ));
        }
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return Err(Error::config(
                "mask.top_percent",
                format!("{} not in (0, 100]", self.top_percent),
            ));
        }
        if self.sensitive_lo.partial_cmp(&self.sensitive_hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::config(
                "mask.sensitive_lo",
                format!(
                    "sensitive_lo ({}) must be below sensitive_hi ({})",
                    self.sensitive_lo, self.sensitive_hi
                ),
            ));
        }
        Ok(())
    }

    /// Number of seed bins selected per frame out of `n_bins`.
    pub fn seed_count(&self, n_bins: usize) -> usize {
        // the small epsilon keeps e.g. 257 * 10 / 100 from rounding up past 26
        ((n_bins as f64 * self.top_percent / 100.0) - 1e-9)
            .ceil()
            .clamp(1.0, n_bins as f64) as usize
    }
}

/// Per-frame, per-bin amplitude gains in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMap {
    pub gains: Array2<f64>,
    pub params: MaskParams,
}

impl GainMap {
    pub fn shape(&self) -> (usize, usize) {
        self.gains.dim()
    }

    pub fn n_frames(&self) -> usize {
        self.gains.nrows()
    }
}

/// Center frequency of bin `k` for a one-sided spectrum with `n_bins` bins.
pub fn bin_frequency(k: usize, n_bins: usize, sample_rate: u32) -> f64 {
    let n_fft = 2 * (n_bins - 1);
    k as f64 * sample_rate as f64 / n_fft as f64
}

fn in_sensitive_band(k: usize, n_bins: usize, sample_rate: u32, params: &MaskParams) -> bool {
    let f = bin_frequency(k, n_bins, sample_rate);
    f >= params.sensitive_lo && f <= params.sensitive_hi
}

/// `in_band_gain` on bins inside the closed sensitive band, 1 elsewhere.
pub fn sensitivity_mask(
    n_frames: usize,
    n_bins: usize,
    sample_rate: u32,
    params: &MaskParams,
) -> GainMap {
    let gains = Array2::from_shape_fn((n_frames, n_bins), |(_, k)| {
        if in_sensitive_band(k, n_bins, sample_rate, params) {
            params.in_band_gain
        } else {
            1.0
        }
    });
    GainMap {
        gains,
        params: params.clone(),
    }
}

/// Indices of the `count` loudest bins; equal powers resolve to the lower index.
pub fn top_bins(row: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// `boost_gain` on the loudest `top_percent` bins of each frame and their
/// neighbourhoods, 0 elsewhere.
pub fn loudness_mask(power: &PowerSpectrogram, params: &MaskParams) -> GainMap {
    let (n_frames, n_bins) = power.shape();
    let seeds = params.seed_count(n_bins);
    let radius = params.neighborhood_bins;
    let mut gains = Array2::zeros((n_frames, n_bins));
    for (row, mut out) in power.0.axis_iter(Axis(0)).zip(gains.axis_iter_mut(Axis(0))) {
        let row = row.to_vec();
        for k in top_bins(&row, seeds) {
            let lo = k.saturating_sub(radius);
            let hi = (k + radius).min(n_bins - 1);
            for g in out.slice_mut(ndarray::s![lo..=hi]) {
                *g = params.boost_gain;
            }
        }
    }
    GainMap {
        gains,
        params: params.clone(),
    }
}

pub fn combine_masks(sensitivity: &GainMap, loudness: &GainMap) -> Result<GainMap> {
    if sensitivity.shape() != loudness.shape() {
        return Err(Error::DimensionMismatch {
            context: "combine_masks",
            expected: sensitivity.shape(),
            actual: loudness.shape(),
        });
    }
    let mut gains = sensitivity.gains.clone();
    gains.zip_mut_with(&loudness.gains, |s, &l| *s = s.max(l));
    Ok(GainMap {
        gains,
        params: sensitivity.params.clone(),
    })
}

/// Sensitivity and loudness masks combined for the given speech spectrogram.
pub fn build_gain_map(
    power: &PowerSpectrogram,
    sample_rate: u32,
    params: &MaskParams,
) -> Result<GainMap> {
    params.validate()?;
    let (n_frames, n_bins) = power.shape();
    combine_masks(
        &sensitivity_mask(n_frames, n_bins, sample_rate, params),
        &loudness_mask(power, params),
    )
}

/// Which cells of a spectrogram count as "audible" noise: inside the
/// sensitive band and outside every loudness neighbourhood.
pub fn audible_cells(
    power: &PowerSpectrogram,
    sample_rate: u32,
    params: &MaskParams,
) -> Array2<bool> {
    let (_, n_bins) = power.shape();
    let loud = loudness_mask(power, params);
    Array2::from_shape_fn(power.shape(), |(n, k)| {
        in_sensitive_band(k, n_bins, sample_rate, params) && loud.gains[[n, k]] == 0.0
    })
}

/// Weighted overlap-add filter that applies a [`GainMap`] to a time signal.
///
/// Frames follow the MFCC framing (same length, hop and FFT size) and use
/// the Hamming window for both analysis and synthesis. Output is
/// normalized by the summed squared window, so unit gains reproduce the
/// input exactly up to rounding.
#[derive(Clone)]
pub struct SpectralShaper {
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl SpectralShaper {
    pub fn new(pipeline: &MfccPipeline) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            frame_len: pipeline.frame_len(),
            hop: pipeline.hop(),
            n_fft: pipeline.n_fft(),
            window: pipeline.window().to_vec(),
            fft: planner.plan_fft_forward(pipeline.n_fft()),
            ifft: planner.plan_fft_inverse(pipeline.n_fft()),
        }
    }

    /// Frames needed so every sample of a `len`-sample signal is covered.
    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.frame_len {
            1
        } else {
            (len - self.frame_len).div_ceil(self.hop) + 1
        }
    }

    /// One-sided spectrum of each analysis frame.
    pub fn analyze(&self, signal: &[f64]) -> Array2<Complex64> {
        let n_frames = self.frame_count(signal.len());
        let n_bins = self.n_fft / 2 + 1;
        let mut out = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::default(); self.n_fft];
        for n in 0..n_frames {
            self.load_frame(signal, n, &mut buf);
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                out[[n, k]] = buf[k];
            }
        }
        out
    }

    fn load_frame(&self, signal: &[f64], n: usize, buf: &mut [Complex64]) {
        buf.fill(Complex64::default());
        let start = n * self.hop;
        let tail = signal.get(start..).unwrap_or(&[]);
        for ((b, &x), &w) in buf.iter_mut().zip(tail).zip(&self.window) {
            b.re = x * w;
        }
    }

    /// Applies `gains` to `signal`. Frames beyond the map's last row reuse it.
    pub fn shape(&self, signal: &[f64], gains: &Array2<f64>) -> Vec<f64> {
        let n_frames = self.frame_count(signal.len());
        let n_bins = self.n_fft / 2 + 1;
        debug_assert_eq!(gains.ncols(), n_bins);
        let mut out = vec![0.0; signal.len()];
        let mut norm = vec![0.0; signal.len()];
        let mut buf = vec![Complex64::default(); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for n in 0..n_frames {
            self.load_frame(signal, n, &mut buf);
            self.fft.process(&mut buf);
            let row = gains.row(n.min(gains.nrows().saturating_sub(1)));
            for (j, c) in buf.iter_mut().enumerate() {
                let k = if j < n_bins { j } else { self.n_fft - j };
                *c *= row[k] * scale;
            }
            self.ifft.process(&mut buf);
            let start = n * self.hop;
            let end = (start + self.frame_len).min(signal.len());
            for (((o, z), b), &w) in out[start..end]
                .iter_mut()
                .zip(&mut norm[start..end])
                .zip(&buf)
                .zip(&self.window)
            {
                *o += b.re * w;
                *z += w * w;
            }
        }
        out.iter_mut().zip(&norm).for_each(|(o, &w)| {
            if w > 0.0 {
                *o /= w
            }
        });
        out
    }
}

/// Spectral energy of `signal` on the cells flagged in `cells`, using the
/// shaper's analysis frames. Frames past the mask's last row reuse it.
pub fn cell_energy(shaper: &SpectralShaper, signal: &[f64], cells: &Array2<bool>) -> f64 {
    let spec = shaper.analyze(signal);
    let last = cells.nrows().saturating_sub(1);
    spec.indexed_iter()
        .filter(|((n, k), _)| cells[[(*n).min(last), *k]])
        .map(|(_, c)| c.norm_sqr())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfcc::MfccConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bin_for(hz: f64) -> usize {
        (hz * 512.0 / 16_000.0).round() as usize
    }

    #[test]
    fn sensitivity_examples() {
        let p = MaskParams::default();
        let m = sensitivity_mask(2, 257, 16_000, &p);
        assert_eq!(m.gains[[0, bin_for(1000.0)]], 0.2);
        assert_eq!(m.gains[[1, bin_for(7000.0)]], 1.0);
        // bin 160 sits exactly at 5000 Hz
        assert_eq!(bin_frequency(160, 257, 16_000), 5000.0);
        assert_eq!(m.gains[[0, 160]], 0.2);
        assert_eq!(m.gains[[0, 161]], 1.0);
        // 200 Hz is bin 6.4: bin 6 (187.5 Hz) is outside, bin 7 inside
        assert_eq!(m.gains[[0, 6]], 1.0);
        assert_eq!(m.gains[[0, 7]], 0.2);
    }

    #[test]
    fn loudness_all_zero_frame_ties_break_low() {
        let p = MaskParams::default();
        let power = PowerSpectrogram(Array2::zeros((1, 257)));
        let m = loudness_mask(&power, &p);
        // seeds 0..26 dilated by 3 -> bins 0..=28
        for k in 0..257 {
            assert_eq!(m.gains[[0, k]], if k <= 28 { 1.0 } else { 0.0 }, "bin {k}");
        }
    }

    #[test]
    fn single_dominant_bin_neighbourhood() {
        let p = MaskParams {
            top_percent: 0.1,
            ..MaskParams::default()
        };
        assert_eq!(p.seed_count(257), 1);
        for k in [0usize, 1, 100, 255, 256] {
            let mut row = Array2::zeros((1, 257));
            row[[0, k]] = 5.0;
            let m = loudness_mask(&PowerSpectrogram(row), &p);
            for j in 0..257 {
                let expect = if j + 3 >= k && j <= k + 3 { 1.0 } else { 0.0 };
                assert_eq!(m.gains[[0, j]], expect, "peak {k} bin {j}");
            }
        }
    }

    #[test]
    fn seed_count_uses_ceiling() {
        let p = MaskParams::default();
        // ceil(25.7)
        assert_eq!(p.seed_count(257), 26);
        assert_eq!(p.seed_count(10), 1);
        assert_eq!(p.seed_count(11), 2);
        let full = MaskParams {
            top_percent: 100.0,
            ..p
        };
        assert_eq!(full.seed_count(257), 257);
    }

    #[test]
    fn random_frame_selects_exactly_26_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let row: Vec<f64> = (0..257).map(|_| rng.random_range(0.0..1.0)).collect();
        let seeds = top_bins(&row, MaskParams::default().seed_count(257));
        assert_eq!(seeds.len(), 26);
        // brute-force: a bin is a seed iff fewer than 26 bins are strictly louder
        for (k, &v) in row.iter().enumerate() {
            let louder = row.iter().filter(|&&w| w > v).count();
            assert_eq!(seeds.contains(&k), louder < 26);
        }
    }

    #[test]
    fn combine_examples() {
        let p = MaskParams::default();
        let s = sensitivity_mask(1, 257, 16_000, &p);
        let mut l = GainMap {
            gains: Array2::zeros((1, 257)),
            params: p.clone(),
        };
        l.gains[[0, 40]] = 1.0;
        l.gains[[0, 200]] = 0.5;
        let c = combine_masks(&s, &l).unwrap();
        assert_eq!(c.gains[[0, 30]], 0.2);
        assert_eq!(c.gains[[0, 40]], 1.0);
        assert_eq!(c.gains[[0, 200]], 1.0);
        let wrong = GainMap {
            gains: Array2::zeros((2, 257)),
            params: p,
        };
        assert!(matches!(
            combine_masks(&s, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn shaper_unit_gain_is_identity() {
        let pipe = MfccPipeline::new(MfccConfig::default(), 16_000).unwrap();
        let shaper = SpectralShaper::new(&pipe);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [100, 400, 3200, 3333] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = shaper.shape(&x, &Array2::ones((1, 257)));
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shaper_zero_gain_silences() {
        let pipe = MfccPipeline::new(MfccConfig::default(), 16_000).unwrap();
        let shaper = SpectralShaper::new(&pipe);
        let x = vec![0.3; 1000];
        assert!(shaper
            .shape(&x, &Array2::zeros((4, 257)))
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn params_validation() {
        assert!(MaskParams::default().validate().is_ok());
        let bad = MaskParams {
            in_band_gain: 1.5,
            ..MaskParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskParams {
            top_percent: 0.0,
            ..MaskParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskParams {
            sensitive_lo: 6000.0,
            ..MaskParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
