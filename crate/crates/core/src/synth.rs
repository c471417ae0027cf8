//! Deterministic speech-like test signals.
//!
//! Voiced segments are additive harmonic series under three formant bumps,
//! fricatives are high-passed noise bursts, and pauses carry only a faint
//! noise floor. Good enough to exercise the front end with realistic
//! spectral structure when no corpus is at hand.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;

const NOISE_FLOOR: f64 = 0.002;
const PEAK: f64 = 0.8;

/// A speech-like clip of `duration_ms` at `sample_rate`, fully determined by `seed`.
pub fn speech_like(duration_ms: f64, sample_rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let len = ((duration_ms * sr / 1000.0).round() as usize).max(1);
    let mut out: Vec<f64> = (0..len)
        .map(|_| rng.random_range(-NOISE_FLOOR..NOISE_FLOOR))
        .collect();

    let mut pos = 0usize;
    while pos < len {
        let kind: f64 = rng.random();
        let seg_ms = if kind < 0.6 {
            rng.random_range(80.0..250.0)
        } else if kind < 0.8 {
            rng.random_range(50.0..120.0)
        } else {
            rng.random_range(40.0..150.0)
        };
        let seg_len = ((seg_ms * sr / 1000.0) as usize).min(len - pos);
        let seg = &mut out[pos..pos + seg_len];
        if kind < 0.6 {
            voiced(seg, sr, &mut rng);
        } else if kind < 0.8 {
            fricative(seg, &mut rng);
        }
        pos += seg_len;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK {
        out.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    AudioBuffer::new(out, sample_rate).expect("synthesized samples are within full scale")
}

/// Uniform white noise in `[-amplitude, amplitude]`.
pub fn white_noise(len: usize, amplitude: f64, sample_rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len.max(1))
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect();
    AudioBuffer::new(samples, sample_rate).expect("amplitude must be within full scale")
}

fn envelope(i: usize, n: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(n / 2).max(1);
    if i < ramp {
        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
    } else if i >= n - ramp {
        0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

fn voiced(seg: &mut [f64], sr: f64, rng: &mut ChaCha8Rng) {
    let f0_start: f64 = rng.random_range(90.0..220.0);
    let f0_end = f0_start * rng.random_range(0.85..1.15);
    let formants = [
        (
            rng.random_range(300.0..800.0),
            rng.random_range(60.0..120.0),
        ),
        (
            rng.random_range(900.0..2300.0),
            rng.random_range(80.0..160.0),
        ),
        (
            rng.random_range(2400.0..3200.0),
            rng.random_range(100.0..200.0),
        ),
    ];
    let amp: f64 = rng.random_range(0.2..0.6);
    let max_f = 4000.0f64.min(sr / 2.0 - 100.0);
    let n_harm = (max_f / f0_start.max(f0_end)).floor() as usize;
    let weights: Vec<(f64, f64)> = (1..=n_harm)
        .map(|h| {
            let f = h as f64 * f0_start;
            let env: f64 = formants
                .iter()
                .map(|(fc, bw)| (-0.5 * ((f - fc) / bw).powi(2)).exp())
                .sum::<f64>()
                + 0.02;
            (env / h as f64, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let norm: f64 = weights.iter().map(|(w, _)| w).sum::<f64>().max(1e-9);

    let n = seg.len();
    let ramp = (0.015 * sr) as usize;
    let mut phase = 0.0;
    for (i, s) in seg.iter_mut().enumerate() {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / n.max(1) as f64;
        phase += 2.0 * PI * f0 / sr;
        let v: f64 = weights
            .iter()
            .enumerate()
            .map(|(h, (w, ph))| w * ((h + 1) as f64 * phase + ph).sin())
            .sum();
        *s += amp * envelope(i, n, ramp) * v / norm;
    }
}

fn fricative(seg: &mut [f64], rng: &mut ChaCha8Rng) {
    let amp: f64 = rng.random_range(0.05..0.15);
    let n = seg.len();
    let ramp = n / 5;
    let (mut p1, mut p2) = (0.0, 0.0);
    for (i, s) in seg.iter_mut().enumerate() {
        let w: f64 = rng.random_range(-1.0..1.0);
        // second difference pushes energy toward high frequencies
        let hp = (w - 2.0 * p1 + p2) / 4.0;
        p2 = p1;
        p1 = w;
        *s += amp * envelope(i, n, ramp) * hp;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = speech_like(1000.0, 16_000, 3);
        let b = speech_like(1000.0, 16_000, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16_000);
        assert!(a.samples().iter().all(|v| v.abs() <= PEAK));
        assert!(a.rms() > 0.01);
        assert_ne!(a, speech_like(1000.0, 16_000, 4));
    }
}
