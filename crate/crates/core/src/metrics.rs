//! Word error rate and signal-level distortion measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfcc::{row_norm, CepstralFeatures};

/// Normalized word sequence: lowercase, punctuation stripped, whitespace split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    words: Vec<String>,
}

impl Transcript {
    /// Apostrophes inside words are kept ("what's"); all other punctuation is dropped.
    pub fn from_text(text: &str) -> Self {
        let words = text
            .split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric() || *c == '\'')
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .map(|w| w.trim_matches('\'').to_string())
            .filter(|w| !w.is_empty())
            .collect();
        Self { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.words.join(" "))
    }
}

/// Minimum number of word substitutions, deletions and insertions turning
/// `reference` into `hypothesis`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// `(S + D + I) / N`, unclamped (insertions can push it above 1).
pub fn word_error_rate(reference: &Transcript, hypothesis: &Transcript) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference.words(), hypothesis.words()) as f64 / reference.len() as f64)
}

/// Mean over frames of the Euclidean distance between coefficient rows.
pub fn feature_distortion(clean: &CepstralFeatures, adv: &CepstralFeatures) -> Result<f64> {
    if clean.shape() != adv.shape() {
        return Err(Error::DimensionMismatch {
            context: "feature_distortion",
            expected: clean.shape(),
            actual: adv.shape(),
        });
    }
    let n = clean.n_frames();
    if n == 0 {
        return Ok(0.0);
    }
    let diff = &clean.0 - &adv.0;
    Ok(diff.rows().into_iter().map(row_norm).sum::<f64>() / n as f64)
}

/// `10 log10(P_signal / P_noise)`; infinite for zero noise.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    let ps: f64 = signal.iter().map(|v| v * v).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    if pn == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (ps / pn).log10()
    }
}
