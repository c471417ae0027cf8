//! Mono PCM waveform container and 16-bit RIFF/WAVE interchange.
//!
//! Samples are held as `f64` in `[-1.0, 1.0]`. Files on disk are always
//! 16-bit signed little-endian PCM; multi-channel input is averaged down to
//! mono on read and output is always mono.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every DSP default in this crate is tuned for.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

const I16_SCALE: f64 = 32768.0;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting empty input, a zero rate, and samples
    /// outside `[-1, 1]` (including NaN).
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be > 0"));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::config(
                "samples",
                format!("sample {i} = {s} lies outside [-1, 1]"),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a buffer after clamping every sample into `[-1, 1]`.
    /// NaN samples become 0.
    pub fn from_clamped(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false for a constructed buffer; provided for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Reads a 16-bit PCM WAV file and downmixes it to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_wav(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::IoFailure { cause, .. } => Error::io(path, cause),
        other => other,
    })
}

/// Decodes WAV bytes from any reader. Unknown chunks (LIST, fact, ...) are skipped.
pub fn decode_wav<R: Read>(reader: R) -> Result<AudioBuffer> {
    let mut wav = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = wav.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} with {} bits per sample; only 16-bit integer PCM is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav("zero channels".into()));
    }
    let raw = wav
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    if raw.len() % channels != 0 {
        return Err(Error::MalformedWav(format!(
            "{} samples is not a multiple of {} channels",
            raw.len(),
            channels
        )));
    }
    let samples: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / I16_SCALE).sum();
            sum / channels as f64
        })
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes `buffer` as 16-bit mono PCM with the canonical 44-byte header.
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buffer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes `buffer` to in-memory WAV bytes.
pub fn encode_wav(buffer: &AudioBuffer) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::with_capacity(44 + 2 * buffer.len()));
    encode_into(buffer, &mut cursor)?;
    Ok(cursor.into_inner())
}

fn encode_into<W: Write + Seek>(buffer: &AudioBuffer, writer: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wav = hound::WavWriter::new(writer, spec).map_err(map_hound)?;
    let mut ints = wav.get_i16_writer(buffer.len() as u32);
    for &s in &buffer.samples {
        ints.write_sample(quantize(s));
    }
    ints.flush().map_err(map_hound)?;
    wav.finalize().map_err(map_hound)
}

/// Round-to-nearest with clamping at the 16-bit limits.
pub fn quantize(sample: f64) -> i16 {
    (sample * I16_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Returns the buffer unchanged when its rate matches; resampling is not offered.
pub fn resample_check(buffer: AudioBuffer, required_rate: u32) -> Result<AudioBuffer> {
    if buffer.sample_rate == required_rate {
        Ok(buffer)
    } else {
        Err(Error::SampleRateMismatch {
            actual: buffer.sample_rate,
            required: required_rate,
        })
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::MalformedWav(format!("truncated file: {io}"))
        }
        hound::Error::IoError(io) => Error::io("<stream>", io),
        hound::Error::FormatError(msg) => Error::MalformedWav(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported WAV format".into()),
        hound::Error::InvalidSampleFormat | hound::Error::TooWide => {
            Error::UnsupportedEncoding("sample format is not 16-bit integer PCM".into())
        }
        hound::Error::UnfinishedSample => Error::MalformedWav("data chunk ends mid-sample".into()),
    }
}
