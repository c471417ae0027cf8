//! Latency-budgeted streaming: split audio into chunks, grant each chunk as
//! many attack iterations as the budget allows, and adapt to measured cost.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{add_clamped, AdversarialEngine, AttackConfig};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::masking::MaskParams;
use crate::synth::speech_like;

/// Weight of the newest sample in the per-iteration cost average.
pub const EMA_ALPHA: f64 = 0.3;

const PLAN_EPS: f64 = 1e-9;

/// Added-delay tolerance of an application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub name: String,
    pub budget_ms: f64,
    #[serde(default = "default_chunk_ms")]
    pub chunk_ms: f64,
}

fn default_chunk_ms() -> f64 {
    200.0
}

impl LatencyProfile {
    pub fn new(name: impl Into<String>, budget_ms: f64, chunk_ms: f64) -> Result<Self> {
        let p = Self {
            name: name.into(),
            budget_ms,
            chunk_ms,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn telephone() -> Self {
        Self {
            name: "telephone".into(),
            budget_ms: 450.0,
            chunk_ms: default_chunk_ms(),
        }
    }

    pub fn messaging() -> Self {
        Self {
            name: "messaging".into(),
            budget_ms: 1000.0,
            chunk_ms: default_chunk_ms(),
        }
    }

    /// Built-in profile by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "telephone" => Some(Self::telephone()),
            "messaging" => Some(Self::messaging()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget_ms > 0.0 && self.budget_ms.is_finite()) {
            return Err(Error::config(
                "profile.budget_ms",
                format!("{} must be > 0", self.budget_ms),
            ));
        }
        if !(self.chunk_ms > 0.0 && self.chunk_ms.is_finite()) {
            return Err(Error::config(
                "profile.chunk_ms",
                format!("{} must be > 0", self.chunk_ms),
            ));
        }
        Ok(())
    }

    /// Chunk length in samples at `sample_rate`, at least one sample.
    pub fn chunk_len(&self, sample_rate: u32) -> usize {
        ((self.chunk_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
    }
}

/// Iteration grant for one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationPlan {
    pub iterations: usize,
    /// Even one iteration is predicted to miss the budget.
    pub budget_exceeded: bool,
}

/// Largest `k >= 1` with `fixed_ms + k * per_iter_ms <= budget_ms`.
pub fn plan_iterations(budget_ms: f64, per_iter_ms: f64, fixed_ms: f64) -> IterationPlan {
    let room = (budget_ms - fixed_ms) / per_iter_ms.max(f64::MIN_POSITIVE);
    let k = (room + PLAN_EPS).floor();
    if k >= 1.0 {
        IterationPlan {
            iterations: k.min(usize::MAX as f64) as usize,
            budget_exceeded: false,
        }
    } else {
        IterationPlan {
            iterations: 1,
            budget_exceeded: true,
        }
    }
}

/// Cost model of one chunk: `fixed_ms + iterations * per_iter_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub fixed_ms: f64,
    pub per_iter_ms: f64,
}

impl CostModel {
    /// The mobile figures: about 302 ms overhead and 42 ms per iteration.
    pub const PHONE: Self = Self {
        fixed_ms: 302.0,
        per_iter_ms: 42.0,
    };

    pub fn chunk_ms(&self, iterations: usize) -> f64 {
        self.fixed_ms + iterations as f64 * self.per_iter_ms
    }
}

/// Source of the processing time charged to each chunk.
pub trait Clock {
    /// Time to charge for `chunk_index`, given the iterations run and the
    /// wall-clock time the work actually took.
    fn charge_ms(&mut self, chunk_index: usize, iterations: usize, measured_ms: f64) -> f64;
}

/// Charges the real elapsed time.
#[derive(Debug, Clone, Copy, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn charge_ms(&mut self, _chunk_index: usize, _iterations: usize, measured_ms: f64) -> f64 {
        measured_ms
    }
}

/// Charges a synthetic cost, optionally inflated for chosen chunks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulatedClock {
    pub model: Option<CostModel>,
    /// Cost multiplier per chunk index (absent means 1).
    pub slowdown: HashMap<usize, f64>,
}

impl SimulatedClock {
    pub fn new(model: CostModel) -> Self {
        Self {
            model: Some(model),
            slowdown: HashMap::new(),
        }
    }

    pub fn with_slowdown(mut self, chunk_index: usize, factor: f64) -> Self {
        self.slowdown.insert(chunk_index, factor);
        self
    }
}

impl Clock for SimulatedClock {
    fn charge_ms(&mut self, chunk_index: usize, iterations: usize, measured_ms: f64) -> f64 {
        let base = self.model.map_or(measured_ms, |m| m.chunk_ms(iterations));
        base * self.slowdown.get(&chunk_index).copied().unwrap_or(1.0)
    }
}

/// How chunks arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pacing {
    /// Each chunk is taken as soon as the previous one is done (file input),
    /// so no chunk ever waits.
    #[default]
    Pull,
    /// Chunk `i` becomes available at `(i + 1) * chunk_ms`, as from a live
    /// capture; backlog shows up as wait time.
    Live,
}

/// Streaming options beyond the attack itself.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub profile: LatencyProfile,
    /// Initial cost estimate; `per_iter_ms` is then tracked by EMA.
    pub cost: CostModel,
    pub pacing: Pacing,
    /// Upper bound on granted iterations; `None` lets the budget decide.
    pub max_iterations: Option<usize>,
    /// Masking parameters, or `None` for unmasked noise.
    pub mask: Option<MaskParams>,
}

impl StreamConfig {
    pub fn new(profile: LatencyProfile, cost: CostModel) -> Self {
        Self {
            profile,
            cost,
            pacing: Pacing::Pull,
            max_iterations: None,
            mask: Some(MaskParams::default()),
        }
    }
}

/// What the scheduler did with one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub chunk_index: usize,
    pub iterations_granted: usize,
    /// Clock time by which the chunk should have been done.
    pub deadline_ms: f64,
    pub wait_ms: f64,
    pub actual_ms: f64,
    /// Latency (wait plus processing) went over budget, or the plan could
    /// not fit even one iteration.
    pub flagged: bool,
}

impl ScheduleDecision {
    pub fn latency_ms(&self) -> f64 {
        self.wait_ms + self.actual_ms
    }
}

/// Writes the decision log as `chunk_index,iterations_granted,actual_ms,flagged`.
pub fn decisions_csv(decisions: &[ScheduleDecision]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["chunk_index", "iterations_granted", "actual_ms", "flagged"])?;
    for d in decisions {
        w.write_record([
            d.chunk_index.to_string(),
            d.iterations_granted.to_string(),
            d.actual_ms.to_string(),
            d.flagged.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Perturbed chunks (in input order) and the decision log.
#[derive(Debug, Clone, Default)]
pub struct StreamOutput {
    pub chunks: Vec<AudioBuffer>,
    pub decisions: Vec<ScheduleDecision>,
}

impl StreamOutput {
    /// Perturbed chunks joined back into one buffer.
    pub fn concatenated(&self) -> Option<AudioBuffer> {
        concat(&self.chunks)
    }
}

/// A stream aborted by a generation error; `partial` holds everything up
/// to the failing chunk.
#[derive(Debug)]
pub struct StreamAbort {
    pub error: Error,
    pub partial: StreamOutput,
}

impl std::fmt::Display for StreamAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stream aborted after {} chunks: {}",
            self.partial.chunks.len(),
            self.error
        )
    }
}

impl std::error::Error for StreamAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Splits `buffer` into consecutive chunks of `chunk_ms`; the last may be short.
pub fn split_chunks(buffer: &AudioBuffer, chunk_ms: f64) -> Vec<AudioBuffer> {
    let n = ((chunk_ms * buffer.sample_rate() as f64 / 1000.0).round() as usize).max(1);
    buffer
        .samples()
        .chunks(n)
        .map(|c| {
            AudioBuffer::new(c.to_vec(), buffer.sample_rate()).expect("chunk of a valid buffer")
        })
        .collect()
}

/// Joins buffers sharing a sample rate; `None` for an empty list.
pub fn concat(chunks: &[AudioBuffer]) -> Option<AudioBuffer> {
    let rate = chunks.first()?.sample_rate();
    let samples = chunks
        .iter()
        .flat_map(|c| c.samples().iter().copied())
        .collect();
    AudioBuffer::new(samples, rate).ok()
}

/// Perturbs one chunk with exactly `iterations` steps. Chunks shorter than
/// one analysis frame are zero-padded for the attack and trimmed back.
pub fn perturb_chunk(
    engine: &AdversarialEngine,
    chunk: &AudioBuffer,
    attack: &AttackConfig,
    iterations: usize,
    mask: Option<&MaskParams>,
) -> Result<AudioBuffer> {
    let frame_len = engine.pipeline().frame_len();
    let padded;
    let work = if chunk.len() < frame_len {
        let mut s = chunk.samples().to_vec();
        s.resize(frame_len, 0.0);
        padded = AudioBuffer::new(s, chunk.sample_rate())?;
        &padded
    } else {
        chunk
    };
    let cfg = AttackConfig {
        iterations,
        use_masking: mask.is_some(),
        ..attack.clone()
    };
    let gains = mask
        .map(|p| engine.gain_map(work.samples(), p))
        .transpose()?;
    let noise = engine.generate(work, &cfg, gains.as_ref())?;
    add_clamped(chunk, &noise.waveform[..chunk.len()])
}

/// Runs the chunks one at a time under `clock`, re-planning iterations
/// before each chunk from the running cost estimate.
pub fn process_stream(
    engine: &AdversarialEngine,
    chunks: &[AudioBuffer],
    attack: &AttackConfig,
    stream: &StreamConfig,
    clock: &mut dyn Clock,
) -> std::result::Result<StreamOutput, StreamAbort> {
    let mut out = StreamOutput::default();
    let abort = |error, partial| StreamAbort { error, partial };
    if let Err(e) = stream.profile.validate() {
        return Err(abort(e, out));
    }
    if let Some(Err(e)) = stream.mask.as_ref().map(MaskParams::validate) {
        return Err(abort(e, out));
    }

    let budget = stream.profile.budget_ms;
    let fixed = stream.cost.fixed_ms;
    let mut per_iter = stream.cost.per_iter_ms;
    let mut now = 0.0f64;

    for (index, chunk) in chunks.iter().enumerate() {
        let arrival = match stream.pacing {
            Pacing::Pull => now,
            Pacing::Live => (index + 1) as f64 * stream.profile.chunk_ms,
        };
        let start = now.max(arrival);
        let wait = start - arrival;
        let mut plan = plan_iterations(budget - wait, per_iter, fixed);
        if let Some(cap) = stream.max_iterations {
            plan.iterations = plan.iterations.min(cap.max(1));
        }

        let t0 = Instant::now();
        let result = perturb_chunk(engine, chunk, attack, plan.iterations, stream.mask.as_ref());
        let measured = t0.elapsed().as_secs_f64() * 1000.0;
        let perturbed = match result {
            Ok(p) => p,
            Err(e) => return Err(abort(e, out)),
        };
        let actual = clock.charge_ms(index, plan.iterations, measured);
        now = start + actual;

        let sample = ((actual - fixed) / plan.iterations as f64).max(f64::MIN_POSITIVE);
        per_iter = EMA_ALPHA * sample + (1.0 - EMA_ALPHA) * per_iter;

        out.chunks.push(perturbed);
        out.decisions.push(ScheduleDecision {
            chunk_index: index,
            iterations_granted: plan.iterations,
            deadline_ms: arrival + budget,
            wait_ms: wait,
            actual_ms: actual,
            flagged: plan.budget_exceeded || wait + actual > budget + PLAN_EPS,
        });
    }
    Ok(out)
}

/// Measures the wall-clock cost model of one chunk of `chunk_ms` on a
/// synthetic speech clip. A warm-up run is discarded; each timing is the
/// median of `reps` runs.
pub fn calibrate(
    engine: &AdversarialEngine,
    attack: &AttackConfig,
    chunk_ms: f64,
    iterations: usize,
    reps: usize,
    seed: u64,
) -> Result<CostModel> {
    let iterations = iterations.max(2);
    let chunk = speech_like(chunk_ms, engine.pipeline().sample_rate(), seed);
    let mask = attack.use_masking.then(MaskParams::default);
    let time = |k: usize| -> Result<f64> {
        let mut runs = (0..reps.max(1))
            .map(|_| {
                let t0 = Instant::now();
                perturb_chunk(engine, &chunk, attack, k, mask.as_ref())?;
                Ok(t0.elapsed().as_secs_f64() * 1000.0)
            })
            .collect::<Result<Vec<f64>>>()?;
        runs.sort_by(f64::total_cmp);
        Ok(runs[runs.len() / 2])
    };
    perturb_chunk(engine, &chunk, attack, 1, mask.as_ref())?;
    let one = time(1)?;
    let many = time(iterations)?;
    let per_iter_ms = ((many - one) / (iterations - 1) as f64).max(1e-6);
    Ok(CostModel {
        fixed_ms: (one - per_iter_ms).max(0.0),
        per_iter_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfcc::MfccConfig;

    fn engine() -> AdversarialEngine {
        AdversarialEngine::new(MfccConfig::default(), 16_000).unwrap()
    }

    fn chunks(n: usize) -> Vec<AudioBuffer> {
        split_chunks(&speech_like(200.0 * n as f64, 16_000, 5), 200.0)
    }

    fn quiet(cost: CostModel, profile: LatencyProfile) -> StreamConfig {
        StreamConfig {
            mask: None,
            ..StreamConfig::new(profile, cost)
        }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(
            plan_iterations(450.0, 42.0, 302.0),
            IterationPlan {
                iterations: 3,
                budget_exceeded: false
            }
        );
        assert_eq!(plan_iterations(1000.0, 42.0, 302.0).iterations, 16);
        assert_eq!(
            plan_iterations(100.0, 42.0, 302.0),
            IterationPlan {
                iterations: 1,
                budget_exceeded: true
            }
        );
        assert_eq!(
            plan_iterations(344.0, 42.0, 302.0),
            IterationPlan {
                iterations: 1,
                budget_exceeded: false
            }
        );
    }

    #[test]
    fn profiles() {
        assert_eq!(
            LatencyProfile::builtin("telephone").unwrap().budget_ms,
            450.0
        );
        assert_eq!(
            LatencyProfile::builtin("messaging").unwrap().budget_ms,
            1000.0
        );
        assert!(LatencyProfile::builtin("radio").is_none());
        assert!(LatencyProfile::new("x", 0.0, 200.0).is_err());
        assert_eq!(LatencyProfile::telephone().chunk_len(16_000), 3200);
    }

    #[test]
    fn empty_stream() {
        let mut clock = SimulatedClock::new(CostModel::PHONE);
        let out = process_stream(
            &engine(),
            &[],
            &AttackConfig::default(),
            &quiet(CostModel::PHONE, LatencyProfile::telephone()),
            &mut clock,
        )
        .unwrap();
        assert!(out.chunks.is_empty() && out.decisions.is_empty());
        assert_eq!(
            decisions_csv(&out.decisions).unwrap(),
            "chunk_index,iterations_granted,actual_ms,flagged\n"
        );
    }

    #[test]
    fn generous_budget_is_steady() {
        let cost = CostModel {
            fixed_ms: 5.0,
            per_iter_ms: 1.0,
        };
        let profile = LatencyProfile::new("wide", 30.0, 200.0).unwrap();
        let mut clock = SimulatedClock::new(cost);
        let input = chunks(10);
        let out = process_stream(
            &engine(),
            &input,
            &AttackConfig::default(),
            &quiet(cost, profile),
            &mut clock,
        )
        .unwrap();
        assert_eq!(out.decisions.len(), 10);
        assert!(out
            .decisions
            .iter()
            .all(|d| !d.flagged && d.iterations_granted == 25));
        assert_eq!(
            out.concatenated().unwrap().len(),
            concat(&input).unwrap().len()
        );
    }

    #[test]
    fn slow_chunk_reduces_iterations_quickly() {
        let mut clock = SimulatedClock::new(CostModel::PHONE).with_slowdown(3, 5.0);
        let cfg = StreamConfig {
            max_iterations: Some(20),
            ..quiet(CostModel::PHONE, LatencyProfile::messaging())
        };
        let out = process_stream(
            &engine(),
            &chunks(8),
            &AttackConfig::default(),
            &cfg,
            &mut clock,
        )
        .unwrap();
        let k: Vec<usize> = out.decisions.iter().map(|d| d.iterations_granted).collect();
        assert_eq!(&k[..4], &[16, 16, 16, 16]);
        assert!(k[4] < 16 || k[5] < 16, "{k:?}");
        assert!(out.decisions[3].flagged);
    }

    #[test]
    fn tiny_budget_flags_everything_but_stays_live() {
        let mut clock = SimulatedClock::new(CostModel::PHONE);
        let cfg = quiet(
            CostModel::PHONE,
            LatencyProfile::new("tight", 1.0, 200.0).unwrap(),
        );
        let input = chunks(3);
        let out = process_stream(
            &engine(),
            &input,
            &AttackConfig::default(),
            &cfg,
            &mut clock,
        )
        .unwrap();
        assert_eq!(out.chunks.len(), 3);
        assert!(out
            .decisions
            .iter()
            .all(|d| d.flagged && d.iterations_granted == 1));
    }

    #[test]
    fn live_pacing_accumulates_wait() {
        let mut clock = SimulatedClock::new(CostModel::PHONE);
        let cfg = StreamConfig {
            pacing: Pacing::Live,
            ..quiet(CostModel::PHONE, LatencyProfile::telephone())
        };
        let out = process_stream(
            &engine(),
            &chunks(4),
            &AttackConfig::default(),
            &cfg,
            &mut clock,
        )
        .unwrap();
        assert_eq!(out.decisions[0].wait_ms, 0.0);
        assert!(out.decisions[3].wait_ms > out.decisions[1].wait_ms);
        assert!(out.decisions[3].flagged);
    }

    #[test]
    fn chunks_are_perturbed_independently() {
        let e = engine();
        let attack = AttackConfig::default();
        let input = chunks(3);
        let mut clock = SimulatedClock::new(CostModel::PHONE);
        let cfg = StreamConfig::new(LatencyProfile::telephone(), CostModel::PHONE);
        let out = process_stream(&e, &input, &attack, &cfg, &mut clock).unwrap();
        for (c, o) in input.iter().zip(&out.chunks) {
            assert_eq!(
                o,
                &perturb_chunk(&e, c, &attack, 3, Some(&MaskParams::default())).unwrap()
            );
        }
    }

    #[test]
    fn short_tail_chunk_is_padded() {
        let e = engine();
        let tail = AudioBuffer::new(vec![0.1; 100], 16_000).unwrap();
        let out = perturb_chunk(&e, &tail, &AttackConfig::default(), 2, None).unwrap();
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn decision_csv_columns() {
        let d = ScheduleDecision {
            chunk_index: 2,
            iterations_granted: 3,
            deadline_ms: 0.0,
            wait_ms: 0.0,
            actual_ms: 428.0,
            flagged: false,
        };
        assert_eq!(
            decisions_csv(&[d]).unwrap(),
            "chunk_index,iterations_granted,actual_ms,flagged\n2,3,428,false\n"
        );
    }
}
