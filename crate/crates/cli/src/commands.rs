//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use mfccnoise::eval::{
    read_manifest, run_batch, BatchConfig, ExternalProvider, StubProvider, TranscriptionProvider,
};
use mfccnoise::scheduler::{calibrate, concat, decisions_csv, split_chunks, Pacing, StreamAbort};
use mfccnoise::synth::speech_like;
use mfccnoise::{
    apply_noise, feature_distortion, metrics, process_stream, read_wav, write_wav,
    AdversarialEngine, AttackConfig, AudioBuffer, CostModel, EnvNoiseProfile, SimulatedClock,
    StreamConfig, WallClock,
};
use serde::Serialize;

use crate::config::{merge_attack, merge_external, merge_profile, AttackFlags, FileConfig};
use crate::{
    dump, AttackArgs, BenchArgs, Cli, EvalArgs, Failure, MfccArgs, PerturbArgs, ProviderKind,
    Stage, StreamArgs,
};

type CmdResult = Result<(), Failure>;

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn attack_flags(a: &AttackArgs, env_wav: Option<PathBuf>) -> AttackFlags {
    AttackFlags {
        iterations: a.iterations,
        step_size: a.step_size,
        t_adv: a.t_adv,
        mode: a.mode.map(Into::into),
        no_mask: a.no_mask,
        env_wav,
    }
}

/// Loads the config file and merges attack settings, validating both.
fn load_attack(
    cli: &Cli,
    a: &AttackArgs,
    env_wav: Option<PathBuf>,
) -> Result<(FileConfig, AttackConfig), Failure> {
    let file = FileConfig::load(cli.config.as_deref()).usage()?;
    let (mut attack, env) = merge_attack(&file.attack, &attack_flags(a, env_wav));
    if let Some(path) = env {
        let wav = read_wav(&path)
            .with_context(|| format!("reading env noise {}", path.display()))
            .usage()?;
        attack.env_profile = Some(EnvNoiseProfile::from_waveform(wav));
    }
    attack.validate().usage()?;
    file.mask.validate().usage()?;
    Ok((file, attack))
}

fn read_input(path: &Path) -> Result<AudioBuffer, Failure> {
    read_wav(path).usage()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize)]
struct PerturbTimings {
    load_ms: f64,
    generate_ms: f64,
    write_ms: f64,
}

#[derive(Serialize)]
struct PerturbReport {
    clip_id: String,
    input: PathBuf,
    output: PathBuf,
    sample_rate: u32,
    n_samples: usize,
    iterations: usize,
    best_iteration: usize,
    use_masking: bool,
    mode: mfccnoise::AttackMode,
    step_size: f64,
    t_adv_scale: f64,
    env_level_db: Option<f64>,
    initial_cost: f64,
    final_cost: f64,
    /// Absent when the noise is all zero.
    noise_snr_db: Option<f64>,
    noise_peak: f64,
    noise_rms: f64,
    feature_distortion: f64,
    timings: PerturbTimings,
}

pub fn perturb(cli: &Cli, args: &PerturbArgs) -> CmdResult {
    let t_load = Instant::now();
    let (file, attack) = load_attack(cli, &args.attack, args.env_wav.clone())?;
    let input = read_input(&args.input)?;
    file.mfcc.validate(input.sample_rate()).usage()?;
    let engine = AdversarialEngine::new(file.mfcc.clone(), input.sample_rate()).usage()?;
    let load_ms = ms_since(t_load);
    log(
        cli,
        format!(
            "perturb: {} samples at {} Hz, {} iterations",
            input.len(),
            input.sample_rate(),
            attack.iterations
        ),
    );

    let t_gen = Instant::now();
    let mask = if attack.use_masking {
        Some(engine.gain_map(input.samples(), &file.mask).processing()?)
    } else {
        None
    };
    let noise = engine
        .generate(&input, &attack, mask.as_ref())
        .processing()?;
    let adv = apply_noise(&input, &noise).processing()?;
    let generate_ms = ms_since(t_gen);

    let t_write = Instant::now();
    write_wav(&adv, &args.output).processing()?;
    let pipe = engine.pipeline();
    let clean = pipe.trace(input.samples()).processing()?;
    let adv_trace = pipe.trace(adv.samples()).processing()?;
    let distortion = feature_distortion(&clean.cepstrum, &adv_trace.cepstrum).processing()?;

    if let Some(path) = &args.trace {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))
            .processing()?;
        for r in &noise.trace {
            w.serialize(r).processing()?;
        }
        w.flush().processing()?;
    }
    if let Some(dir) = &cli.dump_dir {
        dump::write_trace(dir, "clean_", &clean).processing()?;
        dump::write_trace(dir, "adversarial_", &adv_trace).processing()?;
        dump::write_matrix(&dir.join("noise.csv"), noise.waveform.iter().map(|v| [*v]))
            .processing()?;
        if let Some(m) = &mask {
            dump::write_matrix(
                &dir.join("gains.csv"),
                m.gains.rows().into_iter().map(|r| r.to_vec()),
            )
            .processing()?;
        }
    }

    let report = PerturbReport {
        clip_id: args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        input: args.input.clone(),
        output: args.output.clone(),
        sample_rate: input.sample_rate(),
        n_samples: input.len(),
        iterations: attack.iterations,
        best_iteration: noise.best_iteration,
        use_masking: attack.use_masking,
        mode: attack.mode,
        step_size: attack.step_size,
        t_adv_scale: attack.t_adv_scale,
        env_level_db: attack
            .env_profile
            .as_ref()
            .map(EnvNoiseProfile::effective_level_db),
        initial_cost: noise.initial_cost,
        final_cost: noise.final_cost,
        noise_snr_db: finite(metrics::snr_db(input.samples(), &noise.waveform)),
        noise_peak: noise.peak(),
        noise_rms: noise.rms(),
        feature_distortion: distortion,
        timings: PerturbTimings {
            load_ms,
            generate_ms,
            write_ms: ms_since(t_write),
        },
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.output.with_extension("json"));
    let json = serde_json::to_string_pretty(&report).processing()?;
    std::fs::write(&report_path, json)
        .with_context(|| format!("writing {}", report_path.display()))
        .processing()?;
    log(
        cli,
        format!(
            "perturb: distortion {distortion:.3}, report {}",
            report_path.display()
        ),
    );
    Ok(())
}

pub fn eval(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let (file, attack) = load_attack(cli, &args.attack, None)?;
    file.mfcc
        .validate(mfccnoise::audio::CANONICAL_SAMPLE_RATE)
        .usage()?;
    let clips = read_manifest(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))
        .usage()?;

    let kind = match (args.provider, file.provider.kind.as_deref()) {
        (Some(k), _) => Some(k),
        (None, Some("stub")) => Some(ProviderKind::Stub),
        (None, Some("external")) => Some(ProviderKind::External),
        (None, Some(other)) => {
            return Err(Failure::Usage(anyhow!(
                "provider.kind: unknown provider {other:?}"
            )))
        }
        (None, None) => None,
    };
    let provider = match kind {
        None => None,
        Some(ProviderKind::Stub) => {
            let path = args
                .stub_map
                .clone()
                .or_else(|| file.provider.stub_map.clone())
                .ok_or_else(|| anyhow!("provider.stub_map: the stub provider needs --stub-map"))
                .usage()?;
            Some(TranscriptionProvider::Stub(
                StubProvider::from_json_file(&path).usage()?,
            ))
        }
        Some(ProviderKind::External) => {
            let cfg = merge_external(
                &file.provider,
                args.endpoint.clone(),
                args.token_env.clone(),
                args.timeout_ms,
            );
            Some(TranscriptionProvider::External(
                ExternalProvider::new(cfg).usage()?,
            ))
        }
    };

    let config = BatchConfig {
        mfcc: file.mfcc.clone(),
        attack,
        mask: file.mask.clone(),
        seed: cli.seed,
    };
    log(cli, format!("eval: {} clips", clips.len()));
    let outcome = run_batch(&clips, &config, provider.as_ref()).processing()?;
    outcome.write_to(&args.out_dir).processing()?;
    for r in outcome.reports.iter().filter(|r| !r.is_ok()) {
        if let Some(e) = &r.error {
            eprintln!("clip {}: {}", r.clip_id, e.message);
        }
    }
    let s = &outcome.summary;
    println!(
        "{} clips, {} ok, {} failed; mean distortion {} (random {}), written to {}",
        s.clips,
        s.succeeded,
        s.failed,
        s.mean_feature_distortion
            .map_or("-".into(), |v| format!("{v:.3}")),
        s.mean_random_feature_distortion
            .map_or("-".into(), |v| format!("{v:.3}")),
        args.out_dir.display()
    );
    Ok(())
}

pub fn stream(cli: &Cli, args: &StreamArgs) -> CmdResult {
    let (file, attack) = load_attack(cli, &args.attack, None)?;
    let profile = merge_profile(
        &file.profile,
        args.profile.as_deref(),
        args.budget_ms,
        args.chunk_ms,
    )
    .usage()?;
    let input = read_input(&args.input)?;
    file.mfcc.validate(input.sample_rate()).usage()?;
    let engine = AdversarialEngine::new(file.mfcc.clone(), input.sample_rate()).usage()?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.output.with_extension("csv"));

    let cost = if args.simulate_clock {
        CostModel {
            fixed_ms: args.fixed_ms.unwrap_or(CostModel::PHONE.fixed_ms),
            per_iter_ms: args.per_iter_ms.unwrap_or(CostModel::PHONE.per_iter_ms),
        }
    } else {
        let measured =
            calibrate(&engine, &attack, profile.chunk_ms, 5, 3, cli.seed).processing()?;
        CostModel {
            fixed_ms: args.fixed_ms.unwrap_or(measured.fixed_ms),
            per_iter_ms: args.per_iter_ms.unwrap_or(measured.per_iter_ms),
        }
    };
    if !cost.per_iter_ms.is_finite() || cost.per_iter_ms <= 0.0 || cost.fixed_ms < 0.0 {
        return Err(Failure::Usage(anyhow!(
            "per_iter_ms must be > 0 and fixed_ms >= 0"
        )));
    }
    log(
        cli,
        format!(
            "stream: profile {} budget {} ms, cost {:.1} + {:.2}/iter ms",
            profile.name, profile.budget_ms, cost.fixed_ms, cost.per_iter_ms
        ),
    );

    let chunks = split_chunks(&input, profile.chunk_ms);
    let config = StreamConfig {
        pacing: if args.live {
            Pacing::Live
        } else {
            Pacing::Pull
        },
        max_iterations: args.max_iterations,
        mask: attack.use_masking.then(|| file.mask.clone()),
        ..StreamConfig::new(profile, cost)
    };
    let result = if args.simulate_clock {
        process_stream(
            &engine,
            &chunks,
            &attack,
            &config,
            &mut SimulatedClock::new(cost),
        )
    } else {
        process_stream(&engine, &chunks, &attack, &config, &mut WallClock)
    };
    let (output, failure) = match result {
        Ok(o) => (o, None),
        Err(StreamAbort { error, partial }) => (partial, Some(error)),
    };

    let csv = decisions_csv(&output.decisions).processing()?;
    std::fs::write(&log_path, csv)
        .with_context(|| format!("writing {}", log_path.display()))
        .processing()?;
    if let Some(e) = failure {
        return Err(Failure::Processing(
            anyhow!(e).context("stream aborted; decision log kept"),
        ));
    }
    if let Some(joined) = concat(&output.chunks) {
        write_wav(&joined, &args.output).processing()?;
    }
    let flagged = output.decisions.iter().filter(|d| d.flagged).count();
    println!(
        "{} chunks, {} flagged; log {}",
        output.decisions.len(),
        flagged,
        log_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    iterations: usize,
    median_ms: f64,
    marginal_ms: f64,
    fixed_ms: f64,
    per_iter_ms: f64,
}

pub fn bench(cli: &Cli, args: &BenchArgs) -> CmdResult {
    if args.iterations.is_empty() || args.iterations.contains(&0) {
        return Err(Failure::Usage(anyhow!(
            "attack.iterations: every bench configuration needs >= 1 iteration"
        )));
    }
    let flags = AttackArgs {
        no_mask: args.no_mask,
        ..AttackArgs::default()
    };
    let (file, attack) = load_attack(cli, &flags, None)?;
    let rate = mfccnoise::audio::CANONICAL_SAMPLE_RATE;
    file.mfcc.validate(rate).usage()?;
    let engine = AdversarialEngine::new(file.mfcc.clone(), rate).usage()?;
    let chunk = speech_like(args.chunk_ms, rate, cli.seed);
    let mask = attack.use_masking.then(|| file.mask.clone());

    let time = |k: usize| -> Result<f64, Failure> {
        let mut runs = Vec::with_capacity(args.reps.max(1));
        for _ in 0..args.reps.max(1) {
            let t0 = Instant::now();
            mfccnoise::scheduler::perturb_chunk(&engine, &chunk, &attack, k, mask.as_ref())
                .processing()?;
            runs.push(ms_since(t0));
        }
        runs.sort_by(f64::total_cmp);
        Ok(runs[runs.len() / 2])
    };
    // warm-up, excluded from every figure
    time(1)?;

    let mut points = vec![(1usize, time(1)?)];
    for &k in &args.iterations {
        points.push((k, time(k)?));
    }
    let (fixed_ms, per_iter_ms) = fit_line(&points);
    let rows: Vec<BenchRow> = points[1..]
        .iter()
        .map(|&(k, median_ms)| BenchRow {
            iterations: k,
            median_ms,
            marginal_ms: median_ms - fixed_ms,
            fixed_ms,
            per_iter_ms,
        })
        .collect();

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if args.csv {
        let mut w = csv::Writer::from_writer(out);
        for r in &rows {
            w.serialize(r).processing()?;
        }
        w.flush().processing()?;
    } else {
        writeln!(
            out,
            "chunk {} ms, masking {}",
            args.chunk_ms, attack.use_masking
        )
        .processing()?;
        writeln!(
            out,
            "fixed {fixed_ms:.2} ms, per iteration {per_iter_ms:.3} ms"
        )
        .processing()?;
        writeln!(
            out,
            "{:>10} {:>12} {:>12}",
            "iterations", "median_ms", "marginal_ms"
        )
        .processing()?;
        for r in &rows {
            writeln!(
                out,
                "{:>10} {:>12.3} {:>12.3}",
                r.iterations, r.median_ms, r.marginal_ms
            )
            .processing()?;
        }
    }
    Ok(())
}

/// Least-squares intercept and slope of `ms` against iterations.
fn fit_line(points: &[(usize, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 {
        (sxy / sxx).max(1e-9)
    } else {
        my.max(1e-9)
    };
    (my - slope * mx, slope)
}

pub fn mfcc(cli: &Cli, args: &MfccArgs) -> CmdResult {
    let file = FileConfig::load(cli.config.as_deref()).usage()?;
    let input = read_input(&args.input)?;
    file.mfcc.validate(input.sample_rate()).usage()?;
    let pipe = mfccnoise::MfccPipeline::new(file.mfcc.clone(), input.sample_rate()).usage()?;
    let trace = pipe.trace(input.samples()).usage()?;
    if let Some(dir) = &cli.dump_dir {
        dump::write_trace(dir, "", &trace).processing()?;
    }
    let rows = trace.cepstrum.0.rows().into_iter().map(|r| r.to_vec());
    match &args.out {
        Some(path) => dump::write_matrix(path, rows).processing()?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for r in rows {
                w.write_record(r.iter().map(|v| v.to_string()))
                    .processing()?;
            }
            w.flush().processing()?;
        }
    }
    log(cli, format!("mfcc: {} frames", trace.cepstrum.n_frames()));
    Ok(())
}
