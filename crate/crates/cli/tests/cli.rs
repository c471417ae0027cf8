//! Runs the `mfccnoise` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfccnoise::synth::speech_like;
use mfccnoise::{read_wav, write_wav, AudioBuffer};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfccnoise"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn speech_file(dir: &Path, name: &str, ms: f64, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_wav(&speech_like(ms, 16_000, seed), &path).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_iterations_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "in.wav", 300.0, 1);
    let o = run(&[
        "perturb",
        s(&input),
        s(&dir.path().join("out.wav")),
        "--iterations",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("attack.iterations") && err.contains(">= 1"),
        "{err}"
    );
}

#[test]
fn missing_input_and_bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "perturb",
        s(&dir.path().join("nope.wav")),
        s(&dir.path().join("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let input = speech_file(dir.path(), "in.wav", 300.0, 1);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[attack]\nbogus = 1\n").unwrap();
    let o = run(&[
        "--config",
        s(&cfg),
        "perturb",
        s(&input),
        s(&dir.path().join("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&cfg, "[mask]\nin_band_gain = 2.0\n").unwrap();
    let o = run(&[
        "--config",
        s(&cfg),
        "perturb",
        s(&input),
        s(&dir.path().join("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mask.in_band_gain"));
}

#[test]
fn silence_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("silence.wav");
    write_wav(&AudioBuffer::new(vec![0.0; 8000], 16_000).unwrap(), &input).unwrap();
    let output = dir.path().join("out.wav");
    let o = run(&["perturb", s(&input), s(&output)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(&output).unwrap(), read_wav(&input).unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(output.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(report["noise_peak"], 0.0);
}

#[test]
fn trace_has_one_row_per_iteration_and_flags_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 500.0, 2);
    let trace = dir.path().join("trace.csv");
    let out = dir.path().join("out.wav");

    let o = run(&[
        "perturb",
        s(&input),
        s(&out),
        "--iterations",
        "4",
        "--trace",
        s(&trace),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&trace).len(), 4);

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[attack]\niterations = 3\n").unwrap();
    let o = run(&[
        "--config",
        s(&cfg),
        "perturb",
        s(&input),
        s(&out),
        "--trace",
        s(&trace),
    ]);
    assert!(o.status.success());
    assert_eq!(csv_rows(&trace).len(), 3);
    let o = run(&[
        "--config",
        s(&cfg),
        "perturb",
        s(&input),
        s(&out),
        "--trace",
        s(&trace),
        "--iterations",
        "2",
    ]);
    assert!(o.status.success());
    assert_eq!(csv_rows(&trace).len(), 2);

    let x = read_wav(&input).unwrap();
    let y = read_wav(&out).unwrap();
    let peak = x
        .samples()
        .iter()
        .zip(y.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(peak > 0.0 && peak <= 0.05 + 1.0 / 32768.0);
}

#[test]
fn perturb_is_deterministic_and_dumps_stages() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 400.0, 3);
    let dump = dir.path().join("dump");
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    assert!(run(&[
        "--dump-dir",
        s(&dump),
        "perturb",
        s(&input),
        s(&a),
        "--iterations",
        "2"
    ])
    .status
    .success());
    assert!(run(&["perturb", s(&input), s(&b), "--iterations", "2"])
        .status
        .success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for f in [
        "clean_cepstrum.csv",
        "adversarial_power.csv",
        "gains.csv",
        "noise.csv",
    ] {
        assert!(dump.join(f).exists(), "{f}");
    }
}

#[test]
fn env_noise_over_limit_is_a_processing_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 300.0, 4);
    let env = dir.path().join("env.wav");
    // rms 0.5 is about 88 dB on the mapped scale
    write_wav(
        &AudioBuffer::new(
            (0..4800)
                .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 })
                .collect(),
            16_000,
        )
        .unwrap(),
        &env,
    )
    .unwrap();
    let o = run(&[
        "perturb",
        s(&input),
        s(&dir.path().join("o.wav")),
        "--env-wav",
        s(&env),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("81"));
}

fn write_manifest(dir: &Path, rows: &[(String, String)]) -> PathBuf {
    let path = dir.join("manifest.csv");
    let mut text = String::from("clip_id,wav_path,reference_text\n");
    for (id, wav) in rows {
        text.push_str(&format!("{id},{wav},hello there\n"));
    }
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn eval_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[]);
    let out = dir.path().join("out");
    let o = run(&["eval", s(&manifest), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(csv_rows(&out.join("aggregate.csv")).is_empty());
}

#[test]
fn eval_records_bad_path_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    speech_file(dir.path(), "good.wav", 400.0, 5);
    let manifest = write_manifest(
        dir.path(),
        &[
            ("good".into(), "good.wav".into()),
            ("bad".into(), "missing.wav".into()),
        ],
    );
    let out = dir.path().join("out");
    let o = run(&[
        "eval",
        s(&manifest),
        "--out-dir",
        s(&out),
        "--iterations",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.join("aggregate.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(
        (
            rows[0][1].as_str(),
            rows[1][1].as_str(),
            rows[1][2].as_str()
        ),
        ("ok", "error", "IoFailure")
    );
}

#[test]
fn eval_stub_ten_clips_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    let mut map = serde_json::Map::new();
    for i in 0..10 {
        speech_file(dir.path(), &format!("c{i}.wav"), 300.0, 10 + i);
        rows.push((format!("c{i}"), format!("c{i}.wav")));
        map.insert(format!("c{i}"), "hello there".into());
        map.insert(format!("c{i}#adv"), "yellow there".into());
    }
    let manifest = write_manifest(dir.path(), &rows);
    let stub = dir.path().join("stub.json");
    std::fs::write(&stub, serde_json::Value::Object(map).to_string()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "--seed",
            "3",
            "eval",
            s(&manifest),
            "--out-dir",
            s(out),
            "--iterations",
            "2",
            "--provider",
            "stub",
            "--stub-map",
            s(&stub),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let agg = csv_rows(&a.join("aggregate.csv"));
    assert_eq!(agg.len(), 10);
    assert!(agg.iter().all(|r| r[12] == "0.5"));
    assert_eq!(
        std::fs::read(a.join("aggregate.csv")).unwrap(),
        std::fs::read(b.join("aggregate.csv")).unwrap()
    );
    assert_eq!(std::fs::read_dir(a.join("reports")).unwrap().count(), 10);
}

fn stream_log(dir: &Path, input: &Path, extra: &[&str]) -> Vec<Vec<String>> {
    let out = dir.join("stream.wav");
    let log = dir.join("log.csv");
    let mut args = vec![
        "stream",
        s(input),
        s(&out),
        "--simulate-clock",
        "--log",
        s(&log),
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read_wav(&out).unwrap().len(),
        read_wav(input).unwrap().len()
    );
    csv_rows(&log)
}

#[test]
fn stream_profiles_and_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 1000.0, 6);

    let tel = stream_log(dir.path(), &input, &["--profile", "telephone"]);
    assert_eq!(tel.len(), 5);
    assert!(tel.iter().all(|r| r[1] == "3" && r[3] == "false"));

    let msg = stream_log(dir.path(), &input, &["--profile", "messaging"]);
    assert!(tel
        .iter()
        .zip(&msg)
        .all(|(t, m)| m[1].parse::<usize>().unwrap() >= t[1].parse::<usize>().unwrap()));

    let tight = stream_log(dir.path(), &input, &["--budget-ms", "1"]);
    assert_eq!(tight.len(), 5);
    assert!(tight.iter().all(|r| r[3] == "true" && r[1] == "1"));
}

#[test]
fn stream_unknown_profile_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 400.0, 7);
    let o = run(&[
        "stream",
        s(&input),
        s(&dir.path().join("o.wav")),
        "--profile",
        "radio",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_csv_shape_and_scaling() {
    let o = run(&["bench", "--csv", "--iterations", "5,10", "--reps", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "iterations",
            "median_ms",
            "marginal_ms",
            "fixed_ms",
            "per_iter_ms"
        ]
    );
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|x| x.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0][4] > 0.0);
    let ratio = rows[1][2] / rows[0][2];
    assert!((1.5..=2.5).contains(&ratio), "marginal ratio {ratio}");
}

#[test]
fn mfcc_prints_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let input = speech_file(dir.path(), "speech.wav", 1000.0, 8);
    let o = run(&["mfcc", s(&input)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 79);
    assert!(text.lines().all(|l| l.split(',').count() == 13));
}
