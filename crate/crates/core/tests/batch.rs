//! End-to-end batch runs over WAV files on disk.

use std::collections::HashMap;
use std::path::Path;

use mfccnoise::eval::{
    read_manifest, run_batch, BatchConfig, ClipSpec, StubProvider, TranscriptionProvider,
};
use mfccnoise::synth::speech_like;
use mfccnoise::{write_wav, AttackConfig};

fn write_clips(dir: &Path, n: u64) -> Vec<ClipSpec> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("clip{i}.wav"));
            write_wav(&speech_like(800.0, 16_000, 400 + i), &path).unwrap();
            ClipSpec {
                clip_id: format!("clip{i}"),
                wav_path: path,
                reference_text: "what's your name he asked".into(),
            }
        })
        .collect()
}

#[test]
fn adversarial_beats_matched_random_over_twenty_clips() {
    let dir = tempfile::tempdir().unwrap();
    let clips = write_clips(dir.path(), 20);
    let out = run_batch(&clips, &BatchConfig::default(), None).unwrap();
    assert_eq!(out.summary.succeeded, 20);
    let adv = out.summary.mean_feature_distortion.unwrap();
    let random = out.summary.mean_random_feature_distortion.unwrap();
    assert!(adv > random, "adv {adv} random {random}");
    for r in &out.reports {
        assert!((r.random_snr_db.unwrap() - r.noise_snr_db.unwrap()).abs() <= 0.1);
        assert!(r.wer_clean.is_none());
    }
    assert_eq!(out.curves.len(), 10);
    assert!(out
        .curves
        .windows(2)
        .all(|w| w[1].mean_cost >= w[0].mean_cost));
}

#[test]
fn stub_batch_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clips = write_clips(dir.path(), 10);
    let mut manifest = String::from("clip_id,wav_path,reference_text\n");
    let mut mapping = HashMap::new();
    for c in &clips {
        manifest.push_str(&format!(
            "{},{},{}\n",
            c.clip_id,
            c.wav_path.file_name().unwrap().to_string_lossy(),
            c.reference_text
        ));
        mapping.insert(c.clip_id.clone(), c.reference_text.clone());
        mapping.insert(
            format!("{}#adv", c.clip_id),
            "what's your fame he asked".to_string(),
        );
    }
    let manifest_path = dir.path().join("manifest.csv");
    std::fs::write(&manifest_path, manifest).unwrap();

    let parsed = read_manifest(&manifest_path).unwrap();
    assert_eq!(parsed, clips);
    let provider = TranscriptionProvider::Stub(StubProvider::new(mapping));
    let config = BatchConfig {
        attack: AttackConfig {
            iterations: 2,
            ..AttackConfig::default()
        },
        seed: 9,
        ..BatchConfig::default()
    };
    let out = run_batch(&parsed, &config, Some(&provider)).unwrap();
    let csv = out.aggregate_csv().unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(out.summary.mean_wer_clean, Some(0.0));
    assert!((out.summary.mean_wer_adv.unwrap() - 0.2).abs() < 1e-12);

    let out_dir = dir.path().join("out");
    out.write_to(&out_dir).unwrap();
    assert_eq!(
        std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap(),
        csv
    );
    assert_eq!(
        std::fs::read_dir(out_dir.join("reports")).unwrap().count(),
        10
    );
}
