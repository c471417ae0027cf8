//! Numeric CSV dumps of intermediate stages, one file per stage.

use std::path::Path;

use anyhow::Context;
use mfccnoise::mfcc::MfccTrace;

/// Writes one CSV row per item of `rows`.
pub fn write_matrix<R, I>(path: &Path, rows: R) -> anyhow::Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = f64>,
{
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.write_record(row.into_iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes each stage of `trace` as `<prefix><stage>.csv` under `dir`.
pub fn write_trace(dir: &Path, prefix: &str, trace: &MfccTrace) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let file = |stage: &str| dir.join(format!("{prefix}{stage}.csv"));
    write_matrix(
        &file("pre_emphasized"),
        trace.pre_emphasized.iter().map(|v| [*v]),
    )?;
    write_matrix(
        &file("frames"),
        trace.frames.frames.rows().into_iter().map(|r| r.to_vec()),
    )?;
    write_matrix(
        &file("windowed"),
        trace.windowed.frames.rows().into_iter().map(|r| r.to_vec()),
    )?;
    write_matrix(
        &file("power"),
        trace.power.0.rows().into_iter().map(|r| r.to_vec()),
    )?;
    write_matrix(
        &file("mel"),
        trace.mel.0.rows().into_iter().map(|r| r.to_vec()),
    )?;
    write_matrix(
        &file("cepstrum"),
        trace.cepstrum.0.rows().into_iter().map(|r| r.to_vec()),
    )?;
    Ok(())
}
