//! Config file schema and flag merging.
//!
//! Precedence is flags over file over built-in defaults. Every section is
//! optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use mfccnoise::eval::ExternalConfig;
use mfccnoise::{AttackConfig, AttackMode, LatencyProfile, MaskParams, MfccConfig};
use serde::Deserialize;

/// `[attack]` table. Absent keys keep the library defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub iterations: Option<usize>,
    pub step_size: Option<f64>,
    pub t_adv_scale: Option<f64>,
    pub mode: Option<AttackMode>,
    pub use_masking: Option<bool>,
    pub env_wav: Option<PathBuf>,
}

/// `[profile]` table: a built-in name, optionally with overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub name: Option<String>,
    pub budget_ms: Option<f64>,
    pub chunk_ms: Option<f64>,
}

/// `[provider]` table.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: Option<String>,
    pub stub_map: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub token_env: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_concurrent: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub mfcc: MfccConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub mask: MaskParams,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub provider: ProviderSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.attack.env_wav, &mut cfg.provider.stub_map]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flag values that may override the `[attack]` table.
#[derive(Debug, Clone, Default)]
pub struct AttackFlags {
    pub iterations: Option<usize>,
    pub step_size: Option<f64>,
    pub t_adv: Option<f64>,
    pub mode: Option<AttackMode>,
    pub no_mask: bool,
    pub env_wav: Option<PathBuf>,
}

/// Merged attack settings; the env waveform path is resolved separately
/// because reading it is an I/O step.
pub fn merge_attack(file: &AttackSection, flags: &AttackFlags) -> (AttackConfig, Option<PathBuf>) {
    let d = AttackConfig::default();
    let cfg = AttackConfig {
        iterations: flags.iterations.or(file.iterations).unwrap_or(d.iterations),
        step_size: flags.step_size.or(file.step_size).unwrap_or(d.step_size),
        t_adv_scale: flags.t_adv.or(file.t_adv_scale).unwrap_or(d.t_adv_scale),
        mode: flags.mode.or(file.mode).unwrap_or(d.mode),
        use_masking: !flags.no_mask && file.use_masking.unwrap_or(d.use_masking),
        env_profile: None,
    };
    (cfg, flags.env_wav.clone().or_else(|| file.env_wav.clone()))
}

/// Built-in profile named by the flag or file (default telephone), with
/// budget and chunk overrides applied flag-first.
pub fn merge_profile(
    file: &ProfileSection,
    name: Option<&str>,
    budget_ms: Option<f64>,
    chunk_ms: Option<f64>,
) -> anyhow::Result<LatencyProfile> {
    let name = name.or(file.name.as_deref()).unwrap_or("telephone");
    let budget = budget_ms.or(file.budget_ms);
    let base = match LatencyProfile::builtin(name) {
        Some(p) => p,
        None if budget.is_some() => LatencyProfile::telephone(),
        None => anyhow::bail!(
            "profile.name: unknown profile {name:?} (expected telephone or messaging, or give --budget-ms)"
        ),
    };
    let profile = LatencyProfile {
        name: name.to_string(),
        budget_ms: budget.unwrap_or(base.budget_ms),
        chunk_ms: chunk_ms.or(file.chunk_ms).unwrap_or(base.chunk_ms),
    };
    profile.validate()?;
    Ok(profile)
}

/// External provider settings from the file, overridden by flags.
pub fn merge_external(
    file: &ProviderSection,
    endpoint: Option<String>,
    token_env: Option<String>,
    timeout_ms: Option<u64>,
) -> ExternalConfig {
    let d = ExternalConfig::default();
    ExternalConfig {
        endpoint: endpoint
            .or_else(|| file.endpoint.clone())
            .unwrap_or_default(),
        token_env: token_env.or_else(|| file.token_env.clone()),
        timeout_ms: timeout_ms.or(file.timeout_ms).unwrap_or(d.timeout_ms),
        max_concurrent: file.max_concurrent.unwrap_or(d.max_concurrent),
    }
}
