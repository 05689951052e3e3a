//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid config for the `reach-2d` fixture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::CalibrationSettings;
use crate::env::{EnvOverrides, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::HeadConfig;
use crate::proto::ClientConfig;
use crate::quantizer::QuantizerConfig;
use crate::specsamp::AdjustRule;

pub const DEFAULT_EPISODES: usize = 200;
pub const DEFAULT_ALPHA: f64 = 0.3;
/// Corpus size for `calibrate`. Bins at the high-deviation end stay monotone
/// on all fixtures at this size; 50,000 is the floor.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub episodes: usize,
    pub env: String,
    pub env_overrides: EnvOverrides,
    /// Replaces the fixture's quantizer settings when present.
    pub quantizer: Option<QuantizerConfig>,
    #[serde(default = "HeadConfig::default_draft", deserialize_with = "draft_head")]
    pub draft: HeadConfig,
    #[serde(
        default = "HeadConfig::default_target",
        deserialize_with = "target_head"
    )]
    pub target: HeadConfig,
    pub gate: GateConfig,
    pub calibration: CalibrationConfig,
    pub transport: TransportConfig,
    pub latency: LatencyConfig,
    pub adjust_rule: AdjustRule,
    /// Shadow-verify skipped steps so TSR can be reported.
    pub shadow: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            episodes: DEFAULT_EPISODES,
            env: "reach-2d".into(),
            env_overrides: EnvOverrides::default(),
            quantizer: None,
            draft: HeadConfig::default_draft(),
            target: HeadConfig::default_target(),
            gate: GateConfig::default(),
            calibration: CalibrationConfig::default(),
            transport: TransportConfig::default(),
            latency: LatencyConfig::default(),
            adjust_rule: AdjustRule::Residual,
            shadow: true,
        }
    }
}

/// A head section as written; missing keys fall back to that role's defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadSection {
    gain: Option<f64>,
    temperature: Option<f64>,
    gain_noise: Option<f64>,
    offset_scale: Option<f64>,
}

impl HeadSection {
    fn over(self, base: HeadConfig) -> HeadConfig {
        HeadConfig {
            gain: self.gain.unwrap_or(base.gain),
            temperature: self.temperature.unwrap_or(base.temperature),
            gain_noise: self.gain_noise.unwrap_or(base.gain_noise),
            offset_scale: self.offset_scale.unwrap_or(base.offset_scale),
        }
    }
}

fn draft_head<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<HeadConfig, D::Error> {
    Ok(HeadSection::deserialize(d)?.over(HeadConfig::default_draft()))
}

fn target_head<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<HeadConfig, D::Error> {
    Ok(HeadSection::deserialize(d)?.over(HeadConfig::default_target()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub alpha: f64,
    /// Add the draft offset on the local path too. When off, locally executed
    /// actions are the plain decoded codes.
    pub local_offset: bool,
    /// Overrides the artifact's threshold when set.
    pub threshold: Option<f64>,
    /// Calibration artifact used by `adahi` runs.
    pub artifact: Option<String>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            local_offset: true,
            threshold: None,
            artifact: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub min_samples: usize,
    pub target_tr: f64,
    /// Episodes run per collection round until `min_samples` is reached.
    pub episodes_per_round: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let s = CalibrationSettings::default();
        Self {
            bins: s.bins,
            min_samples: DEFAULT_CALIBRATION_SAMPLES,
            target_tr: s.target_tr,
            episodes_per_round: 500,
        }
    }
}

impl CalibrationConfig {
    pub fn settings(&self) -> CalibrationSettings {
        CalibrationSettings {
            bins: self.bins,
            min_samples: self.min_samples,
            target_tr: self.target_tr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// In-process server with virtual, seeded network delay.
    #[default]
    Simulated,
    /// Real HTTP to `client.endpoint`.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub client: ClientConfig,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: TransportKind::Simulated,
            client: ClientConfig::default(),
        }
    }
}

/// Nominal compute times. Network time comes from the transport.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub draft_compute_ms: f64,
    pub server_compute_ms: f64,
    /// Target head run locally (`target_only`).
    pub target_compute_ms: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            draft_compute_ms: 0.8,
            server_compute_ms: 28.0,
            target_compute_ms: 28.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if !(self.gate.alpha > 0.0 && self.gate.alpha <= 1.0) {
            return Err(Error::Config("gate.alpha must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("draft_compute_ms", self.latency.draft_compute_ms),
            ("server_compute_ms", self.latency.server_compute_ms),
            ("target_compute_ms", self.latency.target_compute_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "latency.{name} must be non-negative"
                )));
            }
        }
        if self.calibration.episodes_per_round == 0 {
            return Err(Error::Config(
                "calibration.episodes_per_round must be at least 1".into(),
            ));
        }
        self.env_spec()?;
        Ok(())
    }

    /// Fixture with overrides and quantizer replacement applied.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvSpec::fixture(&self.env)?.apply(&self.env_overrides)?;
        if let Some(q) = &self.quantizer {
            if q.action_dim != spec.action_dim {
                return Err(Error::Config(format!(
                    "quantizer.action_dim {} does not match env action dimension {}",
                    q.action_dim, spec.action_dim
                )));
            }
            spec.quantizer = q.clone();
        }
        spec.quantizer.validate()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the resolved config in TOML form.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
