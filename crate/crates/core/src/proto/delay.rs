use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measured Wi-Fi round trip used as the default link model.
pub const DEFAULT_RTT_MS: f64 = 12.054;
pub const DEFAULT_JITTER_MS: f64 = 0.302;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayConfig {
    pub enabled: bool,
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mean_ms: DEFAULT_RTT_MS,
            jitter_ms: DEFAULT_JITTER_MS,
        }
    }
}

/// Round-trip delay `N(mean, jitter^2)`, clamped at zero.
#[derive(Debug, Clone, Copy)]
pub struct DelayModel {
    normal: Option<Normal<f64>>,
    mean_ms: f64,
}

impl DelayModel {
    pub fn new(cfg: &DelayConfig) -> Result<Self> {
        if !(cfg.mean_ms >= 0.0 && cfg.jitter_ms >= 0.0) {
            return Err(Error::Config(
                "delay mean and jitter must be non-negative".into(),
            ));
        }
        let normal = if cfg.enabled && cfg.jitter_ms > 0.0 {
            Some(
                Normal::new(cfg.mean_ms, cfg.jitter_ms)
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            normal,
            mean_ms: if cfg.enabled { cfg.mean_ms } else { 0.0 },
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        let ms = match &self.normal {
            Some(n) => n.sample(rng).max(0.0),
            None => self.mean_ms,
        };
        Duration::from_secs_f64(ms / 1000.0)
    }
}
