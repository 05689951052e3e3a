//! Device-side action-deviation gate.
//!
//! The gate keeps an exponential moving average of executed actions. For a new
//! draft action it reports the normalized deviation `||a - ema|| / sigma` and
//! transmits the draft for verification only when that deviation exceeds the
//! calibrated threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    Linear,
    Logarithmic,
}

impl std::fmt::Display for ModelForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelForm::Linear => "linear",
            ModelForm::Logarithmic => "logarithmic",
        })
    }
}

impl std::str::FromStr for ModelForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelForm::Linear),
            "logarithmic" => Ok(ModelForm::Logarithmic),
            other => Err(Error::Config(format!(
                "unknown rejection model form `{other}`"
            ))),
        }
    }
}

/// Maps action deviation to the primary codebook's rejection probability:
/// `m * delta + b` or `m * ln(1 + kappa * delta) + b`, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionModel {
    pub form: ModelForm,
    pub m: f64,
    pub b: f64,
    /// Only meaningful for the logarithmic form; 0 for linear models.
    pub kappa: f64,
}

impl RejectionModel {
    pub fn linear(m: f64, b: f64) -> Self {
        Self {
            form: ModelForm::Linear,
            m,
            b,
            kappa: 0.0,
        }
    }

    pub fn logarithmic(m: f64, kappa: f64, b: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "logarithmic model needs kappa > 0, got {kappa}"
            )));
        }
        Ok(Self {
            form: ModelForm::Logarithmic,
            m,
            b,
            kappa,
        })
    }

    /// The regressor the model is linear in.
    pub fn feature(&self, delta: f64) -> f64 {
        match self.form {
            ModelForm::Linear => delta,
            ModelForm::Logarithmic => (self.kappa * delta).ln_1p(),
        }
    }

    pub fn predict_unclamped(&self, delta: f64) -> f64 {
        self.m * self.feature(delta) + self.b
    }

    pub fn predict(&self, delta: f64) -> f64 {
        self.predict_unclamped(delta).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationGate {
    ema: Option<Vec<f64>>,
    alpha: f64,
    sigma: Option<f64>,
    threshold: f64,
    model: Option<RejectionModel>,
}

impl DeviationGate {
    /// A gate with no deviation scale yet; used while collecting the corpus
    /// from which sigma is computed.
    pub fn uncalibrated(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            ema: None,
            alpha,
            sigma: None,
            threshold: f64::INFINITY,
            model: None,
        })
    }

    pub fn new(alpha: f64, sigma: f64, threshold: f64) -> Result<Self> {
        let mut g = Self::uncalibrated(alpha)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::Config(format!(
                "threshold must be non-negative, got {threshold}"
            )));
        }
        g.sigma = Some(sigma);
        g.threshold = threshold;
        Ok(g)
    }

    pub fn with_model(mut self, model: RejectionModel) -> Self {
        self.model = Some(model);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    pub fn model(&self) -> Option<&RejectionModel> {
        self.model.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.ema.is_some()
    }

    pub fn ema(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    /// Forgets the action history (new episode).
    pub fn reset(&mut self) {
        self.ema = None;
    }

    /// Folds the previously executed action into the average. The first call
    /// of an episode copies the action verbatim.
    pub fn update_ema(&mut self, prev_action: &[f64]) -> Result<()> {
        match &mut self.ema {
            None => self.ema = Some(prev_action.to_vec()),
            Some(ema) => {
                if ema.len() != prev_action.len() {
                    return Err(Error::contract(format!(
                        "action has dimension {}, average has {}",
                        prev_action.len(),
                        ema.len()
                    )));
                }
                for (e, a) in ema.iter_mut().zip(prev_action) {
                    *e = (1.0 - self.alpha) * *e + self.alpha * a;
                }
            }
        }
        Ok(())
    }

    /// Un-normalized deviation `||a - ema||`.
    pub fn net_deviation(&self, a: &[f64]) -> Result<f64> {
        let ema = self
            .ema
            .as_ref()
            .ok_or_else(|| Error::contract("deviation is undefined before the first action"))?;
        if ema.len() != a.len() {
            return Err(Error::contract(format!(
                "action has dimension {}, average has {}",
                a.len(),
                ema.len()
            )));
        }
        let diff: Vec<f64> = a.iter().zip(ema).map(|(x, y)| x - y).collect();
        Ok(norm(&diff))
    }

    pub fn deviation(&self, a: &[f64]) -> Result<f64> {
        let net = self.net_deviation(a)?;
        let sigma = self.sigma.ok_or_else(|| {
            Error::Config("deviation scale sigma is not set; run calibration".into())
        })?;
        Ok(net / sigma)
    }

    /// Strictly above the threshold transmits; equal executes locally.
    pub fn should_transmit(&self, delta: f64) -> bool {
        delta > self.threshold
    }
}

pub fn predict_rejection(model: &RejectionModel, delta: f64) -> f64 {
    model.predict(delta)
}
