//! Draft and target code-predictor policies.
//!
//! Both heads share one structure: a linear feedback law produces an ideal
//! action, the ideal action is lifted into latent space and run through the
//! greedy residual recursion, and the logit of entry `k` at stage `l` is the
//! negative squared distance between the stage residual and that entry,
//! divided by the head's temperature. The draft differs from the target by a
//! fixed perturbation of its feedback gain and by a higher temperature.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{norm, sq_dist, CodeTuple, CodebookSet};
use crate::rng::{self, Stream};

/// Row-sum tolerance for bundles produced in-process.
pub const BUNDLE_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Draft,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
    pub step: u64,
}

impl Observation {
    pub fn error(&self) -> Vec<f64> {
        self.goal
            .iter()
            .zip(&self.state)
            .map(|(g, s)| g - s)
            .collect()
    }
}

/// Per-role policy knobs as they appear in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Multiplier on the environment's expert feedback gain.
    pub gain: f64,
    pub temperature: f64,
    /// Relative magnitude of the fixed random perturbation of the gain.
    pub gain_noise: f64,
    pub offset_scale: f64,
}

impl HeadConfig {
    pub fn default_draft() -> Self {
        Self {
            gain: 1.0,
            temperature: 2.0,
            gain_noise: 0.15,
            offset_scale: 1.0,
        }
    }

    pub fn default_target() -> Self {
        Self {
            gain: 1.0,
            temperature: 0.5,
            gain_noise: 0.0,
            offset_scale: 1.0,
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::default_target()
    }
}

#[derive(Debug, Clone)]
pub struct PolicyHead {
    role: Role,
    /// Effective feedback map, perturbation already applied.
    gain: DMatrix<f64>,
    temperature: f64,
    gain_noise: f64,
    offset_scale: f64,
}

impl PolicyHead {
    /// Builds a head from the environment's expert gain (`d x state_dim`).
    /// The gain perturbation is drawn from a stream keyed by `seed` and role.
    pub fn new(
        role: Role,
        expert_gain: &DMatrix<f64>,
        cfg: &HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "{role:?} temperature must be positive"
            )));
        }
        if !(cfg.gain_noise >= 0.0 && cfg.offset_scale >= 0.0 && cfg.gain.is_finite()) {
            return Err(Error::Config(format!(
                "{role:?} gain_noise and offset_scale must be non-negative"
            )));
        }
        let dim = expert_gain.ncols();
        let mut rng = rng::stream(seed, Stream::HeadPerturbation, &[role as u64]);
        let perturb = DMatrix::from_fn(dim, dim, |r, c| {
            let g: f64 = StandardNormal.sample(&mut rng);
            let eye = if r == c { 1.0 } else { 0.0 };
            eye + cfg.gain_noise * g / (dim as f64).sqrt()
        });
        Ok(Self {
            role,
            gain: cfg.gain * expert_gain * perturb,
            temperature: cfg.temperature,
            gain_noise: cfg.gain_noise,
            offset_scale: cfg.offset_scale,
        })
    }

    /// Head with an explicit effective gain and no perturbation.
    pub fn with_gain(
        role: Role,
        gain: DMatrix<f64>,
        temperature: f64,
        offset_scale: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(Self {
            role,
            gain,
            temperature,
            gain_noise: 0.0,
            offset_scale,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn gain_noise(&self) -> f64 {
        self.gain_noise
    }

    pub fn offset_scale(&self) -> f64 {
        self.offset_scale
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// `gain * (goal - state)`.
    pub fn ideal_action(&self, o: &Observation) -> Result<Vec<f64>> {
        if o.state.len() != o.goal.len() || o.state.len() != self.gain.ncols() {
            return Err(Error::contract(format!(
                "observation dims (state {}, goal {}) do not match policy gain ({} columns)",
                o.state.len(),
                o.goal.len(),
                self.gain.ncols()
            )));
        }
        let e = DVector::from_vec(o.error());
        Ok((&self.gain * e).iter().copied().collect())
    }

    /// Per-codebook logits, an `n x K` matrix.
    pub fn logits(&self, o: &Observation, cb: &CodebookSet) -> Result<Vec<Vec<f64>>> {
        let ideal = self.ideal_action(o)?;
        let latent = cb.lift(&ideal)?;
        let (_, trace) = cb.quantize_latent(&latent)?;
        Ok((0..cb.n())
            .map(|stage| {
                (0..cb.k())
                    .map(|k| -sq_dist(&trace[stage], cb.entry(stage, k)) / self.temperature)
                    .collect()
            })
            .collect())
    }

    /// What the discrete codes cannot express, scaled and clipped to `offset_scale`.
    pub fn offset(&self, o: &Observation, cb: &CodebookSet) -> Result<Vec<f64>> {
        let ideal = self.ideal_action(o)?;
        if self.offset_scale == 0.0 {
            return Ok(vec![0.0; ideal.len()]);
        }
        let quantized = cb.decode(&cb.encode_residual(&ideal)?)?;
        let mut off: Vec<f64> = ideal
            .iter()
            .zip(&quantized)
            .map(|(a, q)| self.offset_scale * (a - q))
            .collect();
        let len = norm(&off);
        if len > self.offset_scale {
            let shrink = self.offset_scale / len;
            off.iter_mut().for_each(|x| *x *= shrink);
        }
        Ok(off)
    }

    pub fn distribution(&self, o: &Observation, cb: &CodebookSet) -> Result<CategoricalBundle> {
        normalize(&self.logits(o, cb)?)
    }

    /// Logits, softmax, sampling, decoding and offset in one pass.
    pub fn act<R: Rng + ?Sized>(
        &self,
        o: &Observation,
        cb: &CodebookSet,
        rng: &mut R,
    ) -> Result<Act> {
        let bundle = self.distribution(o, cb)?;
        let codes = sample_codes(&bundle, rng)?;
        let decoded = cb.decode(&codes)?;
        let offset = self.offset(o, cb)?;
        let action = decoded.iter().zip(&offset).map(|(a, b)| a + b).collect();
        Ok(Act {
            action,
            decoded,
            offset,
            codes,
            bundle,
        })
    }
}

/// Everything one policy evaluation produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    /// Decoded action plus offset.
    pub action: Vec<f64>,
    /// Decoded action without offset.
    pub decoded: Vec<f64>,
    pub offset: Vec<f64>,
    pub codes: CodeTuple,
    pub bundle: CategoricalBundle,
}

/// One probability vector per codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoricalBundle {
    pub dists: Vec<Vec<f64>>,
}

impl CategoricalBundle {
    /// Wraps rows after checking they are valid distributions within `tol`.
    pub fn new(dists: Vec<Vec<f64>>, tol: f64) -> Result<Self> {
        let b = Self { dists };
        b.validate(tol)?;
        Ok(b)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let k = self.dists.first().map(Vec::len).unwrap_or(0);
        if self.dists.is_empty() || k == 0 {
            return Err(Error::contract(
                "bundle must have at least one non-empty row",
            ));
        }
        for (row, d) in self.dists.iter().enumerate() {
            if d.len() != k {
                return Err(Error::contract(format!(
                    "bundle row {row} has length {}, expected {k}",
                    d.len()
                )));
            }
            if d.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(Error::contract(format!(
                    "bundle row {row} has a negative or non-finite entry"
                )));
            }
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::contract(format!("bundle row {row} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.dists.len()
    }

    pub fn k(&self) -> usize {
        self.dists[0].len()
    }

    /// Shannon entropy (nats) of each row.
    pub fn entropies(&self) -> Vec<f64> {
        self.dists
            .iter()
            .map(|d| d.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
            .collect()
    }
}

/// Row-wise softmax with max subtraction.
pub fn normalize(logits: &[Vec<f64>]) -> Result<CategoricalBundle> {
    if logits.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let dists = logits
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect();
    CategoricalBundle::new(dists, BUNDLE_SUM_TOL)
}

/// Inverse-CDF draw from one distribution using a single uniform.
pub fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // u landed in the rounding gap above the accumulated sum
    dist.iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(dist.len() - 1)
}

/// One uniform draw per codebook, in codebook order.
pub fn sample_codes<R: Rng + ?Sized>(b: &CategoricalBundle, rng: &mut R) -> Result<CodeTuple> {
    b.validate(1e-6)?;
    Ok(CodeTuple(
        b.dists
            .iter()
            .map(|d| sample_index(d, rng.random::<f64>()))
            .collect(),
    ))
}
