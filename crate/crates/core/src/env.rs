//! Toy linear control tasks.
//!
//! Three fixtures with different action dimension and difficulty:
//! `reach-2d` (planar point mass, tight radius), `reach-7d` (seven-dimensional
//! action, looser radius, longer horizon) and `swarm-2d` (four planar agents
//! driven by one shared policy, success when every agent is inside its radius).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Observation;
use crate::quantizer::{chi_mean, norm, QuantizerConfig};
use crate::rng::{self, Stream};

pub const FIXTURES: [&str; 3] = ["reach-2d", "reach-7d", "swarm-2d"];

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub process_noise: f64,
    /// Radius on the full state error; each of the `agents` blocks must be
    /// within `success_radius / sqrt(agents)`.
    pub success_radius: f64,
    pub horizon: usize,
    pub expert_gain: DMatrix<f64>,
    pub agents: usize,
    /// Per-coordinate std of the initial state.
    pub init_std: f64,
    /// Per-coordinate std of the goal.
    pub goal_std: f64,
    pub quantizer: QuantizerConfig,
}

/// Optional per-run overrides of a fixture, as read from the run config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    pub process_noise: Option<f64>,
    pub success_radius: Option<f64>,
    pub horizon: Option<usize>,
    pub expert_gain: Option<f64>,
    pub init_std: Option<f64>,
    pub goal_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub success: bool,
    pub expert_action: Vec<f64>,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

impl EnvSpec {
    pub fn fixture(name: &str) -> Result<Self> {
        let spec = match name {
            "reach-2d" => {
                Self::reach(name, 2, 1, 0.08, 45, 0.3, 1.0, 0.5).with_codes(32, 1.5, 0.1667)
            }
            "reach-7d" => {
                Self::reach(name, 7, 1, 0.25, 45, 0.3, 0.5, 0.25).with_codes(16, 2.5, 0.1)
            }
            "swarm-2d" => Self::reach(name, 8, 4, 0.24, 50, 0.5, 1.0, 0.3),
            other => {
                return Err(Error::Config(format!(
                    "unknown environment `{other}`; expected one of {FIXTURES:?}"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    #[allow(clippy::too_many_arguments)]
    fn reach(
        name: &str,
        dim: usize,
        agents: usize,
        success_radius: f64,
        horizon: usize,
        gain: f64,
        init_std: f64,
        goal_std: f64,
    ) -> Self {
        let b = DMatrix::identity(dim, dim);
        Self {
            name: name.to_string(),
            state_dim: dim,
            action_dim: dim,
            goal_dim: dim,
            a: DMatrix::identity(dim, dim),
            process_noise: 0.01 * spectral_norm(&b),
            b,
            success_radius,
            horizon,
            expert_gain: DMatrix::identity(dim, dim) * gain,
            agents,
            init_std,
            goal_std,
            quantizer: QuantizerConfig {
                n: 2,
                k: 16,
                latent_dim: dim,
                action_dim: dim,
                scale: 4.0,
                decay: 0.5,
                decoder_scale: 0.25,
                decoder_noise: 0.1,
                include_zero: true,
            },
        }
    }

    /// Codebook size, primary entry norm and decoder gain of the fixture's quantizer.
    fn with_codes(mut self, k: usize, scale: f64, decoder_scale: f64) -> Self {
        self.quantizer.k = k;
        self.quantizer.scale = scale;
        self.quantizer.decoder_scale = decoder_scale;
        self
    }

    pub fn apply(mut self, o: &EnvOverrides) -> Result<Self> {
        if let Some(v) = o.process_noise {
            self.process_noise = v;
        }
        if let Some(v) = o.success_radius {
            self.success_radius = v;
        }
        if let Some(v) = o.horizon {
            self.horizon = v;
        }
        if let Some(v) = o.expert_gain {
            self.expert_gain = DMatrix::identity(self.action_dim, self.state_dim) * v;
        }
        if let Some(v) = o.init_std {
            self.init_std = v;
        }
        if let Some(v) = o.goal_std {
            self.goal_std = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) || self.horizon < 1 {
            return Err(Error::Config(
                "env needs success_radius > 0 and horizon >= 1".into(),
            ));
        }
        if self.a.shape() != (self.state_dim, self.state_dim)
            || self.b.shape() != (self.state_dim, self.action_dim)
            || self.expert_gain.shape() != (self.action_dim, self.state_dim)
            || self.goal_dim != self.state_dim
        {
            return Err(Error::Config(format!(
                "env `{}` has inconsistent dimensions",
                self.name
            )));
        }
        if self.agents == 0 || self.state_dim % self.agents != 0 {
            return Err(Error::Config(
                "state dimension must split evenly across agents".into(),
            ));
        }
        let radius = self
            .a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if radius > 1.05 {
            return Err(Error::Config(format!(
                "spectral radius of A is {radius:.3} > 1.05"
            )));
        }
        if self.process_noise < 0.0 || self.init_std < 0.0 || self.goal_std < 0.0 {
            return Err(Error::Config(
                "noise and spread parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn agent_radius(&self) -> f64 {
        self.success_radius / (self.agents as f64).sqrt()
    }

    /// Every agent block of `state - goal` is strictly inside the agent radius.
    pub fn is_success(&self, state: &[f64], goal: &[f64]) -> bool {
        let per = self.state_dim / self.agents;
        let r = self.agent_radius();
        let err: Vec<f64> = state.iter().zip(goal).map(|(s, g)| s - g).collect();
        err.chunks(per).all(|block| norm(block) < r)
    }

    pub fn expert_action(&self, o: &Observation) -> Vec<f64> {
        let e = DVector::from_vec(o.error());
        (&self.expert_gain * e).iter().copied().collect()
    }

    /// Initial state and goal, both Gaussian around the origin.
    pub fn reset(&self, seed: u64) -> Observation {
        let mut rng = rng::stream(seed, Stream::EnvReset, &[]);
        let mut draw = |std: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let state = draw(self.init_std, self.state_dim);
        let goal = draw(self.goal_std, self.goal_dim);
        Observation {
            state,
            goal,
            step: 0,
        }
    }

    /// Analytic mean of `||state - goal||` right after reset.
    pub fn mean_initial_distance(&self) -> f64 {
        let std = (self.init_std.powi(2) + self.goal_std.powi(2)).sqrt();
        std * chi_mean(self.state_dim)
    }

    /// `A s + B a + noise`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        o: &Observation,
        action: &[f64],
        rng: &mut R,
    ) -> Result<StepResult> {
        if action.len() != self.action_dim || o.state.len() != self.state_dim {
            return Err(Error::contract(format!(
                "step expects state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                o.state.len(),
                action.len()
            )));
        }
        let s = DVector::from_column_slice(&o.state);
        let a = DVector::from_column_slice(action);
        let mut next = &self.a * s + &self.b * a;
        if self.process_noise > 0.0 {
            for x in next.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *x += self.process_noise * g;
            }
        }
        let next_state: Vec<f64> = next.iter().copied().collect();
        Ok(StepResult {
            success: self.is_success(&next_state, &o.goal),
            expert_action: self.expert_action(o),
            next_state,
        })
    }
}
