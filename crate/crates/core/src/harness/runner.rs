use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TransportKind};
use crate::calibrate::{calibrate_corpus, CalibrationArtifact, CalibrationCorpus, Provenance};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::gate::DeviationGate;
use crate::policy::{Observation, PolicyHead, Role};
use crate::proto::{
    HttpVerifier, ServerTiming, SimulatedLink, Verifier, VerifierService, VerifyRequest,
    DEFAULT_MAX_PAYLOAD_BYTES,
};
use crate::quantizer::{build_codebooks, CodebookSet};
use crate::rng::{self, derive_seed, Stream};
use crate::specsamp::verify_one;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DraftOnly,
    TargetOnly,
    Hybrid,
    /// Transmits each step with probability `tr`.
    Random {
        tr: f64,
    },
    Adahi,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::DraftOnly => "draft_only",
            Mode::TargetOnly => "target_only",
            Mode::Hybrid => "hybrid",
            Mode::Random { .. } => "random",
            Mode::Adahi => "adahi",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// `random` parses with `tr = 0`; callers fill in the matched rate.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "draft_only" => Mode::DraftOnly,
            "target_only" => Mode::TargetOnly,
            "hybrid" => Mode::Hybrid,
            "random" => Mode::Random { tr: 0.0 },
            "adahi" => Mode::Adahi,
            other => {
                return Err(Error::Config(format!(
                "unknown mode `{other}`; expected draft_only, target_only, hybrid, random or adahi"
            )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Normalized deviation; absent at the first step or without a calibrated sigma.
    pub delta: Option<f64>,
    /// Raw `||a - ema||`; absent at the first step.
    pub delta_net: Option<f64>,
    pub transmitted: bool,
    /// Present only on transmitted steps that got a reply.
    pub primary_rejected: Option<bool>,
    /// Present only on skipped steps of runs with shadow verification.
    pub shadow_would_reject: Option<bool>,
    pub fallback: bool,
    pub latency_micros: u64,
    pub action: Vec<f64>,
    pub expert_action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub mode: String,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn steps_used(&self) -> usize {
        self.steps.len()
    }

    pub fn latency_micros_total(&self) -> u64 {
        self.steps.iter().map(|s| s.latency_micros).sum()
    }
}

/// Environment, shared codebooks and both policy heads for one run config.
pub struct Harness {
    cfg: RunConfig,
    env: EnvSpec,
    codebooks: Arc<CodebookSet>,
    checksum: String,
    draft: PolicyHead,
    target: PolicyHead,
}

fn micros(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

impl Harness {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.env_spec()?;
        let codebooks = Arc::new(build_codebooks(&env.quantizer, cfg.seed)?);
        let draft = PolicyHead::new(Role::Draft, &env.expert_gain, &cfg.draft, cfg.seed)?;
        let target = PolicyHead::new(Role::Target, &env.expert_gain, &cfg.target, cfg.seed)?;
        Ok(Self {
            checksum: codebooks.checksum(),
            cfg,
            env,
            codebooks,
            draft,
            target,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn codebooks(&self) -> &CodebookSet {
        &self.codebooks
    }

    pub fn draft(&self) -> &PolicyHead {
        &self.draft
    }

    pub fn target(&self) -> &PolicyHead {
        &self.target
    }

    /// Server state matching this harness.
    pub fn service(&self, timing: ServerTiming) -> VerifierService {
        VerifierService::new(
            self.codebooks.clone(),
            self.target.clone(),
            self.cfg.adjust_rule,
            timing,
            self.cfg
                .transport
                .client
                .max_payload_bytes
                .max(DEFAULT_MAX_PAYLOAD_BYTES),
        )
    }

    /// In-process link with seeded virtual delay and fixed server compute.
    pub fn simulated_link(&self) -> Result<SimulatedLink> {
        let timing = ServerTiming::Fixed(micros(self.cfg.latency.server_compute_ms));
        SimulatedLink::new(
            self.service(timing),
            &self.cfg.transport.client.injected_delay,
            self.cfg.seed,
        )
    }

    /// The transport selected by the config.
    pub fn verifier(&self) -> Result<Box<dyn Verifier>> {
        Ok(match self.cfg.transport.kind {
            TransportKind::Simulated => Box::new(self.simulated_link()?),
            TransportKind::Http => Box::new(HttpVerifier::new(
                &self.cfg.transport.client,
                self.cfg.seed,
            )?),
        })
    }

    /// A gate for runs that only log deviations.
    pub fn logging_gate(&self) -> Result<DeviationGate> {
        DeviationGate::uncalibrated(self.cfg.gate.alpha)
    }

    /// The ADAHI gate described by a calibration artifact, with the config's
    /// threshold override applied.
    pub fn gate_from_artifact(&self, art: &CalibrationArtifact) -> Result<DeviationGate> {
        if art.codebook_checksum != self.checksum {
            return Err(Error::Artifact(format!(
                "calibration artifact was built for codebooks {}, this run uses {}; rerun `calibrate`",
                art.codebook_checksum, self.checksum
            )));
        }
        if art.env != self.env.name {
            return Err(Error::Artifact(format!(
                "calibration artifact is for env `{}`, this run uses `{}`",
                art.env, self.env.name
            )));
        }
        let threshold = self.cfg.gate.threshold.unwrap_or(art.delta_th);
        Ok(DeviationGate::new(self.cfg.gate.alpha, art.sigma, threshold)?.with_model(art.model()))
    }

    fn reset_seed(&self, episode: usize) -> u64 {
        derive_seed(self.cfg.seed, Stream::EnvReset, &[episode as u64])
    }

    /// One episode. `gate` is reset first; in `adahi` mode it decides
    /// transmission, otherwise it only tracks deviations for the log.
    pub fn run_episode(
        &self,
        mode: Mode,
        episode: usize,
        gate: &mut DeviationGate,
        verifier: &mut dyn Verifier,
    ) -> Result<EpisodeRecord> {
        let root = self.cfg.seed;
        let ep = episode as u64;
        let seed = self.reset_seed(episode);
        let cb = &*self.codebooks;
        let lat = &self.cfg.latency;
        let mut noise = rng::stream(root, Stream::EnvNoise, &[ep]);
        let mut o = self.env.reset(seed);
        gate.reset();
        if mode == Mode::Adahi && gate.sigma().is_none() {
            return Err(Error::Config(
                "adahi mode needs a calibrated gate; run `calibrate`".into(),
            ));
        }

        let mut steps = Vec::with_capacity(self.env.horizon);
        let mut success = false;
        for t in 0..self.env.horizon {
            let key = [ep, t as u64];
            o.step = t as u64;

            let (executed, rec) = if mode == Mode::TargetOnly {
                let act = self
                    .target
                    .act(&o, cb, &mut rng::stream(root, Stream::Target, &key))?;
                let delta_net = gate
                    .is_initialized()
                    .then(|| gate.net_deviation(&act.action))
                    .transpose()?;
                let rec = StepRecord {
                    step: t,
                    delta: delta_net.zip(gate.sigma()).map(|(n, s)| n / s),
                    delta_net,
                    transmitted: false,
                    primary_rejected: None,
                    shadow_would_reject: None,
                    fallback: false,
                    latency_micros: micros(lat.target_compute_ms),
                    action: Vec::new(),
                    expert_action: Vec::new(),
                };
                (act.action, rec)
            } else {
                let act = self
                    .draft
                    .act(&o, cb, &mut rng::stream(root, Stream::Draft, &key))?;
                let local = if self.cfg.gate.local_offset {
                    act.action.clone()
                } else {
                    act.decoded.clone()
                };
                let delta_net = gate
                    .is_initialized()
                    .then(|| gate.net_deviation(&local))
                    .transpose()?;
                let delta = delta_net.zip(gate.sigma()).map(|(n, s)| n / s);
                let transmit = match mode {
                    Mode::DraftOnly | Mode::TargetOnly => false,
                    Mode::Hybrid => true,
                    Mode::Random { tr } => {
                        rng::stream(root, Stream::Coin, &key).random::<f64>() < tr
                    }
                    Mode::Adahi => delta.is_some_and(|d| gate.should_transmit(d)),
                };
                let mut rec = StepRecord {
                    step: t,
                    delta,
                    delta_net,
                    transmitted: transmit,
                    primary_rejected: None,
                    shadow_would_reject: None,
                    fallback: false,
                    latency_micros: micros(lat.draft_compute_ms),
                    action: Vec::new(),
                    expert_action: Vec::new(),
                };
                let executed = if transmit {
                    let token = derive_seed(root, Stream::Verify, &key);
                    let req = VerifyRequest::new(
                        ep,
                        &o,
                        &act.bundle,
                        &act.codes,
                        &self.checksum,
                        Some(token),
                    );
                    let start = Instant::now();
                    match verifier.verify(&req) {
                        Ok(ex) => {
                            rec.primary_rejected = ex.reply.primary_rejected();
                            rec.latency_micros += ex.rtt.as_micros() as u64;
                            let decoded = cb.decode(&ex.reply.final_codes())?;
                            if ex.reply.offset.len() != decoded.len() {
                                return Err(Error::protocol(
                                    "offset",
                                    "reply offset has the wrong dimension",
                                ));
                            }
                            decoded
                                .iter()
                                .zip(&ex.reply.offset)
                                .map(|(a, b)| a + b)
                                .collect()
                        }
                        Err(e) => {
                            tracing::warn!(
                                episode,
                                step = t,
                                "verification failed, executing draft: {e}"
                            );
                            rec.fallback = true;
                            rec.latency_micros += start.elapsed().as_micros() as u64;
                            local
                        }
                    }
                } else {
                    if self.cfg.shadow {
                        let p = self.target.distribution(&o, cb)?;
                        let mut r = rng::stream(root, Stream::Shadow, &key);
                        let (_, ok) = verify_one(
                            &act.bundle.dists[0],
                            &p.dists[0],
                            act.codes.primary(),
                            self.cfg.adjust_rule,
                            &mut r,
                        )?;
                        rec.shadow_would_reject = Some(!ok);
                    }
                    local
                };
                (executed, rec)
            };

            let result = self.env.step(&o, &executed, &mut noise)?;
            gate.update_ema(&executed)?;
            steps.push(StepRecord {
                action: executed,
                expert_action: result.expert_action,
                ..rec
            });
            o = Observation {
                state: result.next_state,
                goal: o.goal,
                step: t as u64 + 1,
            };
            if result.success {
                success = true;
                break;
            }
        }
        Ok(EpisodeRecord {
            mode: mode.name().to_string(),
            episode,
            seed,
            success,
            steps,
        })
    }

    /// Episodes `first .. first + count` in one mode.
    pub fn run_range(
        &self,
        mode: Mode,
        first: usize,
        count: usize,
        gate: &mut DeviationGate,
        verifier: &mut dyn Verifier,
    ) -> Result<Vec<EpisodeRecord>> {
        (first..first + count)
            .map(|ep| self.run_episode(mode, ep, gate, verifier))
            .collect()
    }

    /// `cfg.episodes` episodes over the configured transport.
    pub fn run(&self, mode: Mode, gate: &mut DeviationGate) -> Result<Vec<EpisodeRecord>> {
        let mut verifier = self.verifier()?;
        self.run_range(mode, 0, self.cfg.episodes, gate, verifier.as_mut())
    }

    /// Hybrid-mode `(||a - ema||, primary rejected)` pairs over steps `t >= 1`,
    /// at least `min_samples` of them, from episodes starting at `first_episode`.
    pub fn collect_corpus(
        &self,
        min_samples: usize,
        first_episode: usize,
    ) -> Result<CalibrationCorpus> {
        let mut link = self.simulated_link()?;
        let mut gate = self.logging_gate()?;
        let mut raw = Vec::with_capacity(min_samples);
        let per_round = self.cfg.calibration.episodes_per_round;
        let mut next = first_episode;
        while raw.len() < min_samples {
            for rec in self.run_range(Mode::Hybrid, next, per_round, &mut gate, &mut link)? {
                raw.extend(
                    rec.steps
                        .iter()
                        .filter_map(|s| Some((s.delta_net?, s.primary_rejected?))),
                );
            }
            next += per_round;
        }
        raw.truncate(min_samples.max(1));
        CalibrationCorpus::from_raw(raw)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            env: self.env.name.clone(),
            config_hash: self.cfg.config_hash(),
            seed: self.cfg.seed,
            codebook_checksum: self.checksum.clone(),
        }
    }

    /// Corpus collection followed by the full calibration pipeline.
    pub fn calibrate(&self) -> Result<CalibrationArtifact> {
        let settings = self.cfg.calibration.settings();
        let mut corpus = self.collect_corpus(settings.min_samples, 0)?;
        calibrate_corpus(
            &mut corpus,
            &settings,
            self.cfg.gate.alpha,
            self.provenance(),
        )
    }

    /// Nominal per-step latency of the simulated transport when transmitting.
    pub fn nominal_round_trip(&self) -> Duration {
        let d = &self.cfg.transport.client.injected_delay;
        let net = if d.enabled { d.mean_ms } else { 0.0 };
        Duration::from_secs_f64((net + self.cfg.latency.server_compute_ms) / 1000.0)
    }
}
