use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::delay::{DelayConfig, DelayModel};
use super::wire::{decode_reply, encode_request, VerifyRequest, DEFAULT_MAX_PAYLOAD_BYTES};
use super::{check_status, Exchange, TransportError, Verifier};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Total attempts per request, so 1 means no retry.
    pub retries: u32,
    pub max_payload_bytes: usize,
    pub injected_delay: DelayConfig,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8787".into(),
            timeout_ms: 500,
            retries: 3,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            injected_delay: DelayConfig::default(),
        }
    }
}

/// Blocking HTTP client for `POST /verify`.
pub struct HttpVerifier {
    http: reqwest::blocking::Client,
    url: String,
    retries: u32,
    max_payload_bytes: usize,
    delay: DelayModel,
    seed: u64,
}

impl HttpVerifier {
    pub fn new(cfg: &ClientConfig, seed: u64) -> Result<Self> {
        if cfg.retries == 0 {
            return Err(Error::Config("retries must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            http,
            url: format!("{}/verify", cfg.endpoint.trim_end_matches('/')),
            retries: cfg.retries,
            max_payload_bytes: cfg.max_payload_bytes,
            delay: DelayModel::new(&cfg.injected_delay)?,
            seed,
        })
    }

    fn attempt(&self, body: &[u8]) -> std::result::Result<Vec<u8>, AttemptError> {
        let resp = self
            .http
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
            .map_err(AttemptError::from_reqwest)?;
        let code = resp.status();
        let bytes = resp.bytes().map_err(AttemptError::from_reqwest)?.to_vec();
        // 400 and 409 carry a reply body with a typed status
        if code.is_success() || code.as_u16() == 400 || code.as_u16() == 409 {
            Ok(bytes)
        } else {
            Err(AttemptError::Fatal(TransportError::Status {
                code: code.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
            }))
        }
    }
}

enum AttemptError {
    Timeout,
    Connection(String),
    Fatal(TransportError),
}

impl AttemptError {
    fn from_reqwest(e: reqwest::Error) -> Self {
        if e.is_timeout() {
            AttemptError::Timeout
        } else if e.is_connect() || e.is_request() {
            AttemptError::Connection(e.to_string())
        } else {
            AttemptError::Fatal(TransportError::Decode(e.to_string()))
        }
    }
}

impl Verifier for HttpVerifier {
    fn verify(&mut self, req: &VerifyRequest) -> std::result::Result<Exchange, TransportError> {
        let body = encode_request(req).map_err(|e| TransportError::Malformed(e.to_string()))?;
        if body.len() > self.max_payload_bytes {
            return Err(TransportError::Malformed(format!(
                "payload of {} bytes exceeds limit of {}",
                body.len(),
                self.max_payload_bytes
            )));
        }
        let mut r = rng::stream(self.seed, Stream::Delay, &[req.episode_id, req.step]);
        let injected = self.delay.sample(&mut r);
        let start = Instant::now();
        std::thread::sleep(injected);
        let mut last = AttemptError::Timeout;
        for attempt in 1..=self.retries {
            match self.attempt(&body) {
                Ok(bytes) => {
                    let rtt = start.elapsed();
                    let reply =
                        decode_reply(&bytes).map_err(|e| TransportError::Decode(e.to_string()))?;
                    return check_status(reply).map(|reply| Exchange { reply, rtt });
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(e) => {
                    tracing::debug!(attempt, "verify attempt failed");
                    last = e;
                }
            }
        }
        Err(match last {
            AttemptError::Timeout => TransportError::Timeout {
                attempts: self.retries,
            },
            AttemptError::Connection(message) => TransportError::Connection {
                attempts: self.retries,
                message,
            },
            AttemptError::Fatal(e) => e,
        })
    }
}
