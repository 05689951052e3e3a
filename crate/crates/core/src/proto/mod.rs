//! Device/server verification protocol.
//!
//! The device posts its observation, draft bundle and draft indices to
//! `POST /verify`; the server evaluates the target head, runs per-codebook
//! speculative sampling and answers with the finalized indices, the accept
//! mask and the target offset. `GET /health` reports the loaded artifacts.

mod client;
mod delay;
mod server;
mod wire;

use std::time::Duration;

use thiserror::Error;

pub use client::{ClientConfig, HttpVerifier};
pub use delay::{DelayConfig, DelayModel, DEFAULT_JITTER_MS, DEFAULT_RTT_MS};
pub use server::{serve_verify, Health, ServerHandle, ServerTiming, VerifierService};
pub use wire::{
    decode_reply, decode_request, encode_reply, encode_request, ObservationPayload, ReplyStatus,
    VerifyReply, VerifyRequest, DEFAULT_MAX_PAYLOAD_BYTES, PROTOCOL_VERSION, WIRE_SUM_TOL,
};

use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("verify request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("could not reach server after {attempts} attempt(s): {message}")]
    Connection { attempts: u32, message: String },
    #[error("server answered HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("undecodable reply: {0}")]
    Decode(String),
    #[error("server rejected codebook checksum: {0}")]
    ChecksumMismatch(String),
    #[error("server rejected request as malformed: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn attempts(&self) -> u32 {
        match self {
            TransportError::Timeout { attempts } | TransportError::Connection { attempts, .. } => {
                *attempts
            }
            _ => 1,
        }
    }
}

/// A completed verification round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub reply: VerifyReply,
    /// Device-observed round trip, server compute included.
    pub rtt: Duration,
}

/// Anything that can verify a draft: a real HTTP client or an in-process link.
pub trait Verifier {
    fn verify(&mut self, req: &VerifyRequest) -> Result<Exchange, TransportError>;
}

/// Maps a non-ok reply status to the matching transport error.
pub(crate) fn check_status(reply: VerifyReply) -> Result<VerifyReply, TransportError> {
    let detail = reply.detail.clone().unwrap_or_default();
    match reply.status {
        ReplyStatus::Ok => Ok(reply),
        ReplyStatus::ChecksumMismatch => Err(TransportError::ChecksumMismatch(detail)),
        ReplyStatus::Malformed => Err(TransportError::Malformed(detail)),
    }
}

/// In-process link: the request still goes through byte encoding and decoding,
/// the delay is virtual (sampled, never slept) and the round trip is the
/// sampled network delay plus the reply's reported server compute.
pub struct SimulatedLink {
    service: VerifierService,
    delay: DelayModel,
    seed: u64,
}

impl SimulatedLink {
    pub fn new(
        service: VerifierService,
        delay: &DelayConfig,
        seed: u64,
    ) -> crate::error::Result<Self> {
        Ok(Self {
            service,
            delay: DelayModel::new(delay)?,
            seed,
        })
    }

    pub fn service(&self) -> &VerifierService {
        &self.service
    }
}

impl Verifier for SimulatedLink {
    fn verify(&mut self, req: &VerifyRequest) -> Result<Exchange, TransportError> {
        let bytes = encode_request(req).map_err(|e| TransportError::Malformed(e.to_string()))?;
        let (_, reply_bytes) = self.service.handle_bytes(&bytes);
        let reply =
            decode_reply(&reply_bytes).map_err(|e| TransportError::Decode(e.to_string()))?;
        let reply = check_status(reply)?;
        let mut r = rng::stream(self.seed, Stream::Delay, &[req.episode_id, req.step]);
        let rtt = self.delay.sample(&mut r) + Duration::from_micros(reply.server_compute_micros);
        Ok(Exchange { reply, rtt })
    }
}
