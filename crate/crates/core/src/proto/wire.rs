//! Canonical JSON payloads exchanged between device and server.
//!
//! Keys appear in struct declaration order, floats are written in shortest
//! round-trip form, absent optionals are written as `null`. Encoding the same
//! value twice always yields the same bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{CategoricalBundle, Observation};
use crate::quantizer::CodeTuple;

pub const PROTOCOL_VERSION: u32 = 1;
/// Probability rows must sum to one within this after a transport round trip.
pub const WIRE_SUM_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationPayload {
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub protocol_version: u32,
    pub episode_id: u64,
    pub step: u64,
    pub observation: ObservationPayload,
    pub q_bundle: Vec<Vec<f64>>,
    pub draft_indices: Vec<usize>,
    pub codebook_checksum: String,
    pub rng_token: Option<u64>,
}

impl VerifyRequest {
    pub fn new(
        episode_id: u64,
        o: &Observation,
        q: &CategoricalBundle,
        draft: &CodeTuple,
        codebook_checksum: &str,
        rng_token: Option<u64>,
    ) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            episode_id,
            step: o.step,
            observation: ObservationPayload {
                state: o.state.clone(),
                goal: o.goal.clone(),
            },
            q_bundle: q.dists.clone(),
            draft_indices: draft.0.clone(),
            codebook_checksum: codebook_checksum.to_string(),
            rng_token,
        }
    }

    pub fn observation(&self) -> Observation {
        Observation {
            state: self.observation.state.clone(),
            goal: self.observation.goal.clone(),
            step: self.step,
        }
    }

    pub fn bundle(&self) -> CategoricalBundle {
        CategoricalBundle {
            dists: self.q_bundle.clone(),
        }
    }

    pub fn draft(&self) -> CodeTuple {
        CodeTuple(self.draft_indices.clone())
    }

    /// Internal consistency: version, shapes, index ranges, probability sums.
    pub fn validate(&self) -> Result<()> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Error::protocol(
                "protocol_version",
                format!(
                    "unsupported version {}, server speaks {PROTOCOL_VERSION}",
                    self.protocol_version
                ),
            ));
        }
        let obs = &self.observation;
        if obs.state.is_empty() || obs.state.len() != obs.goal.len() {
            return Err(Error::protocol(
                "observation",
                format!(
                    "state ({}) and goal ({}) must be non-empty and equal length",
                    obs.state.len(),
                    obs.goal.len()
                ),
            ));
        }
        if obs.state.iter().chain(&obs.goal).any(|x| !x.is_finite()) {
            return Err(Error::protocol("observation", "non-finite value"));
        }
        if self.q_bundle.is_empty() {
            return Err(Error::protocol("q_bundle", "no codebook rows"));
        }
        let k = self.q_bundle[0].len();
        if k < 2 {
            return Err(Error::protocol(
                "q_bundle[0]",
                "rows need at least two entries",
            ));
        }
        for (row, dist) in self.q_bundle.iter().enumerate() {
            let field = format!("q_bundle[{row}]");
            if dist.len() != k {
                return Err(Error::protocol(
                    field,
                    format!("length {} differs from row 0 ({k})", dist.len()),
                ));
            }
            if dist.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::protocol(field, "negative or non-finite probability"));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > WIRE_SUM_TOL {
                return Err(Error::protocol(
                    field,
                    format!("probabilities sum to {sum}, expected 1"),
                ));
            }
        }
        if self.draft_indices.len() != self.q_bundle.len() {
            return Err(Error::protocol(
                "draft_indices",
                format!(
                    "{} indices for {} codebooks",
                    self.draft_indices.len(),
                    self.q_bundle.len()
                ),
            ));
        }
        if let Some((i, &idx)) = self
            .draft_indices
            .iter()
            .enumerate()
            .find(|(_, &idx)| idx >= k)
        {
            return Err(Error::protocol(
                format!("draft_indices[{i}]"),
                format!("index {idx} out of range 0..{k}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyStatus {
    Ok,
    ChecksumMismatch,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyReply {
    pub status: ReplyStatus,
    pub final_indices: Vec<usize>,
    pub accepted_mask: Vec<bool>,
    /// Target head's offset for this observation, added on the device after decoding.
    pub offset: Vec<f64>,
    pub server_compute_micros: u64,
    pub detail: Option<String>,
}

impl VerifyReply {
    pub fn failure(status: ReplyStatus, detail: impl Into<String>) -> Self {
        Self {
            status,
            final_indices: Vec::new(),
            accepted_mask: Vec::new(),
            offset: Vec::new(),
            server_compute_micros: 0,
            detail: Some(detail.into()),
        }
    }

    /// Equality ignoring the server's timing field.
    pub fn same_content(&self, other: &Self) -> bool {
        self.status == other.status
            && self.final_indices == other.final_indices
            && self.accepted_mask == other.accepted_mask
            && self.offset == other.offset
            && self.detail == other.detail
    }

    pub fn final_codes(&self) -> CodeTuple {
        CodeTuple(self.final_indices.clone())
    }

    pub fn primary_rejected(&self) -> Option<bool> {
        self.accepted_mask.first().map(|a| !a)
    }
}

pub fn encode_request(r: &VerifyRequest) -> Result<Vec<u8>> {
    let floats = r
        .observation
        .state
        .iter()
        .chain(&r.observation.goal)
        .chain(r.q_bundle.iter().flatten());
    if floats.into_iter().any(|x| !x.is_finite()) {
        return Err(Error::Serialization(
            "request contains a non-finite float".into(),
        ));
    }
    serde_json::to_vec(r).map_err(|e| Error::Serialization(e.to_string()))
}

/// Parses and validates a request; oversize payloads are refused unread.
pub fn decode_request(bytes: &[u8], max_bytes: usize) -> Result<VerifyRequest> {
    if bytes.len() > max_bytes {
        return Err(Error::protocol(
            "payload",
            format!("{} bytes exceeds limit of {max_bytes}", bytes.len()),
        ));
    }
    let req: VerifyRequest =
        serde_json::from_slice(bytes).map_err(|e| Error::protocol("body", e.to_string()))?;
    req.validate()?;
    Ok(req)
}

pub fn encode_reply(r: &VerifyReply) -> Result<Vec<u8>> {
    if r.offset.iter().any(|x| !x.is_finite()) {
        return Err(Error::Serialization(
            "reply contains a non-finite float".into(),
        ));
    }
    serde_json::to_vec(r).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn decode_reply(bytes: &[u8]) -> Result<VerifyReply> {
    let reply: VerifyReply =
        serde_json::from_slice(bytes).map_err(|e| Error::protocol("body", e.to_string()))?;
    if reply.status == ReplyStatus::Ok && reply.final_indices.len() != reply.accepted_mask.len() {
        return Err(Error::protocol(
            "accepted_mask",
            "length differs from final_indices",
        ));
    }
    Ok(reply)
}
