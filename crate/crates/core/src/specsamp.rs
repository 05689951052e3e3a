//! Per-codebook speculative sampling.
//!
//! A draft index `d` sampled from `q` is kept with probability
//! `min(1, p[d] / q[d])`; otherwise a replacement is drawn from the positive
//! part of `p - q`, renormalized. The final index is then distributed exactly
//! as `p`. Codebooks are verified independently, each with its own stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_index, CategoricalBundle};
use crate::quantizer::CodeTuple;
use crate::rng::{self, Stream};

/// Which residual the rejection branch resamples from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustRule {
    /// `max(p - q, 0)`, the residual under which the output is distributed as `p`.
    #[default]
    Residual,
    /// `max(q - p, 0)`, kept only for side-by-side comparison runs. The output
    /// is not distributed as `p` under this rule.
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    #[serde(rename = "final")]
    pub final_codes: CodeTuple,
    pub accepted_mask: Vec<bool>,
    pub primary_rejected: bool,
}

/// Probability that draft index `draft_idx` survives verification.
pub fn acceptance_probability(q: &[f64], p: &[f64], draft_idx: usize) -> Result<f64> {
    check_pair(q, p)?;
    let qd = *q.get(draft_idx).ok_or_else(|| {
        Error::contract(format!(
            "draft index {draft_idx} out of range 0..{}",
            q.len()
        ))
    })?;
    if qd <= 0.0 {
        return Err(Error::contract(format!(
            "draft index {draft_idx} has zero draft probability"
        )));
    }
    Ok((p[draft_idx] / qd).min(1.0))
}

/// Normalized positive residual used on rejection.
pub fn adjust(q: &[f64], p: &[f64], rule: AdjustRule) -> Result<Vec<f64>> {
    check_pair(q, p)?;
    let residual: Vec<f64> = match rule {
        AdjustRule::Residual => p.iter().zip(q).map(|(pk, qk)| (pk - qk).max(0.0)).collect(),
        AdjustRule::Reversed => q.iter().zip(p).map(|(qk, pk)| (qk - pk).max(0.0)).collect(),
    };
    let total: f64 = residual.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract(
            "adjusted distribution has no mass (p == q)",
        ));
    }
    Ok(residual.into_iter().map(|r| r / total).collect())
}

/// Verifies one draft index. Draws one uniform for the accept test and, on
/// rejection, one more for the resample.
pub fn verify_one<R: Rng + ?Sized>(
    q: &[f64],
    p: &[f64],
    draft_idx: usize,
    rule: AdjustRule,
    rng: &mut R,
) -> Result<(usize, bool)> {
    let ratio = acceptance_probability(q, p, draft_idx)?;
    // u in [0, 1): `u < ratio` accepts with probability exactly `ratio`
    let u: f64 = rng.random();
    if u < ratio {
        return Ok((draft_idx, true));
    }
    let adjusted = adjust(q, p, rule)?;
    Ok((sample_index(&adjusted, rng.random()), false))
}

/// Verifies every codebook of a draft tuple. Codebook `l` uses the stream
/// `(seed, Verify, l)`, so acceptance events are independent across codebooks.
pub fn verify_tuple(
    qb: &CategoricalBundle,
    pb: &CategoricalBundle,
    draft: &CodeTuple,
    seed: u64,
    rule: AdjustRule,
) -> Result<VerifyOutcome> {
    if qb.n() != pb.n() || qb.k() != pb.k() {
        return Err(Error::contract(format!(
            "bundle shapes differ: draft {}x{}, target {}x{}",
            qb.n(),
            qb.k(),
            pb.n(),
            pb.k()
        )));
    }
    if draft.len() != qb.n() {
        return Err(Error::contract(format!(
            "draft tuple has {} indices for {} codebooks",
            draft.len(),
            qb.n()
        )));
    }
    let mut final_codes = Vec::with_capacity(draft.len());
    let mut accepted_mask = Vec::with_capacity(draft.len());
    for (stage, (&d, (q, p))) in draft
        .indices()
        .iter()
        .zip(qb.dists.iter().zip(&pb.dists))
        .enumerate()
    {
        let mut r = rng::stream(seed, Stream::Verify, &[stage as u64]);
        let (idx, ok) = verify_one(q, p, d, rule, &mut r)?;
        final_codes.push(idx);
        accepted_mask.push(ok);
    }
    Ok(VerifyOutcome {
        primary_rejected: !accepted_mask[0],
        final_codes: CodeTuple(final_codes),
        accepted_mask,
    })
}

/// `1 - sum_k min(p_k, q_k)`: the rejection probability averaged over draft sampling.
pub fn expected_rejection(q: &[f64], p: &[f64]) -> Result<f64> {
    check_pair(q, p)?;
    let overlap: f64 = q.iter().zip(p).map(|(a, b)| a.min(*b)).sum();
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

fn check_pair(q: &[f64], p: &[f64]) -> Result<()> {
    if q.len() != p.len() || q.is_empty() {
        return Err(Error::contract(format!(
            "distribution lengths differ or are empty: q {}, p {}",
            q.len(),
            p.len()
        )));
    }
    Ok(())
}
