//! Residual-quantized latent action space.
//!
//! A [`CodebookSet`] holds `n` ordered codebooks of `K` latent entries each and
//! an affine decoder `a = W z + c` from latent dimension `D` to action
//! dimension `d`. Continuous actions are lifted to latent space with the
//! Moore-Penrose pseudo-inverse of `W` and then quantized greedily, stage by
//! stage, on the running residual.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Codebook fixture format version.
pub const CODEBOOK_FORMAT_VERSION: u32 = 1;
const CODEBOOK_MAGIC: &[u8; 4] = b"ADCB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Number of codebooks.
    pub n: usize,
    /// Entries per codebook.
    pub k: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// Mean entry norm of the primary codebook.
    pub scale: f64,
    /// Geometric decay of entry norms between consecutive stages, in (0, 1).
    pub decay: f64,
    /// Overall gain of the decoder matrix.
    pub decoder_scale: f64,
    /// Relative magnitude of the random perturbation added to the decoder.
    pub decoder_noise: f64,
    /// Reserve entry 0 of every codebook for the zero vector.
    pub include_zero: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            n: 2,
            k: 16,
            latent_dim: 2,
            action_dim: 2,
            scale: 1.0,
            decay: 0.5,
            decoder_scale: 1.0,
            decoder_noise: 0.1,
            include_zero: true,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("quantizer.n must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("quantizer.k must be >= 2".into()));
        }
        if self.action_dim < 1 || self.latent_dim < self.action_dim {
            return Err(Error::Config(format!(
                "quantizer needs 1 <= action_dim <= latent_dim, got d={} D={}",
                self.action_dim, self.latent_dim
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("quantizer.scale must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config("quantizer.decay must lie in (0, 1)".into()));
        }
        if !(self.decoder_scale > 0.0 && self.decoder_scale.is_finite()) {
            return Err(Error::Config(
                "quantizer.decoder_scale must be positive".into(),
            ));
        }
        if !(self.decoder_noise >= 0.0 && self.decoder_noise.is_finite()) {
            return Err(Error::Config(
                "quantizer.decoder_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One index per codebook, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeTuple(pub Vec<usize>);

impl CodeTuple {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn primary(&self) -> usize {
        self.0[0]
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for CodeTuple {
    fn from(v: Vec<usize>) -> Self {
        CodeTuple(v)
    }
}

#[derive(Debug, Clone)]
pub struct CodebookSet {
    n: usize,
    k: usize,
    latent_dim: usize,
    action_dim: usize,
    seed: u64,
    /// Row-major `[stage][entry][coord]`.
    entries: Vec<f64>,
    decoder: DMatrix<f64>,
    bias: DVector<f64>,
    lift: DMatrix<f64>,
    checksum: [u8; 32],
}

impl PartialEq for CodebookSet {
    fn eq(&self, other: &Self) -> bool {
        self.checksum == other.checksum && self.canonical_bytes() == other.canonical_bytes()
    }
}

impl CodebookSet {
    /// Assembles a codebook set from explicit parts.
    ///
    /// `entries[stage][k]` must all have length `D`, `decoder` is `d x D` with
    /// full row rank, `bias` has length `d`.
    pub fn from_parts(
        entries: Vec<Vec<Vec<f64>>>,
        decoder: Vec<Vec<f64>>,
        bias: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = entries.len();
        if n < 1 {
            return Err(Error::contract("codebook set needs at least one codebook"));
        }
        let k = entries[0].len();
        if k < 2 {
            return Err(Error::contract("codebooks need at least two entries"));
        }
        let latent_dim = entries[0][0].len();
        if latent_dim == 0 {
            return Err(Error::contract("latent dimension must be positive"));
        }
        let mut flat = Vec::with_capacity(n * k * latent_dim);
        for (stage, book) in entries.iter().enumerate() {
            if book.len() != k {
                return Err(Error::contract(format!(
                    "codebook {stage} has {} entries, expected {k}",
                    book.len()
                )));
            }
            for (idx, e) in book.iter().enumerate() {
                if e.len() != latent_dim {
                    return Err(Error::contract(format!(
                        "entry ({stage}, {idx}) has dimension {}, expected {latent_dim}",
                        e.len()
                    )));
                }
                flat.extend_from_slice(e);
            }
        }
        let action_dim = decoder.len();
        if action_dim == 0 || decoder.iter().any(|row| row.len() != latent_dim) {
            return Err(Error::contract("decoder must be a non-empty d x D matrix"));
        }
        if bias.len() != action_dim {
            return Err(Error::contract(
                "decoder bias length must equal action dimension",
            ));
        }
        let w = DMatrix::from_fn(action_dim, latent_dim, |r, c| decoder[r][c]);
        Self::assemble(
            n,
            k,
            latent_dim,
            action_dim,
            seed,
            flat,
            w,
            DVector::from_vec(bias),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        k: usize,
        latent_dim: usize,
        action_dim: usize,
        seed: u64,
        entries: Vec<f64>,
        decoder: DMatrix<f64>,
        bias: DVector<f64>,
    ) -> Result<Self> {
        if entries
            .iter()
            .chain(decoder.iter())
            .chain(bias.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::contract("codebook data must be finite"));
        }
        if action_dim > latent_dim {
            return Err(Error::contract(
                "decoder cannot have full row rank when d > D",
            ));
        }
        let svd = decoder.clone().svd(false, false);
        let smin = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        if smin <= 1e-10 * smax.max(1.0) {
            return Err(Error::contract("decoder matrix is not full row rank"));
        }
        // W^+ = W^T (W W^T)^{-1} for full row rank W.
        let gram = &decoder * decoder.transpose();
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| Error::contract("decoder Gram matrix is singular"))?;
        let lift = decoder.transpose() * gram_inv;
        let mut set = Self {
            n,
            k,
            latent_dim,
            action_dim,
            seed,
            entries,
            decoder,
            bias,
            lift,
            checksum: [0; 32],
        };
        set.checksum = Sha256::digest(set.canonical_bytes()).into();
        Ok(set)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entry(&self, stage: usize, idx: usize) -> &[f64] {
        let start = (stage * self.k + idx) * self.latent_dim;
        &self.entries[start..start + self.latent_dim]
    }

    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.decoder
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    /// Hex SHA-256 of the canonical byte layout.
    pub fn checksum(&self) -> String {
        hex::encode(self.checksum)
    }

    pub fn validate_tuple(&self, t: &CodeTuple) -> Result<()> {
        if t.len() != self.n {
            return Err(Error::contract(format!(
                "code tuple has {} indices, codebook set has {} codebooks",
                t.len(),
                self.n
            )));
        }
        if let Some((stage, &idx)) = t.0.iter().enumerate().find(|(_, &i)| i >= self.k) {
            return Err(Error::contract(format!(
                "index {idx} for codebook {stage} out of range 0..{}",
                self.k
            )));
        }
        Ok(())
    }

    /// Lifts an action into latent space: `W^+ (a - c)`.
    pub fn lift(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.action_dim {
            return Err(Error::contract(format!(
                "action has dimension {}, decoder outputs {}",
                action.len(),
                self.action_dim
            )));
        }
        let a = DVector::from_column_slice(action) - &self.bias;
        Ok((&self.lift * a).iter().copied().collect())
    }

    /// Index of the entry of `stage` nearest to `residual`; ties go to the lowest index.
    pub fn nearest(&self, stage: usize, residual: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for idx in 0..self.k {
            let d = sq_dist(residual, self.entry(stage, idx));
            if d < best_d {
                best_d = d;
                best = idx;
            }
        }
        best
    }

    /// Greedy residual quantization of a latent vector. Returns the chosen
    /// indices and the residual entering each stage (`n + 1` vectors, the
    /// last one being what remains after the final stage).
    pub fn quantize_latent(&self, latent: &[f64]) -> Result<(CodeTuple, Vec<Vec<f64>>)> {
        if latent.len() != self.latent_dim {
            return Err(Error::contract(format!(
                "latent vector has dimension {}, expected {}",
                latent.len(),
                self.latent_dim
            )));
        }
        let mut residual = latent.to_vec();
        let mut trace = Vec::with_capacity(self.n + 1);
        let mut indices = Vec::with_capacity(self.n);
        for stage in 0..self.n {
            trace.push(residual.clone());
            let idx = self.nearest(stage, &residual);
            for (r, e) in residual.iter_mut().zip(self.entry(stage, idx)) {
                *r -= e;
            }
            indices.push(idx);
        }
        trace.push(residual);
        Ok((CodeTuple(indices), trace))
    }

    /// Lifts `action` and quantizes it greedily, one codebook at a time.
    pub fn encode_residual(&self, action: &[f64]) -> Result<CodeTuple> {
        let latent = self.lift(action)?;
        Ok(self.quantize_latent(&latent)?.0)
    }

    /// Sum of the selected entries in latent space.
    pub fn latent_sum(&self, t: &CodeTuple) -> Result<Vec<f64>> {
        self.validate_tuple(t)?;
        let mut sum = vec![0.0; self.latent_dim];
        for (stage, &idx) in t.0.iter().enumerate() {
            for (s, e) in sum.iter_mut().zip(self.entry(stage, idx)) {
                *s += e;
            }
        }
        Ok(sum)
    }

    /// `W * sum(entries) + c`.
    pub fn decode(&self, t: &CodeTuple) -> Result<Vec<f64>> {
        let z = DVector::from_vec(self.latent_sum(t)?);
        let a = &self.decoder * z + &self.bias;
        Ok(a.iter().copied().collect())
    }

    /// Canonical little-endian layout: magic, version, n, K, D, d, seed, then
    /// entries, decoder (row-major) and bias as f64.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let floats = self.entries.len() + self.action_dim * self.latent_dim + self.action_dim;
        let mut out = Vec::with_capacity(4 + 4 * 5 + 8 + 8 * floats);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_FORMAT_VERSION.to_le_bytes());
        for v in [self.n, self.k, self.latent_dim, self.action_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for x in &self.entries {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for r in 0..self.action_dim {
            for c in 0..self.latent_dim {
                out.extend_from_slice(&self.decoder[(r, c)].to_le_bytes());
            }
        }
        for x in self.bias.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Canonical bytes followed by the 32-byte SHA-256 checksum.
    pub fn to_fixture_bytes(&self) -> Vec<u8> {
        let mut out = self.canonical_bytes();
        out.extend_from_slice(&self.checksum);
        out
    }

    pub fn from_fixture_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Artifact(format!("codebook fixture: {m}"));
        if bytes.len() < 4 + 20 + 8 + 32 {
            return Err(bad("truncated header"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest.as_slice() != stored {
            return Err(bad("checksum mismatch"));
        }
        if &body[0..4] != CODEBOOK_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(body[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CODEBOOK_FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (n, k, latent_dim, action_dim) = (
            u32_at(8) as usize,
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        let seed = u64::from_le_bytes(body[24..32].try_into().unwrap());
        let n_entries = n * k * latent_dim;
        let n_floats = n_entries + action_dim * latent_dim + action_dim;
        if body.len() != 32 + 8 * n_floats {
            return Err(bad("payload length does not match header"));
        }
        let floats: Vec<f64> = body[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let entries = floats[..n_entries].to_vec();
        let w = &floats[n_entries..n_entries + action_dim * latent_dim];
        let decoder = DMatrix::from_row_slice(action_dim, latent_dim, w);
        let bias = DVector::from_column_slice(&floats[n_entries + action_dim * latent_dim..]);
        if n < 1 || k < 2 {
            return Err(bad("n must be >= 1 and K >= 2"));
        }
        Self::assemble(n, k, latent_dim, action_dim, seed, entries, decoder, bias)
    }

    pub fn write_fixture(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_fixture_bytes())?;
        Ok(())
    }

    pub fn read_fixture(path: &Path) -> Result<Self> {
        Self::from_fixture_bytes(&fs::read(path)?)
    }
}

/// Generates a seeded codebook set with geometrically decaying stage scales.
///
/// Stage `l` (0-based) draws Gaussian entries whose expected norm is close to
/// `scale * decay^l`. The decoder is `decoder_scale * (I + decoder_noise * G)`
/// restricted to the first `d` rows, which has full row rank for small noise.
pub fn build_codebooks(cfg: &QuantizerConfig, seed: u64) -> Result<CodebookSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Codebooks, &[]);
    let dim = cfg.latent_dim;
    let mut entries = Vec::with_capacity(cfg.n * cfg.k * dim);
    // E||g|| for g ~ N(0, I_D / D) is close to 1 for moderate D; the exact
    // chi mean is used so stage scales hold for small D as well.
    let norm_mean = chi_mean(dim) / (dim as f64).sqrt();
    for stage in 0..cfg.n {
        let stage_scale = cfg.scale * cfg.decay.powi(stage as i32) / norm_mean;
        for idx in 0..cfg.k {
            for _ in 0..dim {
                let g: f64 = StandardNormal.sample(&mut rng);
                let v = if cfg.include_zero && idx == 0 {
                    0.0
                } else {
                    stage_scale * g / (dim as f64).sqrt()
                };
                entries.push(v);
            }
        }
    }
    let mut w = DMatrix::zeros(cfg.action_dim, dim);
    for r in 0..cfg.action_dim {
        for c in 0..dim {
            let g: f64 = StandardNormal.sample(&mut rng);
            let eye = if r == c { 1.0 } else { 0.0 };
            w[(r, c)] = cfg.decoder_scale * (eye + cfg.decoder_noise * g / (dim as f64).sqrt());
        }
    }
    let bias = DVector::zeros(cfg.action_dim);
    CodebookSet::assemble(cfg.n, cfg.k, dim, cfg.action_dim, seed, entries, w, bias)
        .map_err(|e| Error::Config(format!("generated decoder rejected: {e}")))
}

/// Mean of the chi distribution with `k` degrees of freedom,
/// `sqrt(2) * Gamma((k+1)/2) / Gamma(k/2)`, via the ratio recursion.
pub(crate) fn chi_mean(k: usize) -> f64 {
    // ratio(k) = Gamma((k+1)/2) / Gamma(k/2); ratio(k) * ratio(k+1) = k/2.
    let mut ratio = std::f64::consts::PI.sqrt() / 2.0; // k = 2: Gamma(1.5)/Gamma(1)
    if k == 1 {
        return (2.0 / std::f64::consts::PI).sqrt();
    }
    for j in 2..k {
        ratio = (j as f64 / 2.0) / ratio;
    }
    std::f64::consts::SQRT_2 * ratio
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
