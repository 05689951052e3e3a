#![allow(dead_code)]

use std::collections::VecDeque;

use rand::RngCore;

/// Uniforms on [0, 1) are `m * 2^-53` for `m < 2^53`.
pub const GRID: u64 = 1 << 53;

/// An rng that replays a fixed list of 53-bit grid positions as uniforms.
pub struct Scripted {
    queue: VecDeque<u64>,
}

impl Scripted {
    pub fn new(grid_positions: &[u64]) -> Self {
        Self {
            queue: grid_positions.iter().map(|m| m << 11).collect(),
        }
    }
}

impl RngCore for Scripted {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.queue
            .pop_front()
            .expect("scripted rng ran out of values")
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// Smallest grid position in `[lo, hi]` where `pred` becomes true, given that
/// `pred` is monotone (false then true). Returns `hi + 1` if never true.
pub fn first_true(mut lo: u64, hi: u64, pred: impl Fn(u64) -> bool) -> u64 {
    let mut hi_excl = hi + 1;
    while lo < hi_excl {
        let mid = lo + (hi_excl - lo) / 2;
        if pred(mid) {
            hi_excl = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn random_simplex<R: rand::Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    // exponential spacings give a uniform point on the simplex
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Exact outcome law of `verify_one` on `(q, p)`, recovered by locating every
/// decision boundary of the implementation on the uniform grid.
/// Returns `(P(final = k), P(reject))`.
pub fn enumerate_verify_one(
    q: &[f64],
    p: &[f64],
    rule: adahi::specsamp::AdjustRule,
) -> (Vec<f64>, f64) {
    use adahi::specsamp::verify_one;
    let k = q.len();
    let scale = GRID as f64;
    let mut out = vec![0.0; k];
    let mut reject = 0.0;
    for d in 0..k {
        if q[d] == 0.0 {
            continue;
        }
        let run =
            |m1: u64, m2: u64| verify_one(q, p, d, rule, &mut Scripted::new(&[m1, m2])).unwrap();
        let first_reject = first_true(0, GRID - 1, |m| !run(m, 0).1);
        let accept = first_reject as f64 / scale;
        out[d] += q[d] * accept;
        if first_reject >= GRID {
            continue;
        }
        reject += q[d] * (1.0 - accept);
        // resampled index is monotone in the second uniform
        let mut prev = 0u64;
        for j in 0..k {
            let next = if j + 1 == k {
                GRID
            } else {
                first_true(prev, GRID - 1, |m| run(GRID - 1, m).0 > j)
            };
            out[j] += q[d] * (1.0 - accept) * (next - prev) as f64 / scale;
            prev = next;
        }
    }
    (out, reject)
}

/// 50 seeded `(q, p)` pairs with `K` cycling through 2, 3 and 5.
pub fn pair_grid() -> Vec<(Vec<f64>, Vec<f64>)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    (0..50)
        .map(|i| {
            let k = [2, 3, 5][i % 3];
            (random_simplex(k, &mut rng), random_simplex(k, &mut rng))
        })
        .collect()
}

pub mod proto {
    use std::sync::Arc;

    use adahi::env::EnvSpec;
    use adahi::policy::{HeadConfig, Observation, PolicyHead, Role};
    use adahi::proto::{ServerTiming, VerifierService, VerifyRequest, DEFAULT_MAX_PAYLOAD_BYTES};
    use adahi::quantizer::{build_codebooks, CodeTuple, CodebookSet};
    use adahi::rng::{stream, Stream};
    use adahi::specsamp::AdjustRule;
    use nalgebra::DMatrix;

    /// One codebook, two scalar entries.
    pub fn tiny_codebooks() -> Arc<CodebookSet> {
        Arc::new(
            CodebookSet::from_parts(
                vec![vec![vec![0.0], vec![1.0]]],
                vec![vec![1.0]],
                vec![0.0],
                0,
            )
            .unwrap(),
        )
    }

    pub fn tiny_target() -> PolicyHead {
        PolicyHead::with_gain(Role::Target, DMatrix::from_element(1, 1, 0.5), 0.5, 0.25).unwrap()
    }

    pub fn tiny_service(timing: ServerTiming, max_payload_bytes: usize) -> VerifierService {
        VerifierService::new(
            tiny_codebooks(),
            tiny_target(),
            AdjustRule::Residual,
            timing,
            max_payload_bytes,
        )
    }

    pub fn tiny_request() -> VerifyRequest {
        let cb = tiny_codebooks();
        let o = Observation {
            state: vec![0.5],
            goal: vec![1.25],
            step: 4,
        };
        let q = adahi::policy::CategoricalBundle {
            dists: vec![vec![0.25, 0.75]],
        };
        VerifyRequest::new(3, &o, &q, &CodeTuple(vec![1]), &cb.checksum(), Some(17))
    }

    /// Realistic service and requests from the 2-D reach fixture.
    pub fn reach_service(
        timing: ServerTiming,
    ) -> (VerifierService, Vec<VerifyRequest>, PolicyHead) {
        let env = EnvSpec::fixture("reach-2d").unwrap();
        let cb = Arc::new(build_codebooks(&env.quantizer, 7).unwrap());
        let target = PolicyHead::new(
            Role::Target,
            &env.expert_gain,
            &HeadConfig::default_target(),
            7,
        )
        .unwrap();
        let draft = PolicyHead::new(
            Role::Draft,
            &env.expert_gain,
            &HeadConfig::default_draft(),
            7,
        )
        .unwrap();
        let svc = VerifierService::new(
            cb.clone(),
            target,
            AdjustRule::Residual,
            timing,
            DEFAULT_MAX_PAYLOAD_BYTES,
        );
        let requests = (0..1000u64)
            .map(|i| {
                let mut o = env.reset(i);
                o.step = i % 17;
                let mut rng = stream(i, Stream::Draft, &[]);
                let act = draft.act(&o, &cb, &mut rng).unwrap();
                VerifyRequest::new(
                    i,
                    &o,
                    &act.bundle,
                    &act.codes,
                    &cb.checksum(),
                    Some(1000 + i),
                )
            })
            .collect();
        (svc, requests, draft)
    }
}
