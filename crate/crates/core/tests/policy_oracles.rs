use adahi::env::EnvSpec;
use adahi::policy::{normalize, HeadConfig, Observation, PolicyHead, Role};
use adahi::quantizer::build_codebooks;
use adahi::rng::{stream, Stream};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn draft_is_flatter_than_target() {
    let env = EnvSpec::fixture("reach-2d").unwrap();
    let cb = build_codebooks(&env.quantizer, 7).unwrap();
    let draft = PolicyHead::new(
        Role::Draft,
        &env.expert_gain,
        &HeadConfig::default_draft(),
        7,
    )
    .unwrap();
    let target = PolicyHead::new(
        Role::Target,
        &env.expert_gain,
        &HeadConfig::default_target(),
        7,
    )
    .unwrap();
    let (mut hq, mut hp) = (0.0, 0.0);
    for i in 0..1000u64 {
        let o = env.reset(i);
        hq += draft.distribution(&o, &cb).unwrap().entropies()[0];
        hp += target.distribution(&o, &cb).unwrap().entropies()[0];
    }
    assert!(hq > hp, "draft entropy {hq} vs target {hp}");
}

#[test]
fn logits_follow_scaled_squared_distance() {
    let env = EnvSpec::fixture("reach-2d").unwrap();
    let cb = build_codebooks(&env.quantizer, 1).unwrap();
    let gain = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.05, 0.3]);
    let head = PolicyHead::with_gain(Role::Target, gain.clone(), 0.7, 0.0).unwrap();
    let o = Observation {
        state: vec![1.0, -0.5],
        goal: vec![0.2, 0.3],
        step: 0,
    };
    let logits = head.logits(&o, &cb).unwrap();
    // ideal action by hand, lifted, stage-0 logits against every entry
    let e = [0.2 - 1.0, 0.3 + 0.5];
    let ideal = [0.4 * e[0] + 0.1 * e[1], -0.05 * e[0] + 0.3 * e[1]];
    let z = cb.lift(&ideal).unwrap();
    for k in 0..cb.k() {
        let d2: f64 = z
            .iter()
            .zip(cb.entry(0, k))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((logits[0][k] + d2 / 0.7).abs() < 1e-12);
    }
    // stage 1 sees what stage 0 left behind
    let best0 = cb.nearest(0, &z);
    let r1: Vec<f64> = z
        .iter()
        .zip(cb.entry(0, best0))
        .map(|(a, b)| a - b)
        .collect();
    for k in 0..cb.k() {
        let d2: f64 = r1
            .iter()
            .zip(cb.entry(1, k))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((logits[1][k] + d2 / 0.7).abs() < 1e-12);
    }
}

#[test]
fn offset_stays_within_scale() {
    let env = EnvSpec::fixture("reach-7d").unwrap();
    let cb = build_codebooks(&env.quantizer, 2).unwrap();
    let head = PolicyHead::new(
        Role::Draft,
        &env.expert_gain,
        &HeadConfig {
            offset_scale: 0.05,
            ..HeadConfig::default_draft()
        },
        2,
    )
    .unwrap();
    let mut rng = stream(5, Stream::Fixture, &[]);
    for _ in 0..200 {
        let state: Vec<f64> = (0..7)
            .map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let o = Observation {
            state,
            goal: vec![0.0; 7],
            step: 0,
        };
        let off = head.offset(&o, &cb).unwrap();
        assert!(off.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.05 + 1e-12);
    }
}

/// Softmax through sorted log-sum-exp, summed smallest-first.
fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    terms.sort_by(f64::total_cmp);
    let lse = m + terms.iter().sum::<f64>().ln();
    row.iter().map(|z| (z - lse).exp()).collect()
}

proptest! {
    #[test]
    fn softmax_matches_log_sum_exp_oracle(row in proptest::collection::vec(-600.0f64..600.0, 2..40)) {
        let b = normalize(std::slice::from_ref(&row)).unwrap();
        let oracle = softmax_oracle(&row);
        for (a, o) in b.dists[0].iter().zip(&oracle) {
            prop_assert!((a - o).abs() < 1e-12);
        }
        prop_assert!((b.dists[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
