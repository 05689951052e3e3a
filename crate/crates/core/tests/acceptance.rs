//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use adahi::calibrate::{
    calibrate_corpus, invert_threshold, realized_tr, CalibrationArtifact, CalibrationCorpus,
};
use adahi::env::FIXTURES;
use adahi::gate::{DeviationGate, RejectionModel};
use adahi::harness::{compare_modes, retarget, EpisodeRecord, Harness, Mode, RunConfig, RunReport};
use adahi::proto::{
    encode_reply, encode_request, ClientConfig, DelayConfig, HttpVerifier, ServerHandle,
    ServerTiming, Verifier, DEFAULT_MAX_PAYLOAD_BYTES, DEFAULT_RTT_MS,
};
use adahi::specsamp::{expected_rejection, AdjustRule};
use common::proto::{reach_service, tiny_request, tiny_service};
use common::{enumerate_verify_one, pair_grid};

/// Tolerance for "hybrid ≈ target_only" on task success.
const APPROX_SUCCESS: f64 = 0.05;
const EPISODES: usize = 200;

type Outcome = (bool, String);

fn fixture_config(env: &str) -> RunConfig {
    RunConfig {
        env: env.into(),
        episodes: EPISODES,
        ..RunConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let grid = pair_grid();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (q, p) in &grid {
        let (out, _) = enumerate_verify_one(q, p, AdjustRule::Residual);
        worst = out
            .iter()
            .zip(p)
            .map(|(o, t)| (o - t).abs())
            .fold(worst, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-12 && secs < 1.0,
        format!(
            "{} fixtures, max |P(final=k) - p_k| = {worst:.2e}, {secs:.3}s",
            grid.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for (q, p) in pair_grid() {
        let (_, rej) = enumerate_verify_one(&q, &p, AdjustRule::Residual);
        let overlap: f64 = q.iter().zip(&p).map(|(a, b)| a.min(*b)).sum();
        worst = worst.max((rej - (1.0 - overlap)).abs());
        worst = worst.max((rej - expected_rejection(&q, &p).unwrap()).abs());
    }
    (
        worst <= 1e-12,
        format!("max |P(reject) - (1 - sum min(p, q))| = {worst:.2e}"),
    )
}

struct Calibrated {
    harness: Harness,
    corpus: CalibrationCorpus,
    artifact: CalibrationArtifact,
}

fn calibrate(env: &str) -> (Calibrated, Duration) {
    let start = Instant::now();
    let harness = Harness::new(fixture_config(env)).unwrap();
    let settings = harness.config().calibration.settings();
    let corpus = harness.collect_corpus(settings.min_samples, 0).unwrap();
    let artifact = calibrate_corpus(
        &mut corpus.clone(),
        &settings,
        harness.config().gate.alpha,
        harness.provenance(),
    )
    .unwrap();
    (
        Calibrated {
            harness,
            corpus,
            artifact,
        },
        start.elapsed(),
    )
}

fn criterion_3(c: &Calibrated, took: Duration) -> Outcome {
    let rates: Vec<f64> = c.artifact.bins.iter().map(|b| b.rejection_rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0]);
    let r = c
        .artifact
        .linear_r
        .abs()
        .max(c.artifact.logarithmic_r.abs());
    let secs = took.as_secs_f64();
    let ok = c.artifact.samples >= 50_000 && monotone && r >= 0.90 && secs < 300.0;
    (
        ok,
        format!(
            "reach-2d: {} samples, {} bins monotone={monotone}, best form {} |r|={r:.4}, {secs:.1}s",
            c.artifact.samples,
            rates.len(),
            c.artifact.form
        ),
    )
}

fn criterion_4(c: &Calibrated) -> Outcome {
    let mut fresh = c.harness.collect_corpus(10_000, 1_000_000).unwrap();
    fresh.normalize(c.artifact.sigma);
    let deltas = fresh.deltas();
    let mut ok = true;
    let mut parts = Vec::new();
    for tr in [0.4, 0.6, 0.8] {
        let art = retarget(&c.corpus, &c.artifact, &c.harness, tr).unwrap();
        let got = realized_tr(&deltas, art.delta_th);
        ok &= (got - tr).abs() <= 0.03;
        parts.push(format!("TR {tr:.1} -> {got:.4} (th {:.3})", art.delta_th));
    }
    (
        ok,
        format!("fresh corpus of {}: {}", deltas.len(), parts.join(", ")),
    )
}

fn criterion_5() -> Outcome {
    let kitchen = RejectionModel::linear(0.068, 0.053);
    let k = invert_threshold(&kitchen, 0.104).unwrap();
    let ball = RejectionModel::logarithmic(0.214, 4.383, 0.160).unwrap();
    let tau = 0.214 * (1.0f64 + 4.383 * 0.890).ln() + 0.160;
    let b = invert_threshold(&ball, tau).unwrap();
    let ok = (k - 0.750).abs() <= 1e-6 && (b - 0.890).abs() <= 1e-6;
    (
        ok,
        format!("linear tau 0.104 -> {k:.9}, log tau {tau:.6} -> {b:.9}"),
    )
}

struct Compared {
    env: String,
    reports: Vec<RunReport>,
    adahi_records: Vec<EpisodeRecord>,
    harness: Harness,
    artifact: CalibrationArtifact,
}

impl Compared {
    fn report(&self, mode: &str) -> &RunReport {
        self.reports.iter().find(|r| r.mode == mode).unwrap()
    }
}

fn compare(env: &str, reuse: Option<Calibrated>) -> Compared {
    let c = reuse.unwrap_or_else(|| calibrate(env).0);
    let results = compare_modes(&c.harness, &c.artifact).unwrap();
    let adahi_records = results
        .iter()
        .find(|(_, r)| r.mode == "adahi")
        .unwrap()
        .0
        .clone();
    Compared {
        env: env.to_string(),
        reports: results.into_iter().map(|(_, r)| r).collect(),
        adahi_records,
        harness: c.harness,
        artifact: c.artifact,
    }
}

fn criterion_6(all: &[Compared], took: Duration) -> Outcome {
    let mut ok = took.as_secs_f64() < 900.0;
    let mut parts = Vec::new();
    for c in all {
        let s = |m: &str| c.report(m).task_success_rate;
        let e = |m: &str| c.report(m).mse;
        let order = s("draft_only") <= s("random")
            && s("random") <= s("adahi")
            && s("adahi") <= s("hybrid");
        let approx = (s("hybrid") - s("target_only")).abs() <= APPROX_SUCCESS;
        let ratio = s("adahi") >= 0.9 * s("hybrid");
        let mse = e("draft_only") >= e("random")
            && e("random") >= e("adahi")
            && e("adahi") >= e("hybrid");
        ok &= order && approx && ratio && mse;
        parts.push(format!(
            "{}: success {:.3}/{:.3}/{:.3}/{:.3}/{:.3} mse {:.4}/{:.4}/{:.4}/{:.4}/{:.4} [order={order} approx={approx} ratio={ratio} mse={mse}]",
            c.env,
            s("draft_only"),
            s("random"),
            s("adahi"),
            s("hybrid"),
            s("target_only"),
            e("draft_only"),
            e("random"),
            e("adahi"),
            e("hybrid"),
            e("target_only"),
        ));
    }
    (
        ok,
        format!("{} ({:.0}s)", parts.join("; "), took.as_secs_f64()),
    )
}

fn criterion_7(all: &[Compared]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in all {
        let (a, r) = (c.report("adahi"), c.report("random"));
        let (ta, tr) = (a.tsr.unwrap_or(f64::NAN), r.tsr.unwrap_or(f64::NAN));
        ok &= ta > tr;
        parts.push(format!(
            "{}: TSR adahi {ta:.3} vs random {tr:.3} at TR {:.3}/{:.3}",
            c.env, a.tr, r.tr
        ));
    }
    (ok, parts.join("; "))
}

fn criterion_8(all: &[Compared]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in all {
        let (a, h) = (c.report("adahi"), c.report("hybrid"));
        let gain = h.mean_per_action_latency_ms - a.mean_per_action_latency_ms;
        let need = 0.8 * (1.0 - a.tr) * DEFAULT_RTT_MS;
        let worst = a.throughput_p2_5 > h.throughput_p2_5;
        let mut gate = c.harness.gate_from_artifact(&c.artifact).unwrap();
        let again = c.harness.run(Mode::Adahi, &mut gate).unwrap();
        let deterministic = again == c.adahi_records;
        ok &= gain >= need && worst && deterministic;
        parts.push(format!(
            "{}: latency {:.2} vs {:.2} ms (gain {gain:.2} >= {need:.2}), p2.5 throughput {:.2} vs {:.2}, replay identical={deterministic}",
            c.env, a.mean_per_action_latency_ms, h.mean_per_action_latency_ms, a.throughput_p2_5, h.throughput_p2_5
        ));
    }
    (ok, parts.join("; "))
}

fn criterion_9() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let req_golden = std::fs::read(dir.join("request_n1_k2.json")).unwrap();
    let reply_golden = std::fs::read(dir.join("reply_n1_k2.json")).unwrap();
    let encode_both = || {
        let req = encode_request(&tiny_request()).unwrap();
        let svc = tiny_service(ServerTiming::Fixed(250), DEFAULT_MAX_PAYLOAD_BYTES);
        let reply = encode_reply(&svc.serve(&tiny_request())).unwrap();
        (req, reply)
    };
    let (r1, p1) = encode_both();
    let (r2, p2) = encode_both();
    let golden_ok = r1 == req_golden && p1 == reply_golden && r1 == r2 && p1 == p2;

    let (svc, reqs, _) = reach_service(ServerTiming::Measured);
    let server = ServerHandle::spawn(svc.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let cfg = ClientConfig {
        endpoint: server.endpoint(),
        timeout_ms: 2000,
        injected_delay: DelayConfig {
            enabled: false,
            ..DelayConfig::default()
        },
        ..ClientConfig::default()
    };
    let mut http = HttpVerifier::new(&cfg, 1).unwrap();
    let same = reqs
        .iter()
        .filter(|r| {
            http.verify(r)
                .map(|ex| ex.reply.same_content(&svc.serve(r)))
                .unwrap_or(false)
        })
        .count();
    server.shutdown();
    (
        golden_ok && same == reqs.len(),
        format!(
            "golden bytes equal={golden_ok}, transparent {same}/{} over HTTP",
            reqs.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for env in FIXTURES {
        let h = Harness::new(RunConfig {
            episodes: 50,
            ..fixture_config(env)
        })
        .unwrap();
        let alpha = h.config().gate.alpha;
        let draft = h
            .run(Mode::DraftOnly, &mut h.logging_gate().unwrap())
            .unwrap();
        let never = h
            .run(
                Mode::Adahi,
                &mut DeviationGate::new(alpha, 1.0, f64::INFINITY).unwrap(),
            )
            .unwrap();
        let inf_eq = draft.iter().zip(&never).all(|(d, a)| {
            d.success == a.success
                && d.steps.len() == a.steps.len()
                && d.steps
                    .iter()
                    .zip(&a.steps)
                    .all(|(x, y)| x.action == y.action && !y.transmitted)
        });
        let hybrid = h.run(Mode::Hybrid, &mut h.logging_gate().unwrap()).unwrap();
        let always = h
            .run(
                Mode::Adahi,
                &mut DeviationGate::new(alpha, 1.0, 0.0).unwrap(),
            )
            .unwrap();
        let (mut compared, mut equal) = (0usize, 0usize);
        for (a, hy) in always.iter().zip(&hybrid) {
            for (x, y) in a.steps.iter().zip(&hy.steps).skip(1) {
                compared += 1;
                equal += usize::from(x.transmitted == y.transmitted);
            }
        }
        let zero_eq = compared > 0 && equal == compared;
        ok &= inf_eq && zero_eq;
        parts.push(format!(
            "{env}: th=inf trajectory-equal={inf_eq}, th=0 decisions {equal}/{compared}"
        ));
    }
    (ok, parts.join("; "))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!(
        "criterion {n:>2} {verdict} {name}: {detail} [{:.1}s]",
        start.elapsed().as_secs_f64()
    );
    ok
}

fn main() -> ExitCode {
    let mut all = Vec::new();
    all.push(run(1, "speculative-sampling exactness", criterion_1));
    all.push(run(2, "rejection identity", criterion_2));
    all.push(run(5, "threshold round trips", criterion_5));
    all.push(run(9, "protocol stability", criterion_9));
    all.push(run(10, "degenerate-mode equivalences", criterion_10));

    let (reach, took) = calibrate("reach-2d");
    all.push(run(3, "calibration curve", || criterion_3(&reach, took)));
    all.push(run(4, "threshold/TR self-consistency", || {
        criterion_4(&reach)
    }));

    let start = Instant::now();
    let mut reuse = Some(reach);
    let compared: Vec<Compared> = FIXTURES
        .iter()
        .map(|env| {
            compare(
                env,
                if *env == "reach-2d" {
                    reuse.take()
                } else {
                    None
                },
            )
        })
        .collect();
    let took = start.elapsed();
    all.push(run(6, "mode ordering", || criterion_6(&compared, took)));
    all.push(run(7, "TSR advantage", || criterion_7(&compared)));
    all.push(run(8, "latency under injected delay", || {
        criterion_8(&compared)
    }));

    let passed = all.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed == all.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
