mod common;

use std::io::Read;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use adahi::proto::{
    decode_reply, decode_request, encode_reply, encode_request, ClientConfig, DelayConfig, Health,
    HttpVerifier, ServerHandle, ServerTiming, SimulatedLink, TransportError, Verifier, VerifyReply,
    DEFAULT_MAX_PAYLOAD_BYTES,
};
use common::proto::{reach_service, tiny_request, tiny_service};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a checked-in golden file; `ADAHI_BLESS=1` rewrites it.
fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden(name);
    if std::env::var_os("ADAHI_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(
        String::from_utf8_lossy(bytes),
        String::from_utf8_lossy(&want),
        "{name} drifted"
    );
}

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn no_delay() -> DelayConfig {
    DelayConfig {
        enabled: false,
        ..DelayConfig::default()
    }
}

fn client(endpoint: String, retries: u32, timeout_ms: u64) -> HttpVerifier {
    let cfg = ClientConfig {
        endpoint,
        retries,
        timeout_ms,
        injected_delay: no_delay(),
        ..ClientConfig::default()
    };
    HttpVerifier::new(&cfg, 1).unwrap()
}

#[test]
fn golden_request_and_reply_bytes() {
    let req = tiny_request();
    let bytes = encode_request(&req).unwrap();
    check_golden("request_n1_k2.json", &bytes);
    assert_eq!(
        encode_request(&decode_request(&bytes, DEFAULT_MAX_PAYLOAD_BYTES).unwrap()).unwrap(),
        bytes
    );

    let svc = tiny_service(ServerTiming::Fixed(250), DEFAULT_MAX_PAYLOAD_BYTES);
    let (code, reply) = svc.handle_bytes(&bytes);
    assert_eq!(code.as_u16(), 200);
    check_golden("reply_n1_k2.json", &reply);
    assert_eq!(encode_reply(&decode_reply(&reply).unwrap()).unwrap(), reply);
}

#[test]
fn replay_is_byte_identical() {
    let (svc, reqs, _) = reach_service(ServerTiming::Fixed(900));
    let delay = DelayConfig::default();
    let run = || {
        let mut link = SimulatedLink::new(svc.clone(), &delay, 5).unwrap();
        reqs.iter()
            .take(200)
            .map(|r| {
                let ex = link.verify(r).unwrap();
                (encode_reply(&ex.reply).unwrap(), ex.rtt)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn http_matches_in_process_on_fixture_requests() {
    let (svc, reqs, _) = reach_service(ServerTiming::Measured);
    let server = ServerHandle::spawn(svc.clone(), any_port()).unwrap();
    let mut http = client(server.endpoint(), 3, 2000);
    for r in &reqs {
        let local = svc.serve(r);
        let ex = http.verify(r).unwrap();
        assert!(
            ex.reply.same_content(&local),
            "request {} differs",
            r.episode_id
        );
        assert!(ex.rtt > Duration::ZERO);
    }
    server.shutdown();
}

#[test]
fn injected_delay_is_felt() {
    let server = ServerHandle::spawn(
        tiny_service(ServerTiming::Measured, DEFAULT_MAX_PAYLOAD_BYTES),
        any_port(),
    )
    .unwrap();
    let cfg = ClientConfig {
        endpoint: server.endpoint(),
        injected_delay: DelayConfig {
            enabled: true,
            mean_ms: 12.0,
            jitter_ms: 0.0,
        },
        ..ClientConfig::default()
    };
    let mut http = HttpVerifier::new(&cfg, 1).unwrap();
    let ex = http.verify(&tiny_request()).unwrap();
    assert!(ex.rtt >= Duration::from_millis(12), "rtt {:?}", ex.rtt);
}

#[test]
fn checksum_mismatch_is_typed() {
    let server = ServerHandle::spawn(
        tiny_service(ServerTiming::Measured, DEFAULT_MAX_PAYLOAD_BYTES),
        any_port(),
    )
    .unwrap();
    let mut req = tiny_request();
    req.codebook_checksum = "0".repeat(64);
    let err = client(server.endpoint(), 3, 2000).verify(&req).unwrap_err();
    assert!(
        matches!(err, TransportError::ChecksumMismatch(_)),
        "{err:?}"
    );

    let raw = reqwest::blocking::Client::new()
        .post(format!("{}/verify", server.endpoint()))
        .body(encode_request(&req).unwrap())
        .send()
        .unwrap();
    assert_eq!(raw.status().as_u16(), 409);
}

#[test]
fn malformed_and_oversize_bodies() {
    let server =
        ServerHandle::spawn(tiny_service(ServerTiming::Measured, 512), any_port()).unwrap();
    let http = reqwest::blocking::Client::new();
    let url = format!("{}/verify", server.endpoint());
    let bad = http
        .post(&url)
        .body("{\"protocol_version\":1}")
        .send()
        .unwrap();
    assert_eq!(bad.status().as_u16(), 400);
    let reply: VerifyReply = serde_json::from_slice(&bad.bytes().unwrap()).unwrap();
    assert!(reply.detail.unwrap().contains("body"));
    let huge = http.post(&url).body(vec![b' '; 4096]).send().unwrap();
    assert_eq!(huge.status().as_u16(), 413);
}

#[test]
fn health_reports_loaded_codebooks() {
    let svc = tiny_service(ServerTiming::Measured, DEFAULT_MAX_PAYLOAD_BYTES);
    let want = svc.health();
    let server = ServerHandle::spawn(svc, any_port()).unwrap();
    let body = reqwest::blocking::get(format!("{}/health", server.endpoint()))
        .unwrap()
        .bytes()
        .unwrap();
    let got: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(got, want);
    assert_eq!((got.n, got.k, got.action_dim), (1, 2, 1));
}

#[test]
fn dropped_connections_are_retried_exactly() {
    let listener = TcpListener::bind(any_port()).unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicU32::new(0));
    let seen = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut s) = stream else { break };
            seen.fetch_add(1, Ordering::SeqCst);
            let mut buf = [0u8; 64];
            let _ = s.read(&mut buf);
            drop(s);
        }
    });
    let err = client(format!("http://{addr}"), 3, 2000)
        .verify(&tiny_request())
        .unwrap_err();
    assert_eq!(err.attempts(), 3, "{err:?}");
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind(any_port()).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for s in listener.incoming().flatten() {
            held.push(s);
        }
    });
    let err = client(format!("http://{addr}"), 2, 100)
        .verify(&tiny_request())
        .unwrap_err();
    assert_eq!(err, TransportError::Timeout { attempts: 2 });
}

#[test]
fn unreachable_server_is_a_connection_error() {
    // bind then drop to find a port nobody listens on
    let addr = TcpListener::bind(any_port()).unwrap().local_addr().unwrap();
    let err = client(format!("http://{addr}"), 2, 500)
        .verify(&tiny_request())
        .unwrap_err();
    assert!(
        matches!(err, TransportError::Connection { attempts: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn client_refuses_oversize_payload() {
    let cfg = ClientConfig {
        max_payload_bytes: 64,
        injected_delay: no_delay(),
        ..ClientConfig::default()
    };
    let err = HttpVerifier::new(&cfg, 1)
        .unwrap()
        .verify(&tiny_request())
        .unwrap_err();
    assert!(matches!(err, TransportError::Malformed(_)));
}

proptest::proptest! {
    #[test]
    fn request_floats_round_trip_bit_exact(
        state in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL, 1),
        w in 1e-9f64..1.0,
    ) {
        let mut req = tiny_request();
        req.observation.state = state.clone();
        req.q_bundle = vec![vec![w / (1.0 + w), 1.0 / (1.0 + w)]];
        let back = decode_request(&encode_request(&req).unwrap(), DEFAULT_MAX_PAYLOAD_BYTES).unwrap();
        proptest::prop_assert_eq!(back.observation.state[0].to_bits(), state[0].to_bits());
        proptest::prop_assert_eq!(&back.q_bundle, &req.q_bundle);
    }
}

#[test]
fn matching_bundles_keep_the_draft() {
    let svc = tiny_service(ServerTiming::Fixed(1), DEFAULT_MAX_PAYLOAD_BYTES);
    let mut req = tiny_request();
    req.q_bundle = svc
        .target()
        .distribution(&req.observation(), svc.codebooks())
        .unwrap()
        .dists;
    for token in 0..50 {
        req.rng_token = Some(token);
        let reply = svc.serve(&req);
        assert_eq!(reply.final_indices, req.draft_indices);
        assert_eq!(reply.accepted_mask, vec![true]);
    }
}

#[test]
fn disjoint_one_hots_take_the_target() {
    use adahi::policy::{PolicyHead, Role};
    use adahi::specsamp::AdjustRule;
    // near-zero temperature makes the target one-hot on entry 0, nearest to 0.5 * (1.25 - 0.5)
    let cold = PolicyHead::with_gain(
        Role::Target,
        nalgebra::DMatrix::from_element(1, 1, 0.5),
        1e-6,
        0.0,
    )
    .unwrap();
    let svc = adahi::proto::VerifierService::new(
        common::proto::tiny_codebooks(),
        cold,
        AdjustRule::Residual,
        ServerTiming::Fixed(1),
        DEFAULT_MAX_PAYLOAD_BYTES,
    );
    let mut req = tiny_request();
    let p = svc
        .target()
        .distribution(&req.observation(), svc.codebooks())
        .unwrap()
        .dists[0]
        .clone();
    assert_eq!(p, vec![1.0, 0.0]);
    req.q_bundle = vec![vec![0.0, 1.0]];
    req.draft_indices = vec![1];
    let reply = svc.serve(&req);
    assert_eq!(reply.accepted_mask, vec![false]);
    assert_eq!(reply.final_indices, vec![0]);
}
