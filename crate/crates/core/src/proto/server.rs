use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::wire::{
    decode_request, encode_reply, ReplyStatus, VerifyReply, VerifyRequest, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::policy::PolicyHead;
use crate::quantizer::CodebookSet;
use crate::specsamp::{verify_tuple, AdjustRule};

/// How the server fills `server_compute_micros`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerTiming {
    /// Wall-clock time spent in the target head and verification.
    Measured,
    /// A constant, so replies are byte-identical across replays.
    Fixed(u64),
}

/// Immutable server state shared by all request handlers.
#[derive(Debug, Clone)]
pub struct VerifierService {
    codebooks: Arc<CodebookSet>,
    checksum: String,
    target: Arc<PolicyHead>,
    rule: AdjustRule,
    timing: ServerTiming,
    max_payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub protocol_version: u32,
    pub codebook_checksum: String,
    pub n: usize,
    pub k: usize,
    pub action_dim: usize,
}

impl VerifierService {
    pub fn new(
        codebooks: Arc<CodebookSet>,
        target: PolicyHead,
        rule: AdjustRule,
        timing: ServerTiming,
        max_payload_bytes: usize,
    ) -> Self {
        Self {
            checksum: codebooks.checksum(),
            codebooks,
            target: Arc::new(target),
            rule,
            timing,
            max_payload_bytes,
        }
    }

    pub fn codebooks(&self) -> &CodebookSet {
        &self.codebooks
    }

    pub fn target(&self) -> &PolicyHead {
        &self.target
    }

    pub fn max_payload_bytes(&self) -> usize {
        self.max_payload_bytes
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            protocol_version: PROTOCOL_VERSION,
            codebook_checksum: self.checksum.clone(),
            n: self.codebooks.n(),
            k: self.codebooks.k(),
            action_dim: self.codebooks.action_dim(),
        }
    }

    /// Verifies an already-decoded request. Never fails: problems become a
    /// non-ok status in the reply.
    pub fn serve(&self, req: &VerifyRequest) -> VerifyReply {
        if req.codebook_checksum != self.checksum {
            return VerifyReply::failure(
                ReplyStatus::ChecksumMismatch,
                format!("server codebooks are {}", self.checksum),
            );
        }
        let start = Instant::now();
        let result = serve_verify(req, &self.target, &self.codebooks, self.rule);
        let micros = match self.timing {
            ServerTiming::Measured => start.elapsed().as_micros() as u64,
            ServerTiming::Fixed(m) => m,
        };
        match result {
            Ok(mut reply) => {
                reply.server_compute_micros = micros;
                reply
            }
            Err(e) => VerifyReply::failure(ReplyStatus::Malformed, e.to_string()),
        }
    }

    /// Full byte-level handling, returning the HTTP status and reply body.
    pub fn handle_bytes(&self, body: &[u8]) -> (StatusCode, Vec<u8>) {
        let reply = match decode_request(body, self.max_payload_bytes) {
            Ok(req) => self.serve(&req),
            Err(e) => VerifyReply::failure(ReplyStatus::Malformed, e.to_string()),
        };
        let code = match reply.status {
            ReplyStatus::Ok => StatusCode::OK,
            ReplyStatus::ChecksumMismatch => StatusCode::CONFLICT,
            ReplyStatus::Malformed => StatusCode::BAD_REQUEST,
        };
        let bytes = encode_reply(&reply).unwrap_or_else(|e| {
            encode_reply(&VerifyReply::failure(ReplyStatus::Malformed, e.to_string()))
                .expect("failure reply has no floats")
        });
        (code, bytes)
    }

    pub fn router(self) -> Router {
        let limit = self.max_payload_bytes;
        Router::new()
            .route("/verify", post(verify_handler))
            .route("/health", get(health_handler))
            .layer(DefaultBodyLimit::max(limit))
            .with_state(Arc::new(self))
    }
}

/// Target bundle, speculative sampling and target offset for one request.
/// The verification stream is seeded by `rng_token`, or by fresh entropy when absent.
pub fn serve_verify(
    req: &VerifyRequest,
    target: &PolicyHead,
    cb: &CodebookSet,
    rule: AdjustRule,
) -> Result<VerifyReply> {
    let o = req.observation();
    let q = req.bundle();
    let draft = req.draft();
    if q.n() != cb.n() || q.k() != cb.k() {
        return Err(Error::protocol(
            "q_bundle",
            format!(
                "shape {}x{} does not match codebooks {}x{}",
                q.n(),
                q.k(),
                cb.n(),
                cb.k()
            ),
        ));
    }
    let p = target.distribution(&o, cb)?;
    let seed = req.rng_token.unwrap_or_else(|| rand::rng().random());
    let outcome = verify_tuple(&q, &p, &draft, seed, rule)?;
    Ok(VerifyReply {
        status: ReplyStatus::Ok,
        final_indices: outcome.final_codes.0,
        accepted_mask: outcome.accepted_mask,
        offset: target.offset(&o, cb)?,
        server_compute_micros: 0,
        detail: None,
    })
}

async fn verify_handler(State(svc): State<Arc<VerifierService>>, body: Bytes) -> impl IntoResponse {
    let (code, bytes) = svc.handle_bytes(&body);
    (code, [("content-type", "application/json")], bytes)
}

async fn health_handler(State(svc): State<Arc<VerifierService>>) -> Json<Health> {
    Json(svc.health())
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and serves until shut down.
    pub fn spawn(service: VerifierService, addr: SocketAddr) -> Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let bound = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("listener setup failed: {e}");
                        return;
                    }
                };
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, service.router())
                    .with_graceful_shutdown(shutdown)
                    .await
                {
                    tracing::error!("server stopped: {e}");
                }
            });
        });
        Ok(Self {
            addr: bound,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits (never, unless shut down).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
