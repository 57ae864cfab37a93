//! HTTP verification endpoints.
//!
//! | method | path                   | body            |
//! |--------|------------------------|-----------------|
//! | POST   | `/v1/verify/plan`      | [`VerifyRequest`] |
//! | POST   | `/v1/verify/execution` | [`VerifyRequest`] |
//! | GET    | `/healthz`             |                 |
//!
//! Invalid requests get 400, backend or answer-parse failures 502 (with the
//! raw reply when there is one) and timeouts 504.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::gateway::{compose_payload_grid, ChatBackend, ImageMode, ImagePart};
use crate::protocol::{
    build_exec_query_with, build_plan_query_with, exec_image_labels, parse_verdict, AnswerMode, DetectionQuery,
};
use crate::sample::TOOL_VERSION;
use crate::taxonomy::{Category, Kind};
use crate::template::Template;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePayload {
    #[serde(default = "default_media_type")]
    pub media_type: String,
    pub data_base64: String,
}

fn default_media_type() -> String {
    "image/png".into()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSet {
    /// One image per camera view, taken before the step.
    pub start: Vec<ImagePayload>,
    /// Same views after the step. Execution requests only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub end: Vec<ImagePayload>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    #[serde(default)]
    pub answer_mode: AnswerMode,
    #[serde(default)]
    pub image_mode: ImageMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub kind: Kind,
    pub task_instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask_instruction: Option<String>,
    pub images: ImageSet,
    #[serde(default)]
    pub options: VerifyOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub success: bool,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub latency_ms: u64,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateIds {
    pub plan: String,
    pub execution: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub ok: bool,
    pub version: String,
    pub template_id: TemplateIds,
    /// `reachable` or `unreachable`.
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Upper bound on one backend call, retries included.
    pub request_timeout_s: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            model_id: "detector".into(),
            max_tokens: 512,
            temperature: 0.0,
            request_timeout_s: 300,
        }
    }
}

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState {
    backend: Arc<dyn ChatBackend>,
    plan_template: Arc<Template>,
    exec_template: Arc<Template>,
    cfg: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: ServiceConfig) -> Self {
        AppState::with_templates(
            backend,
            cfg,
            Template::builtin("detect_plan"),
            Template::builtin("detect_exec"),
        )
    }

    pub fn with_templates(
        backend: Arc<dyn ChatBackend>,
        cfg: ServiceConfig,
        plan_template: Template,
        exec_template: Template,
    ) -> Self {
        AppState {
            backend,
            plan_template: Arc::new(plan_template),
            exec_template: Arc::new(exec_template),
            cfg: Arc::new(cfg),
        }
    }

    fn template_ids(&self) -> TemplateIds {
        TemplateIds {
            plan: self.plan_template.id().to_string(),
            execution: self.exec_template.id().to_string(),
        }
    }
}

#[derive(Debug)]
pub enum ServiceError {
    BadRequest(String),
    Backend { message: String, raw_text: Option<String> },
    Timeout,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ServiceError::BadRequest(error) => (StatusCode::BAD_REQUEST, ErrorResponse { error, raw_text: None }),
            ServiceError::Backend { message, raw_text } => (
                StatusCode::BAD_GATEWAY,
                ErrorResponse {
                    error: message,
                    raw_text,
                },
            ),
            ServiceError::Timeout => (
                StatusCode::GATEWAY_TIMEOUT,
                ErrorResponse {
                    error: "backend timed out".into(),
                    raw_text: None,
                },
            ),
        };
        (status, Json(body)).into_response()
    }
}

fn payloads_to_parts(payloads: &[ImagePayload], labels: impl Iterator<Item = String>) -> Result<Vec<ImagePart>> {
    payloads
        .iter()
        .zip(labels)
        .map(|(p, label)| {
            let part = ImagePart {
                label,
                media_type: p.media_type.clone(),
                data_base64: p.data_base64.clone(),
            };
            part.decode_bytes()?;
            Ok(part)
        })
        .collect()
}

/// Checks the request against `kind` and builds the detection query.
pub fn build_verify_query(
    req: &VerifyRequest,
    kind: Kind,
    state: &AppState,
) -> std::result::Result<DetectionQuery, ServiceError> {
    let bad = |m: String| ServiceError::BadRequest(m);
    if req.kind != kind {
        return Err(bad(format!("request kind {} sent to the {} endpoint", req.kind, kind)));
    }
    if req.task_instruction.trim().is_empty() {
        return Err(bad("task_instruction is empty".into()));
    }
    let to_bad = |e: Error| ServiceError::BadRequest(e.to_string());
    match kind {
        Kind::Plan => {
            let plan = req
                .plan
                .as_ref()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| bad("plan requests need a non-empty plan".into()))?;
            if req.images.start.is_empty() {
                return Err(bad("plan requests need at least one image".into()));
            }
            if !req.images.end.is_empty() {
                return Err(bad("plan requests carry no end images".into()));
            }
            let parts = payloads_to_parts(
                &req.images.start[..1],
                std::iter::once("initial front view".to_string()),
            )
            .map_err(to_bad)?;
            build_plan_query_with(
                &state.plan_template,
                &req.task_instruction,
                plan,
                parts,
                req.options.answer_mode,
            )
            .map_err(to_bad)
        }
        Kind::Execution => {
            let subtask = req
                .subtask_instruction
                .as_deref()
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| bad("execution requests need subtask_instruction".into()))?;
            let (start, end) = (&req.images.start, &req.images.end);
            if start.is_empty() || start.len() != end.len() {
                return Err(bad(format!(
                    "start and end must carry the same non-zero number of views (got {} and {})",
                    start.len(),
                    end.len()
                )));
            }
            let labels = exec_image_labels(start.len());
            let mut parts = payloads_to_parts(start, labels[..start.len()].iter().cloned()).map_err(to_bad)?;
            parts.extend(payloads_to_parts(end, labels[start.len()..].iter().cloned()).map_err(to_bad)?);
            if req.options.image_mode == ImageMode::Grid {
                let (s, e) = parts.split_at(start.len());
                parts = vec![compose_payload_grid(s, e).map_err(to_bad)?];
            }
            build_exec_query_with(
                &state.exec_template,
                &req.task_instruction,
                subtask,
                parts,
                req.options.image_mode,
                req.options.answer_mode,
            )
            .map_err(to_bad)
        }
    }
}

async fn verify(state: AppState, kind: Kind, body: Bytes) -> std::result::Result<Json<VerifyResponse>, ServiceError> {
    let started = Instant::now();
    let req: VerifyRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))?;
    let query = build_verify_query(&req, kind, &state)?;
    let chat = query.to_chat_request(&state.cfg.model_id, state.cfg.max_tokens, state.cfg.temperature);
    let backend = state.backend.clone();
    let call = tokio::task::spawn_blocking(move || backend.complete(&chat));
    let reply = match tokio::time::timeout(Duration::from_secs(state.cfg.request_timeout_s), call).await {
        Err(_) => return Err(ServiceError::Timeout),
        Ok(Err(join)) => {
            return Err(ServiceError::Backend {
                message: format!("backend task failed: {join}"),
                raw_text: None,
            })
        }
        Ok(Ok(Err(Error::Timeout { .. }))) => return Err(ServiceError::Timeout),
        Ok(Ok(Err(e))) => {
            return Err(ServiceError::Backend {
                message: e.to_string(),
                raw_text: None,
            })
        }
        Ok(Ok(Ok(reply))) => reply,
    };
    let verdict = parse_verdict(&reply.text, kind).map_err(|e| ServiceError::Backend {
        message: format!("unparseable detector reply: {e}"),
        raw_text: Some(reply.text.clone()),
    })?;
    let latency_ms = started.elapsed().as_millis() as u64;
    info!(%kind, success = verdict.success, category = %verdict.category, latency_ms, "verified");
    Ok(Json(VerifyResponse {
        success: verdict.success,
        category: verdict.category,
        reasoning: verdict.reasoning,
        latency_ms,
        template_id: query.template_id,
    }))
}

async fn verify_plan(State(state): State<AppState>, body: Bytes) -> Response {
    verify(state, Kind::Plan, body).await.into_response()
}

async fn verify_execution(State(state): State<AppState>, body: Bytes) -> Response {
    verify(state, Kind::Execution, body).await.into_response()
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let backend = state.backend.clone();
    let reachable = tokio::task::spawn_blocking(move || backend.probe())
        .await
        .unwrap_or(false);
    Json(Health {
        ok: reachable,
        version: TOOL_VERSION.to_string(),
        template_id: state.template_ids(),
        backend: if reachable { "reachable" } else { "unreachable" }.into(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/verify/plan", post(verify_plan))
        .route("/v1/verify/execution", post(verify_execution))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own thread and runtime.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn start(addr: SocketAddr, state: AppState) -> Result<Self> {
        let listener = std::net::TcpListener::bind(addr).map_err(|e| Error::io(addr.to_string(), e))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::io(addr.to_string(), e))?;
        let addr = listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                serve(listener, state, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(RunningServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| {
                warn!("server thread panicked");
                Ok(())
            }),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
