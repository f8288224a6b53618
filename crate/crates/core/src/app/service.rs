//! JSON-over-HTTP inference service.
//!
//! Models are loaded once on a blocking thread and then shared read-only
//! between request handlers; every request seeds its own RNG. Requests that
//! arrive before loading finishes get 503.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Stage;
use super::pipeline::{InferenceModels, Pipeline};
use crate::error::Error;
use crate::face_model::{MotionFrame, MotionSequence, PoseAngles};
use crate::motion_lm::{GenerationParams, MAX_MOTION_TOKENS};
use crate::text_codec::{Field, Keywords};

/// Longest motion accepted by describe and decode.
pub const MAX_REQUEST_FRAMES: usize = 150;

enum Load {
    Loading,
    Ready(Arc<InferenceModels>),
    Failed(String),
}

pub struct ServiceState {
    load: RwLock<Load>,
    checkpoints: BTreeMap<String, String>,
}

impl ServiceState {
    pub fn loading(checkpoints: BTreeMap<String, String>) -> Arc<Self> {
        Arc::new(ServiceState { load: RwLock::new(Load::Loading), checkpoints })
    }

    pub fn ready(models: InferenceModels, checkpoints: BTreeMap<String, String>) -> Arc<Self> {
        let state = Self::loading(checkpoints);
        state.set_ready(models);
        state
    }

    pub fn set_ready(&self, models: InferenceModels) {
        *self.load.write().expect("state lock poisoned") = Load::Ready(Arc::new(models));
    }

    pub fn set_failed(&self, message: String) {
        *self.load.write().expect("state lock poisoned") = Load::Failed(message);
    }

    fn models(&self) -> Result<Arc<InferenceModels>, ApiError> {
        match &*self.load.read().expect("state lock poisoned") {
            Load::Ready(m) => Ok(Arc::clone(m)),
            Load::Loading => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "models are loading".into())),
            Load::Failed(msg) => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("model load failed: {msg}"))),
        }
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyPrompt => StatusCode::UNPROCESSABLE_ENTITY,
            Error::TooLong { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Error::InvalidArgument(_)
            | Error::TokenOutOfRange { .. }
            | Error::TooShort { .. }
            | Error::Shape { .. }
            | Error::NonFinite(_)
            | Error::LengthMismatch { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameJson {
    pub expr: Vec<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl FrameJson {
    fn from_frame(f: &MotionFrame) -> Self {
        FrameJson { expr: f.expr.clone(), yaw: f.pose.yaw, pitch: f.pose.pitch, roll: f.pose.roll }
    }
}

fn to_motion(frames: &[FrameJson], expr_dim: usize) -> Result<MotionSequence, ApiError> {
    if frames.len() > MAX_REQUEST_FRAMES {
        return Err(ApiError(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{} frames exceed the limit of {MAX_REQUEST_FRAMES}", frames.len()),
        ));
    }
    if let Some(i) = frames.iter().position(|f| f.expr.len() != expr_dim) {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("frame {i} has {} coefficients, expected {expr_dim}", frames[i].expr.len())));
    }
    let frames = frames
        .iter()
        .map(|f| MotionFrame { expr: f.expr.clone(), pose: PoseAngles::new(f.yaw, f.pitch, f.roll) })
        .collect();
    Ok(MotionSequence::new(frames)?)
}

fn encode_vertices(models: &InferenceModels, motion: &MotionSequence) -> Result<Vec<String>, ApiError> {
    Ok(models
        .vertices(motion)?
        .iter()
        .map(|frame| BASE64.encode(frame.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()))
        .collect())
}

#[derive(Debug, Deserialize)]
struct GenerateRequest {
    prompt: String,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    top_k: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub tokens: Vec<usize>,
    pub frames: Vec<FrameJson>,
    pub vertices: Vec<String>,
    pub duration_s: f64,
}

#[derive(Debug, Deserialize)]
struct DescribeRequest {
    #[serde(default)]
    tokens: Option<Vec<usize>>,
    #[serde(default)]
    frames: Option<Vec<FrameJson>>,
    #[serde(default)]
    question: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub text: String,
    pub keywords: Keywords,
}

#[derive(Debug, Deserialize)]
struct DecodeRequest {
    frames: Vec<FrameJson>,
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    let status = match &*state.load.read().expect("state lock poisoned") {
        Load::Ready(_) => "ok",
        Load::Loading => "loading",
        Load::Failed(_) => "failed",
    };
    let code = if status == "ok" { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(json!({ "status": status, "checkpoints": state.checkpoints }))).into_response()
}

async fn generate(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = parse(&body)?;
    let models = state.models()?;
    let params = GenerationParams {
        temperature: req.temperature.unwrap_or(0.0),
        top_k: req.top_k.unwrap_or(0),
        seed: req.seed.unwrap_or(0),
        max_new_tokens: MAX_MOTION_TOKENS,
    };
    blocking(move || {
        let (tokens, motion) = models.generate(&req.prompt, &params)?;
        Ok(Json(GenerateResponse {
            vertices: encode_vertices(&models, &motion)?,
            frames: motion.frames().iter().map(FrameJson::from_frame).collect(),
            duration_s: motion.duration_s(),
            tokens,
        }))
    })
    .await
}

async fn describe(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<DescribeResponse>, ApiError> {
    let req: DescribeRequest = parse(&body)?;
    let models = state.models()?;
    blocking(move || {
        let params = GenerationParams::greedy();
        let question = req.question.as_deref();
        let (text, keywords) = match (req.tokens, req.frames) {
            (Some(tokens), None) => {
                if tokens.len() > MAX_MOTION_TOKENS {
                    return Err(ApiError(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        format!("{} tokens exceed the limit of {MAX_MOTION_TOKENS}", tokens.len()),
                    ));
                }
                if tokens.is_empty() {
                    return Err(ApiError(StatusCode::BAD_REQUEST, "tokens is empty".into()));
                }
                models.describe_tokens(&tokens, question, &params)?
            }
            (None, Some(frames)) => {
                let motion = to_motion(&frames, models.face.expr_dim())?;
                models.describe_motion(&motion, question, &params)?
            }
            _ => return Err(ApiError(StatusCode::BAD_REQUEST, "exactly one of tokens or frames is required".into())),
        };
        Ok(Json(DescribeResponse { text, keywords }))
    })
    .await
}

async fn decode(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: DecodeRequest = parse(&body)?;
    let models = state.models()?;
    blocking(move || {
        let motion = to_motion(&req.frames, models.face.expr_dim())?;
        Ok(Json(json!({ "vertices": encode_vertices(&models, &motion)? })))
    })
    .await
}

async fn lexicon(State(state): State<Arc<ServiceState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let models = state.models()?;
    let lex = &models.lexicon;
    let archetypes: Vec<_> = lex.archetypes.iter().map(|a| json!({ "name": a.name, "surfaces": a.surfaces })).collect();
    let motions: Vec<_> = lex.motions.iter().map(|m| json!({ "name": m.name, "phrase": m.phrase, "surfaces": m.surfaces })).collect();
    let intensities: Vec<_> = lex.intensity_surfaces.iter().map(|(i, s)| json!({ "name": i.name(), "surfaces": s })).collect();
    let surfaces: Vec<_> = models
        .keywords
        .surfaces()
        .into_iter()
        .map(|(surface, field, label)| {
            let field = match field {
                Field::Emotion => "emotion",
                Field::Intensity => "intensity",
                Field::Motion => "motion",
            };
            json!({ "surface": surface, "field": field, "label": label })
        })
        .collect();
    Ok(Json(json!({
        "version": lex.version,
        "archetypes": archetypes,
        "motions": motions,
        "intensities": intensities,
        "keywords": surfaces,
    })))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/generate", post(generate))
        .route("/api/describe", post(describe))
        .route("/api/decode", post(decode))
        .route("/api/lexicon", get(lexicon))
        .with_state(state)
}

/// Checkpoint directories reported by `/api/health`.
pub fn checkpoint_paths(pipeline: &Pipeline) -> BTreeMap<String, String> {
    [Stage::Vqvae, Stage::M2l, Stage::L2m]
        .iter()
        .map(|s| (s.name().to_string(), s.dir(&pipeline.cfg).display().to_string()))
        .collect()
}

/// Binds `addr`, starts loading checkpoints in the background and serves
/// until the process is stopped.
pub async fn serve(pipeline: Pipeline, addr: SocketAddr) -> crate::Result<()> {
    let state = ServiceState::loading(checkpoint_paths(&pipeline));
    let loader = Arc::clone(&state);
    tokio::task::spawn_blocking(move || match pipeline.load_inference() {
        Ok(models) => {
            log::info!("models loaded");
            loader.set_ready(models);
        }
        Err(e) => {
            log::error!("model load failed: {e}");
            loader.set_failed(e.to_string());
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(|e| Error::io(addr.to_string(), e))
}
