//! JSON-over-HTTP access to a trained model: component metadata, the
//! reference mesh, slider decoding and control-point fitting.
//!
//! Every endpoint is a pure function of the loaded model and the request,
//! so clients keep their own slider and constraint state.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use meshmodes::editing::{displacement_magnitudes, ControlConstraint, Editor, FitOptions, LatentWeight};
use meshmodes::stacked::{extract_components, load_model, ComponentSet, StackedParams};
use meshmodes::{EditError, FormatError, TriangleMesh};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_PORT: u16 = 7878;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no model loaded")]
    NoModel,
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NonFinite(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(ErrorBody { error: self.to_string(), code: status.as_u16() })).into_response()
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::BadIndex { .. } | EditError::BadConstraint { .. } | EditError::NoConstraints => {
                ApiError::BadRequest(e.to_string())
            }
            EditError::NonFiniteWeight { .. } | EditError::NonFiniteStart => ApiError::NonFinite(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshJson {
    /// `x, y, z` per vertex.
    pub positions: Vec<f64>,
    /// Three vertex indices per triangle.
    pub faces: Vec<usize>,
}

impl From<&TriangleMesh> for MeshJson {
    fn from(m: &TriangleMesh) -> Self {
        Self {
            positions: m.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            faces: m.faces.iter().flatten().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentJson {
    pub index: usize,
    pub strength: f64,
    pub center: usize,
    /// Probe magnitude the component was rendered at.
    pub magnitude: f64,
    pub region: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondLevelJson {
    pub ae: usize,
    pub parent: usize,
    pub kept: Vec<ComponentJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub levels: u8,
    /// Latent size of the first-level autoencoder.
    pub first_level: usize,
    /// Kept first-level components.
    pub first_level_kept: Vec<ComponentJson>,
    pub second_level: Vec<SecondLevelJson>,
    pub d: [f64; 2],
    pub vertex_count: usize,
    pub face_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub mesh: MeshJson,
    /// Distance of every vertex from its reference position.
    pub displacement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResponse {
    pub weights: Vec<LatentWeight>,
    pub mesh: MeshJson,
    pub residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Constraints on the pinned anchor vertex, which are ignored.
    pub skipped: Vec<usize>,
    pub aborted: bool,
}

/// A model with its components extracted once at load time.
pub struct LoadedModel {
    pub model: StackedParams,
    pub components: ComponentSet,
}

impl LoadedModel {
    pub fn new(model: StackedParams) -> Self {
        let cfg = &model.config;
        let components = extract_components(&model, &model.graph(), cfg.probe_level1, cfg.probe_level2);
        Self { model, components }
    }

    pub fn summary(&self) -> ModelJson {
        let json = |c: &meshmodes::stacked::Component| ComponentJson {
            index: c.index,
            strength: c.strength,
            center: c.center,
            magnitude: c.magnitude,
            region: c.region(),
        };
        let cfg = &self.model.config;
        ModelJson {
            levels: 2,
            first_level: self.model.ae0.kz,
            first_level_kept: self.components.kept().filter(|c| c.level == 1).map(json).collect(),
            second_level: (0..self.model.second.len())
                .map(|ae| SecondLevelJson {
                    ae,
                    parent: ae,
                    kept: self.components.kept().filter(|c| c.level == 2 && c.ae == ae).map(json).collect(),
                })
                .collect(),
            d: [cfg.d1, cfg.d2],
            vertex_count: self.model.vertex_count(),
            face_count: self.model.reference.face_count(),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    model: Option<Arc<LoadedModel>>,
}

impl AppState {
    pub fn empty() -> Self {
        Self { model: None }
    }

    pub fn with_model(model: StackedParams) -> Self {
        Self { model: Some(Arc::new(LoadedModel::new(model))) }
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self, FormatError> {
        Ok(Self::with_model(load_model(path)?))
    }

    fn loaded(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.clone().ok_or(ApiError::NoModel)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/reference", get(reference))
        .route("/api/decode", post(decode))
        .route("/api/fit", post(fit))
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelJson>, ApiError> {
    Ok(Json(state.loaded()?.summary()))
}

async fn reference(State(state): State<AppState>) -> Result<Json<MeshJson>, ApiError> {
    Ok(Json(MeshJson::from(&state.loaded()?.model.reference)))
}

fn parse_body(body: &[u8]) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::BadRequest("request body must be a JSON object".into())),
        Err(e) => Err(ApiError::BadRequest(format!("malformed JSON: {e}"))),
    }
}

fn list<'a>(map: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a [Value], ApiError> {
    match map.get(key) {
        Some(Value::Array(items)) => Ok(items),
        _ => Err(ApiError::BadRequest(format!("`{key}` must be a list"))),
    }
}

fn field<'a>(item: &'a Value, key: &str, at: &str) -> Result<&'a Value, ApiError> {
    item.get(key).ok_or_else(|| ApiError::BadRequest(format!("{at}: missing `{key}`")))
}

fn index(value: &Value, what: &str) -> Result<usize, ApiError> {
    value
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| ApiError::BadRequest(format!("{what} must be a non-negative integer")))
}

/// Numbers must be finite; `null` and the usual spellings of NaN and
/// infinity are rejected as non-finite, anything else as malformed.
fn scalar(value: &Value, what: &str) -> Result<f64, ApiError> {
    match value {
        Value::Number(n) => match n.as_f64() {
            Some(v) if v.is_finite() => Ok(v),
            _ => Err(ApiError::NonFinite(format!("{what} is not finite"))),
        },
        Value::Null => Err(ApiError::NonFinite(format!("{what} is not finite"))),
        Value::String(s) if s.trim_start_matches(['-', '+']).to_ascii_lowercase().starts_with(['n', 'i']) => {
            Err(ApiError::NonFinite(format!("{what} is not finite")))
        }
        _ => Err(ApiError::BadRequest(format!("{what} must be a number"))),
    }
}

fn parse_weights(body: &[u8]) -> Result<Vec<LatentWeight>, ApiError> {
    let map = parse_body(body)?;
    list(&map, "weights")?
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let at = format!("weights[{i}]");
            let level = index(field(item, "level", &at)?, &format!("{at}.level"))?;
            let level = u8::try_from(level).map_err(|_| ApiError::BadRequest(format!("{at}.level out of range")))?;
            Ok(LatentWeight {
                level,
                ae: index(field(item, "ae", &at)?, &format!("{at}.ae"))?,
                index: index(field(item, "index", &at)?, &format!("{at}.index"))?,
                value: scalar(field(item, "value", &at)?, &format!("{at}.value"))?,
            })
        })
        .collect()
}

fn parse_constraints(body: &[u8]) -> Result<Vec<ControlConstraint>, ApiError> {
    let map = parse_body(body)?;
    let items = list(&map, "constraints")?;
    if items.is_empty() {
        return Err(ApiError::BadRequest("at least one constraint is required".into()));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let at = format!("constraints[{i}]");
            let target = match field(item, "target", &at)? {
                Value::Array(t) if t.len() == 3 => [
                    scalar(&t[0], &format!("{at}.target"))?,
                    scalar(&t[1], &format!("{at}.target"))?,
                    scalar(&t[2], &format!("{at}.target"))?,
                ],
                _ => return Err(ApiError::BadRequest(format!("{at}.target must be three numbers"))),
            };
            let weight = match item.get("weight") {
                Some(w) => scalar(w, &format!("{at}.weight"))?,
                None => 1.0,
            };
            Ok(ControlConstraint {
                vertex: index(field(item, "vertex", &at)?, &format!("{at}.vertex"))?,
                target,
                weight,
            })
        })
        .collect()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

/// Mesh and displacement for slider weights.
pub fn decode_weights(loaded: &LoadedModel, weights: &[LatentWeight]) -> Result<DecodeResponse, ApiError> {
    let editor = Editor::new(&loaded.model)?;
    let mesh = editor.apply(weights)?;
    let displacement = displacement_magnitudes(&mesh, &loaded.model.reference);
    Ok(DecodeResponse { mesh: MeshJson::from(&mesh), displacement })
}

/// Latents fitted to control points, with the resulting mesh.
pub fn fit_constraints(loaded: &LoadedModel, constraints: &[ControlConstraint]) -> Result<FitResponse, ApiError> {
    let editor = Editor::new(&loaded.model)?;
    let sol = editor.fit(constraints, &FitOptions::default())?;
    Ok(FitResponse {
        weights: sol.weights(),
        mesh: MeshJson::from(&sol.mesh),
        residual: sol.residual,
        objective: sol.objective,
        iterations: sol.iterations,
        skipped: sol.skipped,
        aborted: sol.aborted,
    })
}

async fn decode(State(state): State<AppState>, body: Bytes) -> Result<Json<DecodeResponse>, ApiError> {
    let loaded = state.loaded()?;
    let weights = parse_weights(&body)?;
    Ok(Json(blocking(move || decode_weights(&loaded, &weights)).await?))
}

async fn fit(State(state): State<AppState>, body: Bytes) -> Result<Json<FitResponse>, ApiError> {
    let loaded = state.loaded()?;
    let constraints = parse_constraints(&body)?;
    Ok(Json(blocking(move || fit_constraints(&loaded, &constraints)).await?))
}
