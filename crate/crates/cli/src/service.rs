//! JSON-over-HTTP prediction service.
//!
//! Handlers answer 503 until a checkpoint has been installed. Every
//! response is a pure function of the checkpoint and the request.

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use creepformer::checkpoint::Checkpoint;
use creepformer::data::{NormStats, DAILY_POINTS, FEATURE_NAMES};
use creepformer::explain::{Explainer, CONTEXT_POLICY};
use creepformer::infer::{rollout, write_trajectory_csv, RolloutRequest, Trajectory, MAX_HORIZON};
use creepformer::{AblationSpec, TataConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// A loaded checkpoint plus the attribution background.
#[derive(Debug)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub background: Vec<[f64; 3]>,
}

impl Loaded {
    /// Without an explicit background the attribution baseline is the single
    /// row of training feature means stored in the checkpoint.
    pub fn new(checkpoint: Checkpoint, background: Option<Vec<[f64; 3]>>) -> Self {
        let background = background.unwrap_or_else(|| vec![checkpoint.stats.feat_mean]);
        Self { checkpoint, background }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AppState {
    loaded: Arc<RwLock<Option<Arc<Loaded>>>>,
}

impl AppState {
    pub fn install(&self, loaded: Loaded) {
        *self.loaded.write().expect("state lock") = Some(Arc::new(loaded));
    }

    fn current(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded.read().expect("state lock").clone().ok_or(ApiError::NotReady)
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotReady,
    BadRequest { field: Option<&'static str>, message: String },
    Internal(String),
}

impl ApiError {
    fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self::BadRequest {
            field: Some(field),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "model not loaded" })),
            ApiError::BadRequest { field, message } => (StatusCode::BAD_REQUEST, json!({ "error": message, "field": field })),
            ApiError::Internal(message) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": message })),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub density_kg_m3: f64,
    pub fc_ksc: f64,
    pub e_ksc: f64,
    pub initial_creep_microstrain: f64,
    pub days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_value: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub days: Vec<usize>,
    pub creep: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub density_kg_m3: f64,
    pub fc_ksc: f64,
    pub e_ksc: f64,
    /// Creep readings for days 1..=n, microstrain. Defaults to a single
    /// day-1 reading of `initial_creep_microstrain`.
    #[serde(default)]
    pub prefix_microstrain: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_creep_microstrain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub features: Vec<String>,
    /// Model output units: microstrain divided by the creep scale.
    pub prediction: f64,
    pub phi0: f64,
    pub phi: Vec<f64>,
    pub prediction_microstrain: f64,
    pub context_policy: String,
    pub background_rows: usize,
}

#[derive(Debug, Serialize)]
struct ModelInfo<'a> {
    config: &'a TataConfig,
    ablation: &'a AblationSpec,
    params: usize,
    norm_stats: &'a NormStats,
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest {
        field: None,
        message: format!("invalid request body: {e}"),
    })
}

fn check_positive(field: &'static str, v: f64) -> Result<(), ApiError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ApiError::field(field, format!("{field} must be a positive number, got {v}")))
    }
}

impl PredictRequest {
    pub fn validate(&self) -> Result<RolloutRequest, ApiError> {
        check_positive("density_kg_m3", self.density_kg_m3)?;
        check_positive("fc_ksc", self.fc_ksc)?;
        check_positive("e_ksc", self.e_ksc)?;
        let c = self.initial_creep_microstrain;
        if !(c.is_finite() && c >= 0.0) {
            return Err(ApiError::field(
                "initial_creep_microstrain",
                format!("initial_creep_microstrain must be non-negative, got {c}"),
            ));
        }
        if !(1..=MAX_HORIZON).contains(&self.days) {
            return Err(ApiError::field("days", format!("days must lie in 1..={MAX_HORIZON}, got {}", self.days)));
        }
        Ok(RolloutRequest {
            density: self.density_kg_m3,
            fc: self.fc_ksc,
            e: self.e_ksc,
            initial_creep: c,
            horizon: self.days,
        })
    }
}

pub fn summarize(traj: Trajectory) -> PredictResponse {
    let n = traj.creep.len() as f64;
    let summary = Summary {
        final_value: traj.creep.last().copied().unwrap_or(f64::NAN),
        max: traj.creep.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: traj.creep.iter().sum::<f64>() / n,
    };
    PredictResponse {
        days: traj.days,
        creep: traj.creep,
        summary,
    }
}

async fn run_rollout(state: &AppState, req: PredictRequest) -> Result<Trajectory, ApiError> {
    let rollout_req = req.validate()?;
    let loaded = state.current()?;
    tokio::task::spawn_blocking(move || rollout(&loaded.checkpoint.model, &loaded.checkpoint.stats, &rollout_req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = parse_body(&body)?;
    Ok(Json(summarize(run_rollout(&state, req).await?)))
}

/// The trajectory for the query parameters as a CSV download.
async fn trajectory_csv(State(state): State<AppState>, query: Result<Query<PredictRequest>, axum::extract::rejection::QueryRejection>) -> Result<Response, ApiError> {
    let Query(req) = query.map_err(|e| ApiError::BadRequest {
        field: None,
        message: format!("invalid query: {}", e.body_text()),
    })?;
    let traj = run_rollout(&state, req).await?;
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &traj).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"trajectory.csv\""),
        ],
        buf,
    )
        .into_response())
}

async fn explain(State(state): State<AppState>, body: Bytes) -> Result<Json<ExplainResponse>, ApiError> {
    let req: ExplainRequest = parse_body(&body)?;
    check_positive("density_kg_m3", req.density_kg_m3)?;
    check_positive("fc_ksc", req.fc_ksc)?;
    check_positive("e_ksc", req.e_ksc)?;
    let prefix = match (req.prefix_microstrain, req.initial_creep_microstrain) {
        (Some(p), _) => p,
        (None, Some(c)) => vec![c],
        (None, None) => {
            return Err(ApiError::field(
                "prefix_microstrain",
                "one of prefix_microstrain or initial_creep_microstrain is required",
            ))
        }
    };
    if prefix.is_empty() || prefix.len() > DAILY_POINTS {
        return Err(ApiError::field(
            "prefix_microstrain",
            format!("prefix must hold 1..={DAILY_POINTS} readings, got {}", prefix.len()),
        ));
    }
    if let Some(v) = prefix.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(ApiError::field("prefix_microstrain", format!("readings must be non-negative, got {v}")));
    }
    let loaded = state.current()?;
    let raw = [req.density_kg_m3, req.fc_ksc, req.e_ksc];
    let result = tokio::task::spawn_blocking(move || {
        let stats = &loaded.checkpoint.stats;
        let creep: Vec<f64> = prefix.iter().map(|&v| stats.normalize_creep(v)).collect();
        let time: Vec<f64> = (1..=creep.len()).map(|d| NormStats::normalize_time(d as f64)).collect();
        let explainer = Explainer::new(&loaded.checkpoint.model, stats, &loaded.background, 0)?;
        let (prediction, shap) = explainer.explain_prefix(&creep, &time, &raw)?;
        Ok::<_, creepformer::Error>(ExplainResponse {
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            prediction,
            phi0: shap.phi0,
            phi: shap.phi,
            prediction_microstrain: stats.denormalize_creep(prediction),
            context_policy: CONTEXT_POLICY.to_string(),
            background_rows: explainer.background_len(),
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(result))
}

async fn model_info(State(state): State<AppState>) -> Result<Response, ApiError> {
    let loaded = state.current()?;
    let ckpt = &loaded.checkpoint;
    let info = ModelInfo {
        config: ckpt.model.config(),
        ablation: ckpt.model.ablation(),
        params: ckpt.model.num_params(),
        norm_stats: &ckpt.stats,
    };
    Ok(Json(info).into_response())
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let ready = state.loaded.read().expect("state lock").is_some();
    Json(json!({ "status": "ok", "model_loaded": ready }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model", get(model_info))
        .route("/predict", post(predict))
        .route("/explain", post(explain))
        .route("/trajectory.csv", get(trajectory_csv))
        .with_state(state)
}
