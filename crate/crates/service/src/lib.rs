//! HTTP front end: synchronous retrieval and asynchronous style-transfer jobs.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/health` | `{status, index_size}` |
//! | POST | `/api/retrieve` | `{title, description, k}` → `{results: [{id, score, image_url}]}` |
//! | POST | `/api/pipeline` | multipart `content`, `title`, `description`, `style_id`, `config` → 202 `{job_id}` |
//! | GET | `/api/jobs/{id}` | job JSON |
//! | GET | `/api/jobs/{id}/result` | result PNG |
//! | POST | `/api/preview` | raw PNG/PPM body → the preprocessed image as PNG |
//! | GET | `/images/{id}` | corpus image as PNG |
//! | GET | `/app/*` | static UI bundle |

pub mod jobs;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use textstyle::corpus::decode_image;
use textstyle::pipeline::{load_sample_image, Model};
use textstyle::StyleConfig;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use jobs::{Job, JobKind, JobStatus, JobStore, Task, WorkerPool};

/// Largest accepted image upload.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;
/// Room for the text fields and multipart framing around the upload.
const MULTIPART_OVERHEAD: usize = 256 * 1024;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub jobs_dir: PathBuf,
    pub workers: usize,
    pub static_dir: Option<PathBuf>,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
    /// Style settings that multipart `config` overrides are merged onto.
    pub style_defaults: StyleConfig,
}

impl ServiceConfig {
    pub fn new(jobs_dir: impl Into<PathBuf>) -> Self {
        Self {
            jobs_dir: jobs_dir.into(),
            workers: 1,
            static_dir: None,
            cors_origin: None,
            style_defaults: StyleConfig::default(),
        }
    }
}

/// Shared handler state. The model is immutable; job state lives in the store.
#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<Model>>,
    jobs: Arc<JobStore>,
    pool: Option<Arc<WorkerPool>>,
    style_defaults: Arc<StyleConfig>,
}

impl AppState {
    /// Opens the job store and starts the workers. Without a model the
    /// service still answers health checks and job lookups.
    pub fn new(model: Option<Model>, config: &ServiceConfig) -> io::Result<Self> {
        let jobs = Arc::new(JobStore::open(&config.jobs_dir)?);
        let model = model.map(Arc::new);
        let pool = model
            .as_ref()
            .map(|m| Arc::new(WorkerPool::start(config.workers, m.clone(), jobs.clone())));
        Ok(Self {
            model,
            jobs,
            pool,
            style_defaults: Arc::new(config.style_defaults.clone()),
        })
    }

    pub fn jobs(&self) -> &JobStore {
        &self.jobs
    }
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .allow_origin(match &config.cors_origin {
            Some(origin) => AllowOrigin::exact(
                HeaderValue::from_str(origin).unwrap_or(HeaderValue::from_static("null")),
            ),
            None => AllowOrigin::any(),
        });
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/retrieve", post(retrieve))
        .route(
            "/api/pipeline",
            post(submit_pipeline).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + MULTIPART_OVERHEAD)),
        )
        .route(
            "/api/preview",
            post(preview).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/result", get(get_result))
        .route("/images/{id}", get(corpus_image));
    if let Some(dir) = &config.static_dir {
        app = app.nest_service("/app", ServeDir::new(dir));
    }
    app.layer(cors).with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> io::Result<()> {
    axum::serve(listener, app).await
}

/// Binds `addr` and serves until the process is stopped.
pub fn serve_blocking(addr: SocketAddr, app: Router) -> io::Result<()> {
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, app).await
    })
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn fields(message: &str, fields: Value) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": message, "fields": fields }),
        }
    }

    fn no_index() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no index loaded")
    }
}

impl From<textstyle::Error> for ApiError {
    fn from(e: textstyle::Error) -> Self {
        use textstyle::Error as E;
        let status = match e {
            E::Validation(_) | E::Degenerate(_) | E::Empty(_) | E::Dimension(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn model(state: &AppState) -> ApiResult<&Arc<Model>> {
    state.model.as_ref().ok_or_else(ApiError::no_index)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(match &state.model {
        Some(m) => json!({ "status": "ok", "index_size": m.retriever.index.len() }),
        None => json!({ "status": "no_index", "index_size": 0 }),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RetrieveRequest {
    title: String,
    description: String,
    k: Option<usize>,
}

fn require_text(title: &str, description: &str) -> ApiResult<()> {
    if title.trim().is_empty() && description.trim().is_empty() {
        return Err(ApiError::fields(
            "a style title or description is required",
            json!({
                "title": "required when description is empty",
                "description": "required when title is empty",
            }),
        ));
    }
    Ok(())
}

async fn retrieve(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: RetrieveRequest = if body.iter().all(u8::is_ascii_whitespace) {
        RetrieveRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))?
    };
    require_text(&req.title, &req.description)?;
    let k = req.k.unwrap_or(DEFAULT_TOP_K);
    if k == 0 {
        return Err(ApiError::fields("k must be positive", json!({ "k": "must be at least 1" })));
    }
    let model = model(&state)?.clone();
    let ranked = tokio::task::spawn_blocking(move || model.retriever.rank(&req.title, &req.description, k))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let results: Vec<Value> = ranked
        .into_iter()
        .map(|r| json!({ "id": r.id, "score": r.score, "image_url": format!("/images/{}", r.id) }))
        .collect();
    Ok(Json(json!({ "results": results })))
}

/// Overlays the keys of `overrides` on the serialized defaults.
fn merge_style_config(defaults: &StyleConfig, overrides: &str) -> ApiResult<StyleConfig> {
    let bad = |m: String| ApiError::fields("invalid config", json!({ "config": m }));
    let Value::Object(patch) = serde_json::from_str::<Value>(overrides).map_err(|e| bad(e.to_string()))? else {
        return Err(bad("config must be a JSON object".into()));
    };
    let mut merged = serde_json::to_value(defaults).expect("config serializes");
    let target = merged.as_object_mut().expect("config is an object");
    for (key, value) in patch {
        if !target.contains_key(&key) {
            return Err(bad(format!("unknown field {key:?}")));
        }
        target.insert(key, value);
    }
    let config: StyleConfig = serde_json::from_value(merged).map_err(|e| bad(e.to_string()))?;
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(config)
}

async fn submit_pipeline(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Response> {
    let model = model(&state)?.clone();
    let multipart_err = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), e.body_text());

    let mut content = None;
    let (mut title, mut description) = (String::new(), String::new());
    let mut style_id = None;
    let mut config = (*state.style_defaults).clone();
    while let Some(field) = multipart.next_field().await.map_err(multipart_err)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "content" => {
                let bytes = field.bytes().await.map_err(multipart_err)?;
                if bytes.len() > MAX_UPLOAD_BYTES {
                    return Err(ApiError::new(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        format!("content image exceeds {MAX_UPLOAD_BYTES} bytes"),
                    ));
                }
                content = Some(bytes);
            }
            "title" => title = field.text().await.map_err(multipart_err)?,
            "description" => description = field.text().await.map_err(multipart_err)?,
            "style_id" => {
                let id = field.text().await.map_err(multipart_err)?;
                style_id = (!id.trim().is_empty()).then(|| id.trim().to_string());
            }
            "config" => {
                let text = field.text().await.map_err(multipart_err)?;
                if !text.trim().is_empty() {
                    config = merge_style_config(&state.style_defaults, &text)?;
                }
            }
            other => {
                return Err(ApiError::fields(
                    "unexpected form field",
                    json!({ other: "not a recognised field" }),
                ))
            }
        }
    }

    let content = content.ok_or_else(|| {
        ApiError::fields("a content image is required", json!({ "content": "missing" }))
    })?;
    let content = decode_image(&content, model.max_side)
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    match &style_id {
        Some(id) if model.corpus.get(id).is_none() => {
            return Err(ApiError::fields(
                "unknown style image",
                json!({ "style_id": format!("{id:?} is not in the corpus") }),
            ))
        }
        Some(_) => {}
        None => require_text(&title, &description)?,
    }

    let kind = if style_id.is_some() { JobKind::Transfer } else { JobKind::Pipeline };
    let job = Job::new(kind, config.iterations);
    let job_id = job.id.clone();
    state
        .jobs
        .insert(job)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let task = Task {
        job_id: job_id.clone(),
        content,
        title,
        description,
        style_id,
        config,
    };
    let accepted = state.pool.as_ref().is_some_and(|p| p.submit(task));
    if !accepted {
        let _ = state.jobs.mark_failed(&job_id, "worker pool unavailable".into());
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool unavailable"));
    }
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job_id, "status_url": format!("/api/jobs/{job_id}") })),
    )
        .into_response())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    if job.status != JobStatus::Done {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({ "error": "job has not finished", "status": job.status }),
        });
    }
    let bytes = tokio::fs::read(state.jobs.result_path(&id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(png(bytes))
}

async fn preview(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let max_side = state
        .model
        .as_ref()
        .map_or(textstyle::pipeline::DEFAULT_MAX_SIDE, |m| m.max_side);
    let image = decode_image::<f64>(&body, max_side)
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    Ok(png(image.to_png_bytes()))
}

async fn corpus_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let model = model(&state)?.clone();
    let sample = model
        .corpus
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no image {id}")))?;
    let image = tokio::task::spawn_blocking(move || load_sample_image(&model.corpus, &sample, model.max_side))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(png(image.to_png_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overrides_merge_onto_defaults() {
        let defaults = StyleConfig { tv_weight: 0.5, ..StyleConfig::default() };
        let merged = merge_style_config(&defaults, r#"{"iterations": 10, "decay_at_iteration": 5}"#).unwrap();
        assert_eq!(merged.iterations, 10);
        assert_eq!(merged.tv_weight, 0.5);
        assert_eq!(merged.style_weights, defaults.style_weights);
    }

    #[test]
    fn config_overrides_are_validated() {
        let d = StyleConfig::default();
        assert!(merge_style_config(&d, r#"{"itterations": 10}"#).is_err());
        assert!(merge_style_config(&d, r#"{"style_weights": [1.0]}"#).is_err());
        assert!(merge_style_config(&d, "[1]").is_err());
    }
}
