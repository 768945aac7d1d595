//! HTTP editing service.
//!
//! A session holds one inverted source image and one edit vector in rescaled
//! units. Every response names rendered images by the sha256 of their PNG
//! bytes; `GET /images/{hash}` serves them from a bounded cache.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Result;
use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use posedir_core::checkpoint::Persist;
use posedir_core::directions::{pose_of, DirectionMatrix};
use posedir_core::estimator::{FrozenEmbedder, PoseRegressor};
use posedir_core::image::FaceImage;
use posedir_core::inversion::{pivotal_tune, Encoder, TuneConfig};
use posedir_core::toygen::{LatentCode, ToyGenerator};
use posedir_core::{attribute_names, POSE_DIM};

use crate::cli::ServeArgs;
use crate::workspace::*;

/// Rendered images kept for `GET /images`.
const IMAGE_CACHE_CAPACITY: usize = 1024;
/// Upper bound on tuning steps per request.
const MAX_TUNE_STEPS: usize = 1000;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    pub max_tuned: usize,
}

impl From<&ServeArgs> for ServerConfig {
    fn from(a: &ServeArgs) -> Self {
        Self {
            session_ttl: Duration::from_secs(a.session_ttl_secs),
            max_sessions: a.max_sessions.max(1),
            max_tuned: a.max_tuned,
        }
    }
}

/// Frozen models shared by all sessions.
#[derive(Clone)]
pub struct Models {
    pub gen: ToyGenerator,
    pub reg: PoseRegressor,
    pub emb: FrozenEmbedder,
    pub enc: Encoder,
    pub directions: DirectionMatrix,
}

struct Session {
    source: FaceImage,
    code: LatentCode,
    /// Raw pose of the source.
    pose: Vec<f64>,
    /// Offset from the source pose, rescaled units.
    edit: Vec<f64>,
    tuned: Option<Arc<ToyGenerator>>,
}

struct Entry {
    session: Arc<Mutex<Session>>,
    last_used: Instant,
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<String, Entry>,
    /// Session ids holding a tuned generator, oldest first.
    tuned: VecDeque<String>,
    next_id: u64,
}

#[derive(Default)]
struct ImageCache {
    png: HashMap<String, Bytes>,
    order: VecDeque<String>,
}

impl ImageCache {
    fn insert(&mut self, png: Vec<u8>) -> String {
        let hash = sha256_hex(&png);
        if !self.png.contains_key(&hash) {
            while self.order.len() >= IMAGE_CACHE_CAPACITY {
                if let Some(old) = self.order.pop_front() {
                    self.png.remove(&old);
                }
            }
            self.order.push_back(hash.clone());
            self.png.insert(hash.clone(), Bytes::from(png));
        }
        hash
    }
}

pub struct AppState {
    models: Models,
    config: ServerConfig,
    registry: Mutex<Registry>,
    images: Mutex<ImageCache>,
}

impl AppState {
    pub fn new(models: Models, config: ServerConfig) -> Arc<Self> {
        Arc::new(Self { models, config, registry: Mutex::default(), images: Mutex::default() })
    }

    pub fn load(ws: &Workspace, args: &ServeArgs) -> Result<Arc<Self>> {
        let directions = DirectionMatrix::load(&ws.require_directions(&args.directions)?)?;
        let models = Models {
            gen: ws.load(&GENERATOR)?,
            reg: ws.load(&REGRESSOR)?,
            emb: ws.load(&EMBEDDER)?,
            enc: ws.load(&ENCODER)?,
            directions,
        };
        Ok(Self::new(models, args.into()))
    }

    fn store_image(&self, img: &FaceImage) -> String {
        self.images.lock().unwrap().insert(img.to_png_bytes())
    }

    fn purge_expired(&self, reg: &mut Registry) {
        let ttl = self.config.session_ttl;
        reg.sessions.retain(|_, e| e.last_used.elapsed() <= ttl);
        let live = &reg.sessions;
        let kept: VecDeque<String> = reg.tuned.iter().filter(|id| live.contains_key(*id)).cloned().collect();
        reg.tuned = kept;
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut reg = self.registry.lock().unwrap();
        self.purge_expired(&mut reg);
        let e = reg.sessions.get_mut(id).ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))?;
        e.last_used = Instant::now();
        Ok(e.session.clone())
    }

    fn insert(&self, session: Session) -> String {
        let mut reg = self.registry.lock().unwrap();
        self.purge_expired(&mut reg);
        while reg.sessions.len() >= self.config.max_sessions {
            let oldest = reg.sessions.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone());
            match oldest {
                Some(k) => {
                    reg.sessions.remove(&k);
                    reg.tuned.retain(|t| *t != k);
                }
                None => break,
            }
        }
        reg.next_id += 1;
        let id = format!("s{:06}", reg.next_id);
        reg.sessions.insert(id.clone(), Entry { session: Arc::new(Mutex::new(session)), last_used: Instant::now() });
        id
    }

    /// Records that `id` now holds a tuned copy; drops the oldest copies over the cap.
    fn note_tuned(&self, id: &str) {
        let mut evicted = Vec::new();
        {
            let mut reg = self.registry.lock().unwrap();
            reg.tuned.retain(|t| t != id);
            reg.tuned.push_back(id.to_string());
            while reg.tuned.len() > self.config.max_tuned {
                let Some(old) = reg.tuned.pop_front() else { break };
                if let Some(e) = reg.sessions.get(&old) {
                    evicted.push(e.session.clone());
                }
            }
        }
        for s in evicted {
            s.lock().unwrap().tuned = None;
        }
    }

    fn render(&self, s: &Session) -> Result<(FaceImage, Vec<f64>), ApiError> {
        let w = self.models.directions.shift(&s.code, &s.edit).map_err(ApiError::internal)?;
        let gen = s.tuned.as_deref().unwrap_or(&self.models.gen);
        let img = gen.generate(&w).map_err(ApiError::internal)?;
        let pose = pose_of(&self.models.reg.estimate(&img));
        Ok((img, pose))
    }

    fn session_view(&self, id: &str, s: &Session) -> Result<Value, ApiError> {
        let (img, pose) = self.render(s)?;
        let stats = &self.models.directions.stats;
        let edit: Vec<f64> = (0..POSE_DIM).map(|i| s.edit[i] / stats.slope(i)).collect();
        Ok(json!({
            "session": id,
            "image": self.store_image(&img),
            "pose": named(&pose),
            "source_pose": named(&s.pose),
            "edit": named(&edit),
            "tuned": s.tuned.is_some(),
        }))
    }
}

fn named(values: &[f64]) -> Value {
    let names = attribute_names();
    Value::Object(values.iter().enumerate().map(|(i, v)| (names[i].clone(), json!(v))).collect::<Map<_, _>>())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "not_found", message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Runs `f` on the blocking pool.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

/// The PNG in multipart field `field`.
async fn image_field(mut mp: Multipart, field: &str) -> Result<FaceImage, ApiError> {
    while let Some(part) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        if part.name() == Some(field) {
            let bytes = part.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
            return FaceImage::from_png_bytes(&bytes)
                .map_err(|e| ApiError::bad_request(format!("field `{field}` is not a valid PNG: {e}")));
        }
    }
    Err(ApiError::bad_request(format!("missing multipart field `{field}`")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/attributes", get(attributes))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/edit", post(edit_session))
        .route("/sessions/{id}/reenact", post(reenact_session))
        .route("/sessions/{id}/tune", post(tune_session))
        .route("/images/{hash}", get(get_image))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

async fn attributes(State(st): State<Arc<AppState>>) -> Json<Value> {
    let stats = &st.models.directions.stats;
    let list: Vec<Value> = attribute_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let unit = if i < 3 { "degrees" } else { "coefficient" };
            json!({ "name": name, "index": i, "low": stats.low[i], "high": stats.high[i], "unit": unit })
        })
        .collect();
    Json(json!({ "attributes": list }))
}

async fn create_session(State(st): State<Arc<AppState>>, mp: Multipart) -> ApiResult {
    let source = image_field(mp, "image").await?;
    let st2 = st.clone();
    let view = blocking(move || {
        let m = &st2.models;
        let code = m.enc.invert(&source);
        let pose = pose_of(&m.reg.estimate(&source));
        let preview = m.gen.generate(&code).map_err(ApiError::internal)?;
        let preview_hash = st2.store_image(&preview);
        let session = Session { source, code, pose, edit: vec![0.0; POSE_DIM], tuned: None };
        let mut view = st2.session_view("", &session)?;
        let id = st2.insert(session);
        view["session"] = json!(id);
        view["preview"] = json!(preview_hash);
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let session = st.session(&id)?;
    let view = blocking(move || st.session_view(&id, &session.lock().unwrap())).await?;
    Ok(Json(view).into_response())
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let mut reg = st.registry.lock().unwrap();
    st.purge_expired(&mut reg);
    if reg.sessions.remove(&id).is_none() {
        return Err(ApiError::not_found(format!("no session `{id}`")));
    }
    reg.tuned.retain(|t| *t != id);
    Ok(StatusCode::NO_CONTENT.into_response())
}

/// Request body of `POST /sessions/{id}/edit`.
///
/// `delta` sets raw offsets from the source pose for the named attributes;
/// `targets` sets absolute raw values; `reset` clears the edit first.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    #[serde(default)]
    delta: Map<String, Value>,
    #[serde(default)]
    targets: Map<String, Value>,
    #[serde(default)]
    reset: bool,
}

/// Validated `(index, raw value)` pairs of one edit field.
fn parse_attributes(field: &str, values: &Map<String, Value>) -> Result<Vec<(usize, f64)>, ApiError> {
    let names = attribute_names();
    let mut out = Vec::with_capacity(values.len());
    for (name, v) in values {
        let index = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ApiError::bad_request(format!("`{field}.{name}`: unknown attribute")))?;
        let x = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| ApiError::bad_request(format!("`{field}.{name}`: expected a finite number")))?;
        out.push((index, x));
    }
    Ok(out)
}

async fn edit_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let session = st.session(&id)?;
    let req: EditRequest = if body.is_empty() {
        EditRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed edit: {e}")))?
    };
    let delta = parse_attributes("delta", &req.delta)?;
    let targets = parse_attributes("targets", &req.targets)?;
    let view = blocking(move || {
        let mut s = session.lock().unwrap();
        let stats = &st.models.directions.stats;
        if req.reset {
            s.edit = vec![0.0; POSE_DIM];
        }
        for (i, d) in delta {
            s.edit[i] = stats.slope(i) * d;
        }
        let source = stats.rescale(&s.pose);
        for (i, t) in targets {
            let mut p = s.pose.clone();
            p[i] = t;
            s.edit[i] = stats.rescale(&p)[i] - source[i];
        }
        st.session_view(&id, &s)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn reenact_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, mp: Multipart) -> ApiResult {
    let session = st.session(&id)?;
    let target = image_field(mp, "image").await?;
    let view = blocking(move || {
        let p_t = pose_of(&st.models.reg.estimate(&target));
        let mut s = session.lock().unwrap();
        s.edit = st.models.directions.rescaled_delta(&s.pose, &p_t);
        st.session_view(&id, &s)
    })
    .await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneRequest {
    steps: Option<usize>,
}

async fn tune_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let session = st.session(&id)?;
    let req: TuneRequest = if body.is_empty() {
        TuneRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed tune request: {e}")))?
    };
    let mut config = TuneConfig::default();
    if let Some(steps) = req.steps {
        if steps == 0 || steps > MAX_TUNE_STEPS {
            return Err(ApiError::bad_request(format!("`steps`: expected 1..={MAX_TUNE_STEPS}")));
        }
        config.steps = steps;
    }
    if st.config.max_tuned == 0 {
        return Err(ApiError::bad_request("tuning is disabled on this server"));
    }
    let st2 = st.clone();
    let id2 = id.clone();
    let view = blocking(move || {
        let (outcome, view) = {
            let mut s = session.lock().unwrap();
            let m = &st2.models;
            let outcome = pivotal_tune(&m.gen, &m.emb, &s.source, &s.code, &config).map_err(ApiError::internal)?;
            s.tuned = Some(Arc::new(outcome.generator.clone()));
            let view = st2.session_view(&id2, &s)?;
            (outcome, view)
        };
        st2.note_tuned(&id2);
        let mut view = view;
        view["loss_before"] = json!(outcome.loss_before);
        view["loss_after"] = json!(outcome.loss_after);
        Ok(view)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn get_image(State(st): State<Arc<AppState>>, Path(hash): Path<String>) -> ApiResult {
    let png = st.images.lock().unwrap().png.get(&hash).cloned();
    match png {
        Some(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        None => Err(ApiError::not_found(format!("no image `{hash}`"))),
    }
}

/// Loads the models and serves until interrupted.
pub fn serve_blocking(ws: &Workspace, args: &ServeArgs) -> Result<()> {
    let state = AppState::load(ws, args)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
