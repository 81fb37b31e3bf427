//! HTTP server for annotation sessions: task lists, rating submission and the
//! static UI bundle.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use homoprobe::annotate::{annotate_export, parse_ratings, Mode, RatingStore, TaskItem};
use homoprobe::dataset::load_dataset;
use homoprobe::homogen::candidate_sets_from_jsonl;
use homoprobe::metrics::RatingRecord;

#[derive(Args)]
pub struct ServeArgs {
    /// Candidates file from `generate` or the pipeline.
    #[arg(long)]
    candidates: PathBuf,
    /// Dataset used to sample context sentences.
    #[arg(long)]
    dataset: PathBuf,
    /// Ratings are loaded from and persisted to this JSON-lines file.
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long, default_value_t = homoprobe::annotate::DEFAULT_SEED)]
    seed: u64,
    /// Directory holding the built UI bundle.
    #[arg(long, default_value = "annotator-ui/dist")]
    static_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8000")]
    addr: String,
}

struct AppState {
    with_context: Vec<TaskItem>,
    without_context: Vec<TaskItem>,
    store: Mutex<RatingStore>,
    ratings_path: PathBuf,
}

impl AppState {
    fn tasks(&self, mode: Mode) -> &[TaskItem] {
        match mode {
            Mode::WithContext => &self.with_context,
            Mode::WithoutContext => &self.without_context,
        }
    }
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let text =
        std::fs::read_to_string(&args.candidates).with_context(|| format!("reading {}", args.candidates.display()))?;
    let sets = candidate_sets_from_jsonl(&text, &[])?;
    let ds = load_dataset(&args.dataset)?;
    let with_context = annotate_export(&sets, &ds, true, args.seed)?;
    let without_context = annotate_export(&sets, &ds, false, args.seed)?;
    let store = if args.ratings.exists() {
        let text =
            std::fs::read_to_string(&args.ratings).with_context(|| format!("reading {}", args.ratings.display()))?;
        RatingStore::from_set(parse_ratings(&text)?)
    } else {
        RatingStore::default()
    };
    let state =
        Arc::new(AppState { with_context, without_context, store: Mutex::new(store), ratings_path: args.ratings });
    let app = router(state, args.static_dir);

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        let local = listener.local_addr()?;
        println!("{}", json!({"listening": local.to_string()}));
        std::io::stdout().flush()?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}

fn router(state: Arc<AppState>, static_dir: PathBuf) -> Router {
    Router::new()
        .route("/api/tasks", get(get_tasks))
        .route("/api/ratings", post(post_rating))
        .fallback_service(ServeDir::new(static_dir))
        .with_state(state)
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": kind, "message": message.into()}))).into_response()
}

#[derive(Deserialize)]
struct TaskQuery {
    mode: Option<String>,
    annotator: Option<String>,
}

async fn get_tasks(State(state): State<Arc<AppState>>, Query(q): Query<TaskQuery>) -> Response {
    let Some(mode) = q.mode.as_deref().and_then(Mode::parse) else {
        return error(StatusCode::BAD_REQUEST, "validation", "mode must be with_context or without_context");
    };
    let annotator = q.annotator.unwrap_or_default();
    let responses: Vec<_> = if annotator.is_empty() {
        Vec::new()
    } else {
        let store = state.store.lock().await;
        store
            .to_set()
            .records
            .into_iter()
            .filter(|r| r.annotator_id == annotator && r.context_shown == mode.context_shown())
            .map(|r| json!({"original_text": r.original_text, "candidate_text": r.candidate_text, "score": r.score}))
            .collect()
    };
    Json(json!({
        "mode": mode,
        "annotator": annotator,
        "items": state.tasks(mode),
        "responses": responses,
    }))
    .into_response()
}

async fn post_rating(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let record: RatingRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
    };
    let mode = if record.context_shown { Mode::WithContext } else { Mode::WithoutContext };
    let known = state
        .tasks(mode)
        .iter()
        .any(|t| t.candidate_text == record.candidate_text && t.original_text == record.original_text);
    if !known {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
            format!("{:?} / {:?} is not a task item", record.original_text, record.candidate_text),
        );
    }
    let mut store = state.store.lock().await;
    let replaced = match store.upsert(record) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
    };
    if let Err(e) = tokio::fs::write(&state.ratings_path, store.to_set().to_jsonl()).await {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string());
    }
    Json(json!({"stored": true, "replaced": replaced, "total": store.len()})).into_response()
}
