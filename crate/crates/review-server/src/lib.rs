//! HTTP+JSON API over a review session, meant for a browser on localhost.
//!
//! Reads take a shared lock. Mutations run one at a time on the blocking pool,
//! since they may sample the model before returning. Every response body
//! carries the session revision.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deepedit::kg::RawTriplet;
use deepedit::pipeline::{CandidateAction, PendingCandidate, PendingRefinement, PipelineError};
use deepedit::review::{Decision, GraphView, ReviewError, ReviewSession, SessionView};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

pub type SharedSession = Arc<RwLock<ReviewSession>>;

pub fn shared(session: ReviewSession) -> SharedSession {
    Arc::new(RwLock::new(session))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Reject,
    Edit,
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionBody {
    pub action: Action,
    #[serde(default)]
    pub triplet: Option<RawTriplet>,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementBody {
    #[serde(default)]
    pub query: Option<String>,
    pub revision: u64,
}

#[derive(Debug, Serialize)]
struct Candidates {
    revision: u64,
    candidates: Vec<PendingCandidate>,
}

#[derive(Debug, Serialize)]
struct Refinements {
    revision: u64,
    refinements: Vec<PendingRefinement>,
}

#[derive(Debug, Serialize)]
struct Graph {
    revision: u64,
    #[serde(flatten)]
    graph: GraphView,
}

struct ApiError {
    status: StatusCode,
    message: String,
    revision: u64,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.message, "revision": self.revision});
        (self.status, Json(body)).into_response()
    }
}

fn status_of(err: &ReviewError) -> StatusCode {
    match err {
        ReviewError::RevisionConflict { .. } => StatusCode::CONFLICT,
        ReviewError::UnknownItem(_) => StatusCode::NOT_FOUND,
        ReviewError::Pipeline(PipelineError::InvalidEdit(_) | PipelineError::IndexOutOfRange(_)) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        ReviewError::Pipeline(PipelineError::EndpointFailure(_)) => StatusCode::BAD_GATEWAY,
        ReviewError::Pipeline(_) | ReviewError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn mutate<F>(state: SharedSession, f: F) -> Result<Json<SessionView>, ApiError>
where
    F: FnOnce(&mut ReviewSession) -> Result<SessionView, ReviewError> + Send + 'static,
{
    let outcome = tokio::task::spawn_blocking(move || {
        let mut session = state.blocking_write();
        f(&mut session).map_err(|e| ApiError {
            status: status_of(&e),
            message: e.to_string(),
            revision: session.revision(),
        })
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
        revision: 0,
    })?;
    outcome.map(Json)
}

async fn session_view(State(state): State<SharedSession>) -> Json<SessionView> {
    Json(state.read().await.view())
}

async fn candidates(State(state): State<SharedSession>) -> impl IntoResponse {
    let session = state.read().await;
    Json(Candidates {
        revision: session.revision(),
        candidates: session.candidates().to_vec(),
    })
}

async fn refinements(State(state): State<SharedSession>) -> impl IntoResponse {
    let session = state.read().await;
    Json(Refinements {
        revision: session.revision(),
        refinements: session.refinements().to_vec(),
    })
}

async fn graph(State(state): State<SharedSession>) -> impl IntoResponse {
    let session = state.read().await;
    Json(Graph {
        revision: session.revision(),
        graph: session.graph_view(),
    })
}

async fn decide(
    State(state): State<SharedSession>,
    Path(id): Path<String>,
    Json(body): Json<DecisionBody>,
) -> Result<Json<SessionView>, ApiError> {
    let action = match (body.action, body.triplet) {
        (Action::Accept, _) => CandidateAction::Accept,
        (Action::Reject, _) => CandidateAction::Reject,
        (Action::Edit, Some(triplet)) => CandidateAction::Edit { triplet },
        (Action::Add, Some(triplet)) => CandidateAction::Add { triplet },
        (action, None) => {
            return Err(ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                message: format!("{action:?} needs a triplet"),
                revision: state.read().await.revision(),
            })
        }
    };
    mutate(state, move |s| {
        s.apply_decision(Decision::Candidate { id, action }, body.revision)
    })
    .await
}

async fn refine(
    State(state): State<SharedSession>,
    Path(id): Path<String>,
    Json(body): Json<RefinementBody>,
) -> Result<Json<SessionView>, ApiError> {
    mutate(state, move |s| {
        s.apply_decision(Decision::Refine { id, query: body.query }, body.revision)
    })
    .await
}

async fn iterate(State(state): State<SharedSession>) -> Result<Json<SessionView>, ApiError> {
    mutate(state, |s| s.iterate()).await
}

pub fn router(state: SharedSession) -> Router {
    Router::new()
        .route("/api/session", get(session_view))
        .route("/api/candidates", get(candidates))
        .route("/api/candidates/{id}/decision", post(decide))
        .route("/api/refinements", get(refinements))
        .route("/api/refinements/{id}", post(refine))
        .route("/api/graph", get(graph))
        .route("/api/iterate", post(iterate))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: SharedSession, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review API on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
