//! Review sessions: revision-checked decisions over a running pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset;
use crate::pipeline::{
    CandidateAction, PendingCandidate, PendingRefinement, Pipeline, PipelineError, PipelineStatus, Refinement,
};
use crate::probe::Prober;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("stale revision {found}, session is at {current}")]
    RevisionConflict { current: u64, found: u64 },
    #[error("unknown review item {0:?}")]
    UnknownItem(String),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("session file: {0}")]
    Storage(String),
}

impl From<PipelineError> for ReviewError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownItem(id) => ReviewError::UnknownItem(id),
            other => ReviewError::Pipeline(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ReviewError>;

/// A change requested by a reviewer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Candidate {
        id: String,
        #[serde(flatten)]
        action: CandidateAction,
    },
    Refine {
        id: String,
        #[serde(default)]
        query: Option<String>,
    },
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    session_id: String,
    revision: u64,
    pipeline: Pipeline,
}

/// Summary returned by the session endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub revision: u64,
    pub status: PipelineStatus,
    pub seed: crate::kg::Triplet,
    pub pending_candidates: usize,
    pub pending_refinements: usize,
    pub iterations: usize,
    pub chains: usize,
    pub checkpoint_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    /// `subject` or `object` for the seed endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Node-link view of the graph under construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphView {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// A pipeline with a revision counter, a prober and an optional session file.
///
/// Every accepted mutation bumps the revision by one and rewrites the file.
/// A mutation carrying any other revision is rejected without effect.
pub struct ReviewSession {
    session_id: String,
    pipeline: Pipeline,
    revision: u64,
    checkpoint_path: Option<PathBuf>,
    prober: Prober,
    last_error: Option<String>,
}

impl ReviewSession {
    pub fn new(session_id: &str, pipeline: Pipeline, prober: Prober, checkpoint_path: Option<PathBuf>) -> Result<Self> {
        let session = ReviewSession {
            session_id: session_id.to_string(),
            pipeline,
            revision: 0,
            checkpoint_path,
            prober,
            last_error: None,
        };
        session.persist()?;
        Ok(session)
    }

    /// Reopens a session written by [`ReviewSession::new`] or a mutation.
    pub fn open(path: &Path, prober: Prober) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ReviewError::Storage(format!("{}: {e}", path.display())))?;
        let file: SessionFile = serde_json::from_str(&text).map_err(|e| ReviewError::Storage(e.to_string()))?;
        Ok(ReviewSession {
            session_id: file.session_id,
            pipeline: file.pipeline,
            revision: file.revision,
            checkpoint_path: Some(path.to_path_buf()),
            prober,
            last_error: None,
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    fn persist(&self) -> Result<()> {
        let Some(path) = &self.checkpoint_path else {
            return Ok(());
        };
        let file = SessionFile {
            session_id: self.session_id.clone(),
            revision: self.revision,
            pipeline: self.pipeline.clone(),
        };
        let text = dataset::to_canonical_json(&file).map_err(|e| ReviewError::Storage(e.to_string()))?;
        dataset::write_atomic(path, text.as_bytes())
            .map_err(|e| ReviewError::Storage(format!("{}: {e}", path.display())))
    }

    fn check(&self, revision: u64) -> Result<()> {
        if revision != self.revision {
            return Err(ReviewError::RevisionConflict {
                current: self.revision,
                found: revision,
            });
        }
        Ok(())
    }

    /// Runs pending work. Endpoint failures are kept for the session view
    /// rather than undoing the decision that triggered them.
    fn advance(&mut self) {
        self.last_error = match self.pipeline.resume(&self.prober) {
            Ok(_) => None,
            Err(e) => {
                log::warn!("pipeline stopped: {e}");
                Some(e.to_string())
            }
        };
    }

    pub fn apply_decision(&mut self, decision: Decision, revision: u64) -> Result<SessionView> {
        self.check(revision)?;
        match decision {
            Decision::Candidate { id, action } => self.pipeline.decide(&id, action)?,
            Decision::Refine { id, query } => self.pipeline.refine(&id, Refinement { query, input: None })?,
        }
        self.revision += 1;
        if !self.pipeline.has_pending_review() {
            self.advance();
        }
        self.persist()?;
        Ok(self.view())
    }

    /// Resumes the pipeline. Counts as a mutation only when state changed.
    pub fn iterate(&mut self) -> Result<SessionView> {
        let before = self.pipeline.checkpoint_hash();
        self.advance();
        if self.pipeline.checkpoint_hash() != before {
            self.revision += 1;
            self.persist()?;
        }
        Ok(self.view())
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            revision: self.revision,
            status: if self.pipeline.has_pending_review() {
                PipelineStatus::AwaitingReview
            } else {
                PipelineStatus::Idle
            },
            seed: self.pipeline.seed().clone(),
            pending_candidates: self.pipeline.pending_candidates().count(),
            pending_refinements: self.pipeline.pending_refinements().len(),
            iterations: self.pipeline.iterations(),
            chains: self.pipeline.chains().count(),
            checkpoint_hash: self.pipeline.checkpoint_hash(),
            last_error: self.last_error.clone(),
        }
    }

    pub fn candidates(&self) -> &[PendingCandidate] {
        self.pipeline.candidate_batch()
    }

    pub fn refinements(&self) -> &[PendingRefinement] {
        self.pipeline.pending_refinements()
    }

    pub fn graph_view(&self) -> GraphView {
        let Some(graph) = self.pipeline.graph() else {
            return GraphView::default();
        };
        let seed = graph.seed();
        GraphView {
            nodes: graph
                .entities()
                .map(|id| GraphNode {
                    id: id.to_string(),
                    seed_role: if id == seed.subject() {
                        Some("subject".into())
                    } else if id == seed.object() {
                        Some("object".into())
                    } else {
                        None
                    },
                })
                .collect(),
            edges: graph
                .edges()
                .map(|e| GraphEdge {
                    subject: e.subject().to_string(),
                    relation: e.relation().to_string(),
                    object: e.object().to_string(),
                })
                .collect(),
        }
    }
}
