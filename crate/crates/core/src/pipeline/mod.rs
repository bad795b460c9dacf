//! Human-in-the-loop construction of model-specific knowledge graphs.
//!
//! Three components cycle until the work queue drains:
//!
//! 1. validation: a fact or chain is turned into a question and the model is
//!    sampled; a miss parks the item for human refinement, and `k_max` misses
//!    discard it;
//! 2. generation: a validated question is answered step by step, the answer is
//!    split into sentences and each sentence is converted into candidate
//!    triplets, which wait for human review;
//! 3. synthesis: validated triplets are inserted into the graph, the chains from
//!    the seed subject to the seed object are re-enumerated, and new chains are
//!    sent back to validation.
//!
//! [`Pipeline`] is a single-writer state machine. It parks at review gates and
//! resumes when decisions arrive, so interactive and scripted review share one
//! code path. Its JSON checkpoint is a complete description of its state.

mod query;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, DatasetBundle, ImplicationChain};
use crate::kg::{KgError, KnowledgeGraph, RawTriplet, Triplet, MAX_CHAIN_LEN};
use crate::probe::{estimate_probability, ChatMessage, CompletionRequest, EndpointError, Prober, QueryTag};

pub use query::{generate_query, QueryInput, QueryTemplates};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("endpoint failure: {0}")]
    EndpointFailure(#[from] EndpointError),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error("candidate index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("unknown review item {0:?}")]
    UnknownItem(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn default_k_max() -> usize {
    3
}
fn default_l_max() -> usize {
    MAX_CHAIN_LEN
}
fn default_max_iterations() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Failed validation cycles before an item is discarded.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Longest chain sequenced into the dataset.
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    /// Cap on chain-of-thought generation rounds.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub templates: QueryTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_max: default_k_max(),
            l_max: default_l_max(),
            max_iterations: default_max_iterations(),
            templates: QueryTemplates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(PipelineError::Config("k_max must be at least 1".into()));
        }
        if !(1..=MAX_CHAIN_LEN).contains(&self.l_max) {
            return Err(PipelineError::Config(format!(
                "l_max must be within 1..={MAX_CHAIN_LEN}"
            )));
        }
        Ok(())
    }
}

/// A fact or a chain to validate against the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hops", rename_all = "snake_case")]
pub enum KnowledgeInput {
    Triplet(Triplet),
    Chain(Vec<Triplet>),
}

impl KnowledgeInput {
    pub fn hops(&self) -> &[Triplet] {
        match self {
            KnowledgeInput::Triplet(t) => std::slice::from_ref(t),
            KnowledgeInput::Chain(hops) => hops,
        }
    }

    fn as_query_input(&self) -> QueryInput<'_> {
        match self {
            KnowledgeInput::Triplet(t) => QueryInput::Triplet(t),
            KnowledgeInput::Chain(hops) => QueryInput::Chain(hops),
        }
    }

    fn key(&self) -> String {
        self.hops().iter().map(Triplet::to_string).collect::<Vec<_>>().join(" ")
    }

    fn expected(&self) -> &Triplet {
        self.hops().last().expect("inputs are never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ValidationStatus {
    /// The model produced the expected object on attempt `attempt` (0-based).
    Validated { attempt: usize },
    /// Attempt `attempt` missed; a human may refine the question.
    NeedsReview { attempt: usize },
    /// Every one of `attempts` cycles missed.
    Discarded { attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    #[serde(flatten)]
    pub status: ValidationStatus,
    pub query: String,
    pub response_excerpt: String,
}

/// A human's answer to a failed validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    /// Replacement question; `None` asks the same question again.
    #[serde(default)]
    pub query: Option<String>,
    /// Corrected fact or chain; `None` keeps the current one.
    #[serde(default)]
    pub input: Option<KnowledgeInput>,
}

const EXCERPT_CHARS: usize = 200;

fn excerpt(text: &str) -> String {
    text.chars().take(EXCERPT_CHARS).collect()
}

/// One validation cycle: sample the model and look for the expected object.
///
/// Any hit among the samples validates. A miss on the last permitted attempt
/// discards the input.
pub fn validate_attempt(
    input: &KnowledgeInput,
    query: &str,
    attempt: usize,
    prober: &Prober,
    config: &PipelineConfig,
) -> Result<ValidationOutcome> {
    let expected = input.expected();
    let tag = QueryTag::chain(input.hops().to_vec());
    let query_id = format!("validate/{}/{attempt}", input.key());
    let responses = prober.sample(&query_id, query, Some(&tag))?;
    let (hits, _) = estimate_probability(&responses, expected.object(), expected.object_aliases())
        .map_err(|e| PipelineError::MalformedInput(e.to_string()))?;
    let status = if hits > 0 {
        ValidationStatus::Validated { attempt }
    } else if attempt + 1 >= config.k_max {
        ValidationStatus::Discarded { attempts: attempt + 1 }
    } else {
        ValidationStatus::NeedsReview { attempt }
    };
    Ok(ValidationOutcome {
        status,
        query: query.to_string(),
        response_excerpt: excerpt(responses.first().map_or("", String::as_str)),
    })
}

/// Validates synchronously, asking `refine` after every miss.
pub fn validate_knowledge<F>(
    input: &KnowledgeInput,
    prober: &Prober,
    config: &PipelineConfig,
    mut refine: F,
) -> Result<(KnowledgeInput, ValidationOutcome)>
where
    F: FnMut(&ValidationOutcome, &KnowledgeInput) -> Refinement,
{
    config.validate()?;
    let mut input = input.clone();
    let mut query = generate_query(input.as_query_input(), &config.templates)?;
    let mut attempt = 0;
    loop {
        let outcome = validate_attempt(&input, &query, attempt, prober, config)?;
        if !matches!(outcome.status, ValidationStatus::NeedsReview { .. }) {
            return Ok((input, outcome));
        }
        let refinement = refine(&outcome, &input);
        if let Some(new_input) = refinement.input {
            input = new_input;
        }
        if let Some(new_query) = refinement.query {
            query = new_query;
        }
        attempt += 1;
    }
}

/// Where a candidate triplet came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_query: String,
    pub cot_excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Accepted,
    Rejected,
    Edited { new: Triplet },
    HumanAdded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTriplet {
    pub triplet: Triplet,
    pub provenance: Provenance,
    pub review: ReviewState,
}

impl CandidateTriplet {
    /// The triplet to keep, if review kept one.
    pub fn accepted(&self) -> Option<&Triplet> {
        match &self.review {
            ReviewState::Accepted | ReviewState::HumanAdded => Some(&self.triplet),
            ReviewState::Edited { new } => Some(new),
            ReviewState::Pending | ReviewState::Rejected => None,
        }
    }
}

/// Facts extracted from one sentence of a reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedFact {
    pub fact: String,
    pub candidates: Vec<CandidateTriplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotExtraction {
    pub query: String,
    pub response: String,
    pub facts: Vec<ExtractedFact>,
}

impl CotExtraction {
    pub fn candidates(&self) -> Vec<CandidateTriplet> {
        self.facts.iter().flat_map(|f| f.candidates.iter().cloned()).collect()
    }
}

const MIN_FACT_TOKENS: usize = 3;

/// Splits a response into sentences on terminators and line breaks, dropping
/// fragments shorter than three tokens.
pub fn segment_facts(text: &str) -> Vec<String> {
    let splitter = Regex::new(r"[.!?]+(?:\s+|$)|\n+").expect("static regex");
    splitter
        .split(text)
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| s.split_whitespace().count() >= MIN_FACT_TOKENS)
        .collect()
}

/// Reads every `(subject, relation, object)` group in an extraction response.
///
/// Groups without exactly three non-empty fields are skipped. A non-empty
/// response without any valid group is an error.
pub fn parse_triplets(text: &str) -> std::result::Result<Vec<Triplet>, String> {
    let group = Regex::new(r"\(([^()]*)\)").expect("static regex");
    let mut out = Vec::new();
    for cap in group.captures_iter(text) {
        let fields: Vec<&str> = cap[1].split(',').map(str::trim).collect();
        if fields.len() != 3 {
            log::debug!("skipping malformed extraction {:?}", &cap[0]);
            continue;
        }
        match Triplet::new(fields[0], fields[1], fields[2]) {
            Ok(t) => out.push(t),
            Err(e) => log::debug!("skipping {:?}: {e}", &cap[0]),
        }
    }
    if out.is_empty() && !text.trim().is_empty() {
        return Err(format!("no triplet found in {:?}", excerpt(text)));
    }
    Ok(out)
}

/// Elicits a step-by-step answer to `query` and extracts candidate triplets
/// from each sentence. Extraction failures are recorded per sentence.
///
/// `tag` names the fact behind the question, for graph-backed endpoints.
pub fn cot_generate_candidates(
    query: &str,
    tag: Option<&QueryTag>,
    prober: &Prober,
    templates: &QueryTemplates,
) -> Result<CotExtraction> {
    let response = prober.complete(&CompletionRequest {
        query_id: format!("cot/{query}"),
        sample_index: 0,
        messages: vec![ChatMessage::user(templates.cot_prompt(query))],
        tag: tag.cloned(),
    })?;
    let mut facts = Vec::new();
    for (i, fact) in segment_facts(&response).into_iter().enumerate() {
        let extraction = prober.complete(&CompletionRequest {
            query_id: format!("extract/{query}/{i}"),
            sample_index: 0,
            messages: vec![ChatMessage::user(templates.extraction_prompt(&fact))],
            tag: tag.cloned(),
        })?;
        let (triplets, error) = match parse_triplets(&extraction) {
            Ok(ts) => (ts, None),
            Err(e) => {
                log::warn!("unparseable extraction for {fact:?}: {e}");
                (Vec::new(), Some(e))
            }
        };
        let candidates = triplets
            .into_iter()
            .map(|triplet| CandidateTriplet {
                triplet,
                provenance: Provenance {
                    source_query: query.to_string(),
                    cot_excerpt: fact.clone(),
                },
                review: ReviewState::Pending,
            })
            .collect();
        facts.push(ExtractedFact {
            fact,
            candidates,
            error,
        });
    }
    Ok(CotExtraction {
        query: query.to_string(),
        response,
        facts,
    })
}

/// A reviewer's decision on a candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReviewDecision {
    Accept { index: usize },
    Reject { index: usize },
    Edit { index: usize, triplet: RawTriplet },
    Add { triplet: RawTriplet },
}

fn review_triplet(raw: &RawTriplet) -> Result<Triplet> {
    Triplet::try_from(raw.clone()).map_err(|e| PipelineError::InvalidEdit(e.to_string()))
}

/// Applies review decisions and returns every kept triplet in list order.
///
/// The list is left untouched when any decision is invalid.
pub fn apply_review(candidates: &mut Vec<CandidateTriplet>, decisions: &[ReviewDecision]) -> Result<Vec<Triplet>> {
    let mut next = candidates.clone();
    for decision in decisions {
        let slot = |next: &mut Vec<CandidateTriplet>, index: usize| -> Result<usize> {
            if index < next.len() {
                Ok(index)
            } else {
                Err(PipelineError::IndexOutOfRange(index))
            }
        };
        match decision {
            ReviewDecision::Accept { index } => {
                let i = slot(&mut next, *index)?;
                next[i].review = ReviewState::Accepted;
            }
            ReviewDecision::Reject { index } => {
                let i = slot(&mut next, *index)?;
                next[i].review = ReviewState::Rejected;
            }
            ReviewDecision::Edit { index, triplet } => {
                let i = slot(&mut next, *index)?;
                let new = review_triplet(triplet)?;
                if new.same_fact(&next[i].triplet) {
                    return Err(PipelineError::InvalidEdit(format!("edit of {new} changes nothing")));
                }
                next[i].review = ReviewState::Edited { new };
            }
            ReviewDecision::Add { triplet } => {
                next.push(CandidateTriplet {
                    triplet: review_triplet(triplet)?,
                    provenance: Provenance {
                        source_query: String::new(),
                        cot_excerpt: "added by reviewer".into(),
                    },
                    review: ReviewState::HumanAdded,
                });
            }
        }
    }
    *candidates = next;
    Ok(candidates.iter().filter_map(|c| c.accepted().cloned()).collect())
}

/// Result of inserting one validated triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub graph: KnowledgeGraph,
    /// Every seed-subject to seed-object chain in the updated graph.
    pub chains: Vec<ImplicationChain>,
}

/// Inserts `validated` and sequences all seed chains up to `l_max` hops.
pub fn synthesize_and_sequence(
    graph: &KnowledgeGraph,
    validated: &Triplet,
    config: &PipelineConfig,
) -> Result<Synthesis> {
    config.validate()?;
    let mut graph = graph.clone();
    graph.insert_edge(validated.clone())?;
    let chains = sequence_chains(&graph, config)?;
    Ok(Synthesis { graph, chains })
}

/// Chains from the seed subject to the seed object, with one question per hop.
pub fn sequence_chains(graph: &KnowledgeGraph, config: &PipelineConfig) -> Result<Vec<ImplicationChain>> {
    let seed = graph.seed();
    if !graph.contains_entity(seed.subject()) || !graph.contains_entity(seed.object()) {
        return Ok(Vec::new());
    }
    let paths = graph.enumerate_chains(seed.subject(), seed.object(), config.l_max)?;
    let mut chains = Vec::with_capacity(paths.len());
    for hops in paths {
        match ImplicationChain::from_hops(graph.id(), seed, hops, &config.templates) {
            Ok(chain) => chains.push(chain),
            Err(e) => log::warn!("skipping chain: {e}"),
        }
    }
    Ok(chains)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
enum Task {
    Validate {
        input: KnowledgeInput,
        query: String,
        attempt: usize,
    },
    Generate {
        query: String,
        fact: Triplet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStatus {
    Pending,
    Validated,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingCandidate {
    pub id: String,
    #[serde(flatten)]
    pub candidate: CandidateTriplet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRefinement {
    pub id: String,
    pub input: KnowledgeInput,
    pub attempt: usize,
    pub outcome: ValidationOutcome,
}

/// Decision on a candidate addressed by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CandidateAction {
    Accept,
    Reject,
    Edit { triplet: RawTriplet },
    Add { triplet: RawTriplet },
}

/// One step of a scripted review session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptStep {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStatus {
    /// Waiting for candidate decisions or query refinements.
    AwaitingReview,
    /// Nothing left to do.
    Idle,
}

/// Record of a discarded fact or chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardRecord {
    pub input: KnowledgeInput,
    pub outcome: ValidationOutcome,
}

/// Graph construction state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    config: PipelineConfig,
    graph_id: String,
    seed: Triplet,
    graph: Option<KnowledgeGraph>,
    chains: Vec<ImplicationChain>,
    chain_status: BTreeMap<String, ChainStatus>,
    queue: VecDeque<Task>,
    candidates: Vec<PendingCandidate>,
    refinements: Vec<PendingRefinement>,
    discarded: Vec<DiscardRecord>,
    rejected_links: Vec<String>,
    expanded_queries: BTreeSet<String>,
    iterations: usize,
    next_id: u64,
}

impl Pipeline {
    /// Starts from a seed fact that still has to pass validation.
    pub fn new(graph_id: &str, seed: Triplet, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if graph_id.trim().is_empty() {
            return Err(PipelineError::Config("empty graph id".into()));
        }
        let query = generate_query(QueryInput::Triplet(&seed), &config.templates)?;
        Ok(Pipeline {
            queue: VecDeque::from([Task::Validate {
                input: KnowledgeInput::Triplet(seed.clone()),
                query,
                attempt: 0,
            }]),
            config,
            graph_id: graph_id.trim().to_string(),
            seed,
            graph: None,
            chains: Vec::new(),
            chain_status: BTreeMap::new(),
            candidates: Vec::new(),
            refinements: Vec::new(),
            discarded: Vec::new(),
            rejected_links: Vec::new(),
            expanded_queries: BTreeSet::new(),
            iterations: 0,
            next_id: 1,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn graph(&self) -> Option<&KnowledgeGraph> {
        self.graph.as_ref()
    }

    pub fn seed(&self) -> &Triplet {
        &self.seed
    }

    /// Chains that have not been discarded.
    pub fn chains(&self) -> impl Iterator<Item = &ImplicationChain> {
        self.chains
            .iter()
            .filter(|c| self.chain_status.get(&c.chain_id) != Some(&ChainStatus::Discarded))
    }

    pub fn chain_status(&self, chain_id: &str) -> Option<ChainStatus> {
        self.chain_status.get(chain_id).copied()
    }

    pub fn pending_candidates(&self) -> impl Iterator<Item = &PendingCandidate> {
        self.candidates
            .iter()
            .filter(|c| c.candidate.review == ReviewState::Pending)
    }

    /// The whole current review batch, decided or not.
    pub fn candidate_batch(&self) -> &[PendingCandidate] {
        &self.candidates
    }

    pub fn pending_refinements(&self) -> &[PendingRefinement] {
        &self.refinements
    }

    pub fn discarded(&self) -> &[DiscardRecord] {
        &self.discarded
    }

    pub fn rejected_links(&self) -> &[String] {
        &self.rejected_links
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn has_pending_review(&self) -> bool {
        self.pending_candidates().next().is_some() || !self.refinements.is_empty()
    }

    fn fresh_id(&mut self, prefix: char) -> String {
        let id = format!("{prefix}{}", self.next_id);
        self.next_id += 1;
        id
    }

    /// Dataset view of the current state.
    pub fn bundle(&self) -> DatasetBundle {
        DatasetBundle {
            version: dataset::FORMAT_VERSION.to_string(),
            graphs: self.graph.iter().cloned().collect(),
            chains: self.chains().cloned().collect(),
        }
    }

    /// Records a decision on a candidate of the current batch.
    pub fn decide(&mut self, candidate_id: &str, action: CandidateAction) -> Result<()> {
        let index = self
            .candidates
            .iter()
            .position(|c| c.id == candidate_id)
            .ok_or_else(|| PipelineError::UnknownItem(candidate_id.to_string()))?;
        let decision = match action {
            CandidateAction::Accept => ReviewDecision::Accept { index },
            CandidateAction::Reject => ReviewDecision::Reject { index },
            CandidateAction::Edit { triplet } => ReviewDecision::Edit { index, triplet },
            CandidateAction::Add { triplet } => ReviewDecision::Add { triplet },
        };
        let mut batch: Vec<CandidateTriplet> = self.candidates.iter().map(|c| c.candidate.clone()).collect();
        apply_review(&mut batch, std::slice::from_ref(&decision))?;
        if batch.len() > self.candidates.len() {
            let id = self.fresh_id('c');
            let added = batch.pop().expect("one added candidate");
            self.candidates.push(PendingCandidate { id, candidate: added });
        }
        for (slot, updated) in self.candidates.iter_mut().zip(batch) {
            slot.candidate = updated;
        }
        Ok(())
    }

    /// Answers a parked validation with a new (or the same) question.
    pub fn refine(&mut self, refinement_id: &str, refinement: Refinement) -> Result<()> {
        let index = self
            .refinements
            .iter()
            .position(|r| r.id == refinement_id)
            .ok_or_else(|| PipelineError::UnknownItem(refinement_id.to_string()))?;
        let item = self.refinements.remove(index);
        let input = refinement.input.unwrap_or(item.input);
        let query = refinement.query.unwrap_or(item.outcome.query);
        self.queue.push_front(Task::Validate {
            input,
            query,
            attempt: item.attempt + 1,
        });
        Ok(())
    }

    /// Hands a fully decided candidate batch back to validation.
    fn close_batch(&mut self) {
        if self.candidates.is_empty() || self.pending_candidates().next().is_some() {
            return;
        }
        let kept: Vec<Triplet> = self
            .candidates
            .drain(..)
            .filter_map(|c| c.candidate.accepted().cloned())
            .collect();
        for triplet in kept {
            match generate_query(QueryInput::Triplet(&triplet), &self.config.templates) {
                Ok(query) => self.queue.push_back(Task::Validate {
                    input: KnowledgeInput::Triplet(triplet),
                    query,
                    attempt: 0,
                }),
                Err(e) => log::warn!("cannot question {triplet}: {e}"),
            }
        }
    }

    /// Runs queued work until the queue drains or a review gate blocks.
    ///
    /// `on_transition` sees the pipeline after every completed task.
    pub fn resume_with<F>(&mut self, prober: &Prober, mut on_transition: F) -> Result<PipelineStatus>
    where
        F: FnMut(&Pipeline) -> Result<()>,
    {
        loop {
            self.close_batch();
            let blocked = self.pending_candidates().next().is_some();
            let task = match self.queue.front() {
                None => break,
                Some(Task::Generate { .. }) if blocked => break,
                Some(_) => self.queue.pop_front().expect("front exists"),
            };
            let result = match task.clone() {
                Task::Validate { input, query, attempt } => self.run_validation(prober, input, query, attempt),
                Task::Generate { query, fact } => self.run_generation(prober, query, fact),
            };
            if let Err(e) = result {
                // Endpoint failures happen before any state changes; retry later.
                self.queue.push_front(task);
                return Err(e);
            }
            on_transition(self)?;
        }
        Ok(if self.has_pending_review() {
            PipelineStatus::AwaitingReview
        } else {
            PipelineStatus::Idle
        })
    }

    pub fn resume(&mut self, prober: &Prober) -> Result<PipelineStatus> {
        self.resume_with(prober, |_| Ok(()))
    }

    fn run_validation(&mut self, prober: &Prober, input: KnowledgeInput, query: String, attempt: usize) -> Result<()> {
        let outcome = validate_attempt(&input, &query, attempt, prober, &self.config)?;
        match outcome.status {
            ValidationStatus::Validated { .. } => match &input {
                KnowledgeInput::Triplet(t) => {
                    self.synthesize(t)?;
                    if self.iterations + self.queued_generations() < self.config.max_iterations
                        && self.expanded_queries.insert(query.clone())
                    {
                        self.queue.push_back(Task::Generate { query, fact: t.clone() });
                    }
                }
                KnowledgeInput::Chain(hops) => {
                    if let Some(chain) = self.chains.iter().find(|c| c.hops().eq(hops.iter())) {
                        self.chain_status.insert(chain.chain_id.clone(), ChainStatus::Validated);
                    }
                }
            },
            ValidationStatus::NeedsReview { attempt } => {
                let id = self.fresh_id('r');
                self.refinements.push(PendingRefinement {
                    id,
                    input,
                    attempt,
                    outcome,
                });
            }
            ValidationStatus::Discarded { .. } => {
                if let KnowledgeInput::Chain(hops) = &input {
                    if let Some(chain) = self.chains.iter().find(|c| c.hops().eq(hops.iter())) {
                        self.chain_status.insert(chain.chain_id.clone(), ChainStatus::Discarded);
                    }
                }
                log::info!("discarding {} after {} attempts", input.key(), attempt + 1);
                self.discarded.push(DiscardRecord { input, outcome });
            }
        }
        Ok(())
    }

    fn queued_generations(&self) -> usize {
        self.queue.iter().filter(|t| matches!(t, Task::Generate { .. })).count()
    }

    fn synthesize(&mut self, triplet: &Triplet) -> Result<()> {
        let graph = match self.graph.take() {
            Some(graph) => graph,
            None if triplet.same_fact(&self.seed) => {
                let graph = KnowledgeGraph::new(&self.graph_id, triplet.clone())?;
                self.graph = Some(graph.clone());
                self.enqueue_new_chains()?;
                return Ok(());
            }
            None => {
                return Err(PipelineError::MalformedInput(format!(
                    "{triplet} validated before the seed fact"
                )))
            }
        };
        match synthesize_and_sequence(&graph, triplet, &self.config) {
            Ok(synthesis) => {
                self.graph = Some(synthesis.graph);
                self.enqueue_new_chains()
            }
            Err(PipelineError::Graph(KgError::DuplicateLink { subject, object })) => {
                log::warn!("rejecting {triplet}: {subject:?} and {object:?} are already linked");
                self.rejected_links.push(triplet.to_string());
                self.graph = Some(graph);
                Ok(())
            }
            Err(e) => {
                self.graph = Some(graph);
                Err(e)
            }
        }
    }

    fn enqueue_new_chains(&mut self) -> Result<()> {
        let graph = self.graph.as_ref().expect("graph exists after synthesis");
        for chain in sequence_chains(graph, &self.config)? {
            if self.chain_status.contains_key(&chain.chain_id) {
                continue;
            }
            let hops: Vec<Triplet> = chain.hops().cloned().collect();
            let query = match generate_query(QueryInput::Chain(&hops), &self.config.templates) {
                Ok(q) => q,
                Err(e) => {
                    log::warn!("cannot question chain {}: {e}", chain.chain_id);
                    continue;
                }
            };
            self.chain_status.insert(chain.chain_id.clone(), ChainStatus::Pending);
            self.chains.push(chain);
            self.queue.push_back(Task::Validate {
                input: KnowledgeInput::Chain(hops),
                query,
                attempt: 0,
            });
        }
        Ok(())
    }

    fn run_generation(&mut self, prober: &Prober, query: String, fact: Triplet) -> Result<()> {
        if self.iterations >= self.config.max_iterations {
            return Ok(());
        }
        let tag = QueryTag::fact(fact);
        let extraction = cot_generate_candidates(&query, Some(&tag), prober, &self.config.templates)?;
        self.iterations += 1;
        let mut seen = BTreeSet::new();
        for candidate in extraction.candidates() {
            let known = self.graph.as_ref().is_some_and(|g| g.contains_fact(&candidate.triplet));
            if known || !seen.insert(candidate.triplet.to_string()) {
                continue;
            }
            let id = self.fresh_id('c');
            self.candidates.push(PendingCandidate { id, candidate });
        }
        Ok(())
    }

    /// Drives the pipeline with a fixed list of review steps.
    ///
    /// The pipeline resumes after every step that leaves nothing pending.
    pub fn run_script(&mut self, prober: &Prober, steps: &[ScriptStep]) -> Result<PipelineStatus> {
        self.resume(prober)?;
        for step in steps {
            match step {
                ScriptStep::Candidate { id, action } => self.decide(id, action.clone())?,
                ScriptStep::Refine { id, query } => self.refine(
                    id,
                    Refinement {
                        query: query.clone(),
                        input: None,
                    },
                )?,
            }
            if !self.has_pending_review() {
                self.resume(prober)?;
            }
        }
        self.resume(prober)
    }

    /// Canonical JSON of the full state.
    pub fn checkpoint_json(&self) -> String {
        dataset::to_canonical_json(self).expect("pipeline state serializes")
    }

    /// SHA-256 of the canonical checkpoint, hex encoded.
    pub fn checkpoint_hash(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint_json().as_bytes()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        dataset::write_atomic(path, self.checkpoint_json().as_bytes())
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
        let pipeline: Pipeline = serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        pipeline.config.validate()?;
        Ok(pipeline)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fixtures::{hp_mini, t};
    use crate::probe::{MockResponder, ProbeOptions, ScriptedEndpoint};

    fn prober(endpoint: impl crate::probe::Endpoint + 'static) -> Prober {
        Prober::new(
            Arc::new(endpoint),
            ProbeOptions {
                samples_per_query: 3,
                max_parallel: 2,
                ..ProbeOptions::default()
            },
        )
    }

    #[test]
    fn seed_validates_first_time() {
        let p = prober(MockResponder::new(&hp_mini(), 0.0, 0).unwrap());
        let input = KnowledgeInput::Triplet(hp_mini().seed().clone());
        let (_, outcome) = validate_knowledge(&input, &p, &PipelineConfig::default(), |_, _| {
            panic!("no refinement expected")
        })
        .unwrap();
        assert_eq!(outcome.status, ValidationStatus::Validated { attempt: 0 });
        assert_eq!(outcome.query, "Where did Harry Potter study?");
    }

    #[test]
    fn unknown_fact_is_discarded_after_k_max() {
        let p = prober(MockResponder::new(&hp_mini(), 0.0, 0).unwrap());
        let input = KnowledgeInput::Triplet(t("Harry Potter", "pet", "Hedwig"));
        let mut asked = 0;
        let (_, outcome) = validate_knowledge(&input, &p, &PipelineConfig::default(), |o, _| {
            assert!(matches!(o.status, ValidationStatus::NeedsReview { .. }));
            asked += 1;
            Refinement::default()
        })
        .unwrap();
        assert_eq!(outcome.status, ValidationStatus::Discarded { attempts: 3 });
        assert_eq!(asked, 2);
    }

    #[test]
    fn refined_query_validates_on_second_attempt() {
        let p = prober(
            ScriptedEndpoint::new()
                .with_rule("Where did Harry Potter go to school?", ["Hogwarts, of course."])
                .with_rule("Where did Harry Potter study?", ["At home."]),
        );
        let input = KnowledgeInput::Triplet(hp_mini().seed().clone());
        let (_, outcome) = validate_knowledge(&input, &p, &PipelineConfig::default(), |_, _| Refinement {
            query: Some("Where did Harry Potter go to school?".into()),
            input: None,
        })
        .unwrap();
        assert_eq!(outcome.status, ValidationStatus::Validated { attempt: 1 });
    }

    #[test]
    fn endpoint_failure_is_not_a_miss() {
        let p = prober(ScriptedEndpoint::new());
        let input = KnowledgeInput::Triplet(hp_mini().seed().clone());
        let err = validate_knowledge(&input, &p, &PipelineConfig::default(), |_, _| Refinement::default()).unwrap_err();
        assert!(matches!(err, PipelineError::EndpointFailure(_)));
    }

    #[test]
    fn segmentation() {
        let facts = segment_facts("Harry Potter is a wizard. He studied at Hogwarts! Yes.\nGryffindor is his house");
        assert_eq!(
            facts,
            vec![
                "Harry Potter is a wizard",
                "He studied at Hogwarts",
                "Gryffindor is his house"
            ]
        );
        assert!(segment_facts("").is_empty());
    }

    #[test]
    fn extraction_parsing() {
        let two = parse_triplets("(a, b, c) (d, e, f)").unwrap();
        assert_eq!(two, vec![t("a", "b", "c"), t("d", "e", "f")]);
        assert_eq!(parse_triplets("(a,b,c);\n(d , e , f)").unwrap().len(), 2);
        assert_eq!(parse_triplets("(a, b) (x, y, z)").unwrap(), vec![t("x", "y", "z")]);
        assert_eq!(parse_triplets("(a, b, c, d) (x, , z)").map_err(|_| ()), Err(()));
        assert!(parse_triplets("Harry studied at Hogwarts").is_err());
        assert_eq!(parse_triplets("").unwrap(), vec![]);
    }

    fn candidates() -> Vec<CandidateTriplet> {
        [
            t("Harry Potter", "studied at", "Hogwarts"),
            t("Harry Potter", "house", "Gryffindor"),
            t("Harry Potter's education", "covered in", "series"),
        ]
        .into_iter()
        .map(|triplet| CandidateTriplet {
            triplet,
            provenance: Provenance {
                source_query: "Where did Harry Potter study?".into(),
                cot_excerpt: String::new(),
            },
            review: ReviewState::Pending,
        })
        .collect()
    }

    fn raw(s: &str, r: &str, o: &str) -> RawTriplet {
        RawTriplet {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
            object_aliases: vec![],
        }
    }

    #[test]
    fn review_accept_reject_add_edit() {
        let mut list = candidates();
        let kept = apply_review(
            &mut list,
            &[
                ReviewDecision::Accept { index: 0 },
                ReviewDecision::Accept { index: 1 },
                ReviewDecision::Reject { index: 2 },
            ],
        )
        .unwrap();
        assert_eq!(kept.len(), 2);

        let kept = apply_review(
            &mut list,
            &[ReviewDecision::Add {
                triplet: raw("Draco Malfoy", "house", "Slytherin"),
            }],
        )
        .unwrap();
        assert_eq!(kept.len(), 3);
        assert_eq!(list[3].review, ReviewState::HumanAdded);

        let mut list = candidates();
        let kept = apply_review(
            &mut list,
            &[ReviewDecision::Edit {
                index: 1,
                triplet: raw("Harry Potter", "house", "Hufflepuff"),
            }],
        )
        .unwrap();
        assert_eq!(kept, vec![t("Harry Potter", "house", "Hufflepuff")]);
    }

    #[test]
    fn review_errors_leave_list_untouched() {
        let mut list = candidates();
        let before = list.clone();
        let err = apply_review(
            &mut list,
            &[ReviewDecision::Accept { index: 0 }, ReviewDecision::Reject { index: 9 }],
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::IndexOutOfRange(9)));
        assert_eq!(list, before);
        let err = apply_review(
            &mut list,
            &[ReviewDecision::Edit {
                index: 0,
                triplet: raw("Harry Potter", " ", "x"),
            }],
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::InvalidEdit(_)));
    }

    #[test]
    fn synthesis_regrows_chains() {
        let full = hp_mini();
        let e3 = t("Gryffindor", "belongs to", "Hogwarts");
        let without: Vec<_> = full.edges().filter(|e| !e.same_fact(&e3)).cloned().collect();
        let partial = KnowledgeGraph::with_edges("hp-mini", full.seed().clone(), without).unwrap();
        let config = PipelineConfig::default();
        assert_eq!(sequence_chains(&partial, &config).unwrap().len(), 2);
        let synthesis = synthesize_and_sequence(&partial, &e3, &config).unwrap();
        assert_eq!(synthesis.chains.len(), 3);

        let unrelated = t("Draco Malfoy", "house", "Slytherin");
        let same = synthesize_and_sequence(&partial, &unrelated, &config).unwrap();
        assert_eq!(same.chains.len(), 2);

        let dup = t("Gryffindor", "rival of", "Hogwarts");
        assert!(matches!(
            synthesize_and_sequence(&synthesis.graph, &dup, &config),
            Err(PipelineError::Graph(KgError::DuplicateLink { .. }))
        ));
    }

    #[test]
    fn chain_cap() {
        let config = PipelineConfig {
            l_max: 1,
            ..PipelineConfig::default()
        };
        let chains = sequence_chains(&hp_mini(), &config).unwrap();
        assert_eq!(chains.len(), 1);
        assert!(PipelineConfig {
            l_max: 6,
            ..PipelineConfig::default()
        }
        .validate()
        .is_err());
    }
}
