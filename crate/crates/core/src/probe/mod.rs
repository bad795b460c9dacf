//! Estimating how often a model reproduces an expected object.
//!
//! A query is sampled `k` times and each response is checked for the expected
//! object (or one of its aliases) by normalized token containment. The hit
//! ratio `h/k` is the probability estimate used by the edit metrics.

mod endpoint;
mod mock;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::Triplet;
use crate::metrics::{PreferenceCase, PromptFamily};

pub use endpoint::{EndpointConfig, HttpEndpoint, MockEdit, MockSettings};
pub use mock::{sample_seed, MockResponder, ScriptedEndpoint, DISTRACTOR};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("query {0:?} carries no fact tag")]
    UnknownQueryTag(String),
    #[error("endpoint cannot score continuations")]
    ScoringUnsupported,
    #[error("environment variable {0} with the bearer token is not set")]
    AuthMissing(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

impl EndpointError {
    /// Transient faults worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            EndpointError::Transport(_) => true,
            EndpointError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("no responses to score")]
    EmptyResponses,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// The fact path a query probes. Graph-backed mocks answer from it; real
/// endpoints ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTag {
    pub hops: Vec<Triplet>,
}

impl QueryTag {
    pub fn fact(triplet: Triplet) -> Self {
        QueryTag { hops: vec![triplet] }
    }

    pub fn chain(hops: Vec<Triplet>) -> Self {
        QueryTag { hops }
    }
}

/// One sampling request.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub query_id: String,
    pub sample_index: usize,
    pub messages: Vec<ChatMessage>,
    pub tag: Option<QueryTag>,
}

impl CompletionRequest {
    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str())
    }
}

/// A continuation-scoring request.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub prompt: String,
    pub continuation: String,
    pub tag: Option<QueryTag>,
}

/// Something that answers prompts.
pub trait Endpoint: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, EndpointError>;

    /// Total log-probability of `continuation` given the prompt.
    fn score(&self, _request: &ScoreRequest) -> Result<f64, EndpointError> {
        Err(EndpointError::ScoringUnsupported)
    }
}

/// Case-folded, punctuation-free, whitespace-separated tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let folded: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    folded.split_whitespace().map(str::to_string).collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Whether `response` mentions `expected` or an alias.
pub fn is_hit<S: AsRef<str>>(response: &str, expected: &str, aliases: &[S]) -> bool {
    let tokens = normalize_tokens(response);
    std::iter::once(expected)
        .chain(aliases.iter().map(AsRef::as_ref))
        .any(|target| contains_run(&tokens, &normalize_tokens(target)))
}

/// Hit count and ratio of responses mentioning the expected object.
pub fn estimate_probability<R, S>(
    responses: &[R],
    expected_object: &str,
    aliases: &[S],
) -> Result<(usize, f64), ProbeError>
where
    R: AsRef<str>,
    S: AsRef<str>,
{
    if responses.is_empty() {
        return Err(ProbeError::EmptyResponses);
    }
    let hits = responses
        .iter()
        .filter(|r| is_hit(r.as_ref(), expected_object, aliases))
        .count();
    Ok((hits, hits as f64 / responses.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    /// Delay before the first retry; doubles each time.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub samples_per_query: usize,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    /// Thread earlier questions and answers of a chain into later prompts.
    pub conversation: bool,
    /// Keep raw responses in the outcomes.
    pub keep_responses: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            samples_per_query: 5,
            max_parallel: 4,
            retry: RetryPolicy::default(),
            conversation: false,
            keep_responses: false,
        }
    }
}

/// A question with its expected answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeQuery {
    pub query_id: String,
    pub text: String,
    pub expected_object: String,
    pub aliases: Vec<String>,
    pub tag: Option<QueryTag>,
}

impl ProbeQuery {
    /// Query probing one fact, expecting its object.
    pub fn for_fact(query_id: impl Into<String>, text: impl Into<String>, fact: &Triplet) -> Self {
        ProbeQuery {
            query_id: query_id.into(),
            text: text.into(),
            expected_object: fact.object().to_string(),
            aliases: fact.object_aliases().to_vec(),
            tag: Some(QueryTag::fact(fact.clone())),
        }
    }
}

/// Sampling result for one query. `p` is absent when sampling failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub samples: usize,
    pub hits: usize,
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_responses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryOutcome {
    fn failed(query_id: &str, samples: usize, error: &EndpointError) -> Self {
        QueryOutcome {
            query_id: query_id.to_string(),
            samples,
            hits: 0,
            p: None,
            raw_responses: None,
            error: Some(error.to_string()),
        }
    }
}

/// Before or after the edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pre" => Ok(Phase::Pre),
            "post" => Ok(Phase::Post),
            other => Err(format!("unknown phase {other:?}, expected pre or post")),
        }
    }
}

/// Probe results for one chain (or one contextual fact) in one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub chain_id: String,
    pub phase: Phase,
    pub steps: Vec<QueryOutcome>,
}

/// One raw sample, as persisted in transcript files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub query_id: String,
    pub sample_index: usize,
    pub text: String,
}

/// Samples an endpoint with retries and bounded parallelism.
#[derive(Clone)]
pub struct Prober {
    endpoint: Arc<dyn Endpoint>,
    options: ProbeOptions,
}

impl Prober {
    pub fn new(endpoint: Arc<dyn Endpoint>, options: ProbeOptions) -> Self {
        assert!(options.samples_per_query >= 1, "at least one sample per query");
        assert!(options.max_parallel >= 1, "at least one request in flight");
        Prober { endpoint, options }
    }

    pub fn options(&self) -> &ProbeOptions {
        &self.options
    }

    pub fn endpoint(&self) -> &Arc<dyn Endpoint> {
        &self.endpoint
    }

    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.max_parallel)
            .build()
            .expect("thread pool")
    }

    /// Sends one request, retrying transient faults with exponential backoff.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, EndpointError> {
        let policy = self.options.retry;
        let mut delay = policy.base_delay;
        let mut attempt = 1;
        loop {
            match self.endpoint.complete(request) {
                Err(err) if err.is_retryable() && attempt < policy.attempts => {
                    log::warn!(
                        "{} sample {} attempt {attempt} failed: {err}; retrying in {delay:?}",
                        request.query_id,
                        request.sample_index
                    );
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Draws `samples_per_query` responses to a single prompt.
    pub fn sample(&self, query_id: &str, text: &str, tag: Option<&QueryTag>) -> Result<Vec<String>, EndpointError> {
        let k = self.options.samples_per_query;
        let requests: Vec<_> = (0..k)
            .map(|i| CompletionRequest {
                query_id: query_id.to_string(),
                sample_index: i,
                messages: vec![ChatMessage::user(text)],
                tag: tag.cloned(),
            })
            .collect();
        self.run_parallel(&requests).into_iter().collect()
    }

    fn run_parallel(&self, requests: &[CompletionRequest]) -> Vec<Result<String, EndpointError>> {
        use rayon::prelude::*;
        self.pool()
            .install(|| requests.par_iter().map(|r| self.complete(r)).collect())
    }

    /// Probes each query independently in a fresh context. Output order follows
    /// input order; a failing query never aborts the others.
    pub fn probe_queries(&self, queries: &[ProbeQuery]) -> Vec<QueryOutcome> {
        let k = self.options.samples_per_query;
        let requests: Vec<_> = queries
            .iter()
            .flat_map(|q| {
                (0..k).map(move |i| CompletionRequest {
                    query_id: q.query_id.clone(),
                    sample_index: i,
                    messages: vec![ChatMessage::user(q.text.clone())],
                    tag: q.tag.clone(),
                })
            })
            .collect();
        let results = self.run_parallel(&requests);
        queries
            .iter()
            .zip(results.chunks(k))
            .map(|(q, chunk)| self.score_outcome(q, chunk.to_vec()))
            .collect()
    }

    /// Probes the steps of one chain. In conversation mode the `i`-th sample of
    /// each step sees the earlier questions and the `i`-th earlier answers.
    pub fn probe_chain(&self, steps: &[ProbeQuery]) -> Vec<QueryOutcome> {
        if !self.options.conversation {
            return self.probe_queries(steps);
        }
        use rayon::prelude::*;
        let k = self.options.samples_per_query;
        let transcripts: Vec<Vec<Result<String, EndpointError>>> = self.pool().install(|| {
            (0..k)
                .into_par_iter()
                .map(|i| {
                    let mut messages = Vec::new();
                    let mut answers = Vec::with_capacity(steps.len());
                    let mut broken = false;
                    for step in steps {
                        if broken {
                            answers.push(Err(EndpointError::Transport("earlier step failed".into())));
                            continue;
                        }
                        messages.push(ChatMessage::user(step.text.clone()));
                        let answer = self.complete(&CompletionRequest {
                            query_id: step.query_id.clone(),
                            sample_index: i,
                            messages: messages.clone(),
                            tag: step.tag.clone(),
                        });
                        match &answer {
                            Ok(text) => messages.push(ChatMessage::assistant(text.clone())),
                            Err(_) => broken = true,
                        }
                        answers.push(answer);
                    }
                    answers
                })
                .collect()
        });
        steps
            .iter()
            .enumerate()
            .map(|(j, step)| {
                let column = transcripts.iter().map(|t| t[j].clone()).collect();
                self.score_outcome(step, column)
            })
            .collect()
    }

    fn score_outcome(&self, query: &ProbeQuery, results: Vec<Result<String, EndpointError>>) -> QueryOutcome {
        let samples = results.len();
        let responses: Result<Vec<String>, EndpointError> = results.into_iter().collect();
        match responses {
            Err(err) => {
                log::warn!("query {} failed: {err}", query.query_id);
                QueryOutcome::failed(&query.query_id, samples, &err)
            }
            Ok(responses) => {
                let (hits, p) = estimate_probability(&responses, &query.expected_object, &query.aliases)
                    .expect("at least one sample");
                QueryOutcome {
                    query_id: query.query_id.clone(),
                    samples,
                    hits,
                    p: Some(p),
                    raw_responses: self.options.keep_responses.then_some(responses),
                    error: None,
                }
            }
        }
    }

    /// Compares the edited and original outputs by continuation scores.
    pub fn logprob_preference(
        &self,
        case_id: &str,
        family: PromptFamily,
        query: &ProbeQuery,
        o_new: &str,
        o_old: &str,
    ) -> Result<PreferenceCase, EndpointError> {
        let score = |continuation: &str| {
            self.endpoint.score(&ScoreRequest {
                prompt: query.text.clone(),
                continuation: continuation.to_string(),
                tag: query.tag.clone(),
            })
        };
        let p_new = score(o_new)?.exp().clamp(0.0, 1.0);
        let p_old = score(o_old)?.exp().clamp(0.0, 1.0);
        PreferenceCase::new(case_id, family, p_new, p_old).map_err(|e| EndpointError::Malformed(e.to_string()))
    }

    /// Fallback preference from sampled hit frequencies of each output.
    pub fn sampled_preference(
        &self,
        case_id: &str,
        family: PromptFamily,
        query: &ProbeQuery,
        o_new: &str,
        o_old: &str,
    ) -> Result<PreferenceCase, EndpointError> {
        let responses = self.sample(&query.query_id, &query.text, query.tag.as_ref())?;
        let none: &[&str] = &[];
        let (_, p_new) = estimate_probability(&responses, o_new, none).expect("non-empty");
        let (_, p_old) = estimate_probability(&responses, o_old, none).expect("non-empty");
        PreferenceCase::new(case_id, family, p_new, p_old)
            .map(PreferenceCase::sampled)
            .map_err(|e| EndpointError::Malformed(e.to_string()))
    }

    /// Scored preference when the endpoint supports it, sampled otherwise.
    pub fn preference(
        &self,
        case_id: &str,
        family: PromptFamily,
        query: &ProbeQuery,
        o_new: &str,
        o_old: &str,
    ) -> Result<PreferenceCase, EndpointError> {
        match self.logprob_preference(case_id, family, query, o_new, o_old) {
            Err(EndpointError::ScoringUnsupported) => self.sampled_preference(case_id, family, query, o_new, o_old),
            other => other,
        }
    }
}

/// Flattens outcomes into per-sample transcript lines. Outcomes without
/// retained responses contribute nothing.
pub fn transcript_lines(outcomes: &[QueryOutcome]) -> Vec<TranscriptLine> {
    outcomes
        .iter()
        .flat_map(|o| {
            o.raw_responses
                .iter()
                .flatten()
                .enumerate()
                .map(|(i, text)| TranscriptLine {
                    query_id: o.query_id.clone(),
                    sample_index: i,
                    text: text.clone(),
                })
        })
        .collect()
}
