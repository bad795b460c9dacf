use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{normalize_tokens, CompletionRequest, Endpoint, EndpointError, QueryTag, ScoreRequest};
use crate::kg::{is_redacted, KnowledgeGraph, Triplet};

/// What the graph-backed mock says when it does not know the answer.
pub const DISTRACTOR: &str = "I am not sure.";

const KNOWN_SCORE: f64 = 0.9;
const UNKNOWN_SCORE: f64 = 0.1;

/// Deterministic stand-in for a model whose knowledge is exactly a graph.
///
/// A tagged query is answered with the probed object when every tagged hop is a
/// stored edge. With probability `noise` the answer flips between knowing and
/// not knowing. Each sample draws from its own generator seeded by
/// `(seed, query_id, sample_index)`, so results do not depend on scheduling.
/// Objects carrying the redaction prefix count as forgotten.
#[derive(Debug, Clone)]
pub struct MockResponder {
    facts: BTreeSet<(String, String, String)>,
    objects: BTreeMap<(String, String), Vec<String>>,
    noise: f64,
    seed: u64,
}

impl MockResponder {
    pub fn new(graph: &KnowledgeGraph, noise: f64, seed: u64) -> Result<Self, EndpointError> {
        Self::from_graphs([graph], noise, seed)
    }

    /// Mock that knows the union of several graphs.
    pub fn from_graphs<'a, I>(graphs: I, noise: f64, seed: u64) -> Result<Self, EndpointError>
    where
        I: IntoIterator<Item = &'a KnowledgeGraph>,
    {
        if !(0.0..1.0).contains(&noise) {
            return Err(EndpointError::Config(format!("mock noise {noise} outside [0, 1)")));
        }
        let mut facts = BTreeSet::new();
        let mut objects: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for edge in graphs.into_iter().flat_map(KnowledgeGraph::edges) {
            if is_redacted(edge.object()) {
                continue;
            }
            facts.insert((
                edge.subject().to_string(),
                edge.relation().to_string(),
                edge.object().to_string(),
            ));
            objects
                .entry((edge.subject().to_string(), edge.relation().to_string()))
                .or_default()
                .push(edge.object().to_string());
        }
        Ok(MockResponder {
            facts,
            objects,
            noise,
            seed,
        })
    }

    fn knows(&self, hop: &Triplet) -> bool {
        self.facts.contains(&(
            hop.subject().to_string(),
            hop.relation().to_string(),
            hop.object().to_string(),
        ))
    }

    fn flips(&self, query_id: &str, sample_index: usize) -> bool {
        if self.noise == 0.0 {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, query_id, sample_index));
        rng.random::<f64>() < self.noise
    }

    fn answer(&self, query_id: &str, sample_index: usize, tag: &QueryTag) -> Result<String, EndpointError> {
        let last = tag
            .hops
            .last()
            .ok_or_else(|| EndpointError::UnknownQueryTag(query_id.to_string()))?;
        let known = tag.hops.iter().all(|h| self.knows(h));
        if known != self.flips(query_id, sample_index) {
            return Ok(last.object().to_string());
        }
        let other = self
            .objects
            .get(&(last.subject().to_string(), last.relation().to_string()))
            .and_then(|objs| objs.iter().find(|o| o.as_str() != last.object()));
        Ok(other.cloned().unwrap_or_else(|| DISTRACTOR.to_string()))
    }
}

/// Per-sample generator seed derived from the run seed, query id and sample index.
pub fn sample_seed(seed: u64, query_id: &str, sample_index: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(query_id.as_bytes());
    hasher.update([0]);
    hasher.update((sample_index as u64).to_le_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

impl Endpoint for MockResponder {
    fn complete(&self, request: &CompletionRequest) -> Result<String, EndpointError> {
        let tag = request
            .tag
            .as_ref()
            .ok_or_else(|| EndpointError::UnknownQueryTag(request.query_id.clone()))?;
        self.answer(&request.query_id, request.sample_index, tag)
    }

    /// Log-score 0.9 for a stored object of the tagged `(subject, relation)`,
    /// 0.1 for anything else.
    fn score(&self, request: &ScoreRequest) -> Result<f64, EndpointError> {
        let last = request
            .tag
            .as_ref()
            .and_then(|t| t.hops.last())
            .ok_or_else(|| EndpointError::UnknownQueryTag(request.prompt.clone()))?;
        let wanted = normalize_tokens(&request.continuation);
        let stored = self
            .objects
            .get(&(last.subject().to_string(), last.relation().to_string()))
            .is_some_and(|objs| objs.iter().any(|o| normalize_tokens(o) == wanted));
        Ok(if stored { KNOWN_SCORE } else { UNKNOWN_SCORE }.ln())
    }
}

/// Replays canned responses keyed by prompt substrings.
///
/// The first rule whose pattern occurs in the last user message answers; its
/// responses are cycled by sample index. Unmatched prompts go to the fallback
/// endpoint when one is set.
#[derive(Clone, Default)]
pub struct ScriptedEndpoint {
    rules: Vec<(String, Vec<String>)>,
    fallback: Option<Arc<dyn Endpoint>>,
}

impl ScriptedEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule<I, S>(mut self, pattern: &str, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules
            .push((pattern.to_string(), responses.into_iter().map(Into::into).collect()));
        self
    }

    pub fn with_fallback(mut self, endpoint: Arc<dyn Endpoint>) -> Self {
        self.fallback = Some(endpoint);
        self
    }
}

impl Endpoint for ScriptedEndpoint {
    fn complete(&self, request: &CompletionRequest) -> Result<String, EndpointError> {
        let prompt = request.prompt();
        if let Some((_, responses)) = self.rules.iter().find(|(p, _)| prompt.contains(p.as_str())) {
            if responses.is_empty() {
                return Ok(String::new());
            }
            return Ok(responses[request.sample_index % responses.len()].clone());
        }
        match &self.fallback {
            Some(fallback) => fallback.complete(request),
            None => Err(EndpointError::Malformed(format!("no scripted response for {prompt:?}"))),
        }
    }

    fn score(&self, request: &ScoreRequest) -> Result<f64, EndpointError> {
        match &self.fallback {
            Some(fallback) => fallback.score(request),
            None => Err(EndpointError::ScoringUnsupported),
        }
    }
}
