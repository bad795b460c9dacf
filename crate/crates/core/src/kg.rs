//! Directed knowledge graph of model-held facts.
//!
//! A graph holds at most one edge per ordered `(subject, object)` pair. Edits are
//! expressed as [`EditDelta`] batches and applied functionally: the input graph is
//! never mutated. Implied facts are approximated by bounded simple-path search.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest implication chain the toolkit enumerates or probes.
pub const MAX_CHAIN_LEN: usize = 5;

/// Prefix used for placeholder objects written by deep-subject expansion.
pub const REDACTED_PREFIX: &str = "REDACTED:";

/// Separator for composite relation labels of deduced facts.
pub const COMPOSE: &str = "∘";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KgError {
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),
    #[error("edge not present in graph: {0}")]
    MissingEdge(String),
    #[error("a link from {subject:?} to {object:?} already exists")]
    DuplicateLink { subject: String, object: String },
    #[error("conflicting deltas touch {0}")]
    ConflictingDeltas(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("chain length cap must be within 1..={MAX_CHAIN_LEN}, got {0}")]
    InvalidLength(usize),
    #[error("invalid edit: {0}")]
    InvalidDelta(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

pub type Result<T> = std::result::Result<T, KgError>;

/// Trims and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether an object label is a deep-subject placeholder.
pub fn is_redacted(label: &str) -> bool {
    label.starts_with(REDACTED_PREFIX)
}

/// A single fact `(subject, relation, object)`.
///
/// Labels are whitespace-normalized on construction and never empty. Aliases are
/// alternative surface forms of the object that count as a hit when probing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTriplet", into = "RawTriplet")]
pub struct Triplet {
    subject: String,
    relation: String,
    object: String,
    object_aliases: Vec<String>,
}

/// Unvalidated wire form of a [`Triplet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub object_aliases: Vec<String>,
}

impl TryFrom<RawTriplet> for Triplet {
    type Error = KgError;

    fn try_from(raw: RawTriplet) -> Result<Self> {
        Triplet::new(&raw.subject, &raw.relation, &raw.object)?.with_aliases(raw.object_aliases)
    }
}

impl From<Triplet> for RawTriplet {
    fn from(t: Triplet) -> Self {
        RawTriplet {
            subject: t.subject,
            relation: t.relation,
            object: t.object,
            object_aliases: t.object_aliases,
        }
    }
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        let subject = normalize_label(subject);
        let relation = normalize_label(relation);
        let object = normalize_label(object);
        for (name, value) in [("subject", &subject), ("relation", &relation), ("object", &object)] {
            if value.is_empty() {
                return Err(KgError::InvalidTriplet(format!("empty {name}")));
            }
        }
        Ok(Triplet {
            subject,
            relation,
            object,
            object_aliases: Vec::new(),
        })
    }

    /// Replaces the alias list. Aliases are normalized, deduplicated and sorted.
    pub fn with_aliases<I, S>(mut self, aliases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = BTreeSet::new();
        for alias in aliases {
            let alias = normalize_label(alias.as_ref());
            if alias.is_empty() {
                return Err(KgError::InvalidTriplet("empty object alias".into()));
            }
            out.insert(alias);
        }
        self.object_aliases = out.into_iter().collect();
        Ok(self)
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    pub fn object_aliases(&self) -> &[String] {
        &self.object_aliases
    }

    /// Same subject, relation and object; aliases are ignored.
    pub fn same_fact(&self, other: &Triplet) -> bool {
        self.subject == other.subject && self.relation == other.relation && self.object == other.object
    }

    /// Copy with a different object and no aliases.
    pub fn with_object(&self, object: &str) -> Result<Triplet> {
        Triplet::new(&self.subject, &self.relation, object)
    }

    /// Copy with a different relation, keeping aliases.
    pub fn with_relation(&self, relation: &str) -> Result<Triplet> {
        let mut t = Triplet::new(&self.subject, relation, &self.object)?;
        t.object_aliases = self.object_aliases.clone();
        Ok(t)
    }

    fn link_key(&self) -> (String, String) {
        (self.subject.clone(), self.object.clone())
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

/// Change to a graph's edge set.
///
/// `Modify` keeps the subject and rewrites exactly one of relation or object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditDelta {
    Add { new: Triplet },
    Remove { old: Triplet },
    Modify { old: Triplet, new: Triplet },
}

impl EditDelta {
    pub fn modify(old: Triplet, new: Triplet) -> Result<Self> {
        check_modify(&old, &new)?;
        Ok(EditDelta::Modify { old, new })
    }
}

fn check_modify(old: &Triplet, new: &Triplet) -> Result<()> {
    if old.subject != new.subject {
        return Err(KgError::InvalidDelta(format!("{old} -> {new} changes the subject")));
    }
    let relation_changed = old.relation != new.relation;
    let object_changed = old.object != new.object;
    match (relation_changed, object_changed) {
        (true, false) | (false, true) => Ok(()),
        (true, true) => Err(KgError::InvalidDelta(format!(
            "{old} -> {new} rewrites both relation and object"
        ))),
        (false, false) => Err(KgError::InvalidDelta(format!("{old} -> {new} changes nothing"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditScope {
    /// Rewrite the target edge only.
    Shallow,
    /// Rewrite every edge whose subject is the target's subject.
    DeepSubject,
}

/// A requested object change for one fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub target: Triplet,
    pub new_object: String,
    pub scope: EditScope,
    /// Original object -> replacement, used for non-target edges under deep scope.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub replacements: BTreeMap<String, String>,
}

impl EditRequest {
    pub fn new(target: Triplet, new_object: &str, scope: EditScope) -> Result<Self> {
        let new_object = normalize_label(new_object);
        if new_object.is_empty() {
            return Err(KgError::InvalidDelta("empty replacement object".into()));
        }
        if new_object == target.object {
            return Err(KgError::InvalidDelta(format!(
                "new object equals the current object {new_object:?}"
            )));
        }
        Ok(EditRequest {
            target,
            new_object,
            scope,
            replacements: BTreeMap::new(),
        })
    }

    pub fn with_replacements(mut self, replacements: BTreeMap<String, String>) -> Self {
        self.replacements = replacements;
        self
    }
}

/// A fact implied by at least one bounded path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeducedFact {
    pub endpoints: (String, String),
    pub witness_paths: Vec<Vec<Triplet>>,
    /// Hop relations of the first witness joined by `∘`. Informational only.
    pub composite_relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawGraph {
    id: String,
    seed: Triplet,
    entities: Vec<String>,
    edges: Vec<Triplet>,
}

/// Directed graph with a designated seed fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct KnowledgeGraph {
    id: String,
    seed: Triplet,
    entities: BTreeSet<String>,
    edges: BTreeMap<(String, String), Triplet>,
}

impl TryFrom<RawGraph> for KnowledgeGraph {
    type Error = KgError;

    fn try_from(raw: RawGraph) -> Result<Self> {
        KnowledgeGraph::from_parts(raw.id, raw.seed, raw.entities, raw.edges)
    }
}

impl From<KnowledgeGraph> for RawGraph {
    fn from(g: KnowledgeGraph) -> Self {
        RawGraph {
            id: g.id,
            seed: g.seed,
            entities: g.entities.into_iter().collect(),
            edges: g.edges.into_values().collect(),
        }
    }
}

impl KnowledgeGraph {
    /// Graph containing only the seed edge.
    pub fn new(id: &str, seed: Triplet) -> Result<Self> {
        Self::with_edges(id, seed.clone(), [seed])
    }

    /// Graph from an edge list. The seed must be among the edges.
    pub fn with_edges<I>(id: &str, seed: Triplet, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = Triplet>,
    {
        let mut graph = KnowledgeGraph {
            id: id.trim().to_string(),
            seed: seed.clone(),
            entities: BTreeSet::new(),
            edges: BTreeMap::new(),
        };
        if graph.id.is_empty() {
            return Err(KgError::InvalidGraph("empty graph id".into()));
        }
        for edge in edges {
            graph.insert_edge(edge)?;
        }
        if !graph.contains_fact(&seed) {
            return Err(KgError::InvalidGraph(format!("seed {seed} is not an edge")));
        }
        Ok(graph)
    }

    /// Reassembles a stored graph. The seed edge may be absent (edited graphs).
    pub fn from_parts<E, T>(id: String, seed: Triplet, entities: E, edges: T) -> Result<Self>
    where
        E: IntoIterator<Item = String>,
        T: IntoIterator<Item = Triplet>,
    {
        if id.trim().is_empty() {
            return Err(KgError::InvalidGraph("empty graph id".into()));
        }
        let mut graph = KnowledgeGraph {
            id,
            seed,
            entities: BTreeSet::new(),
            edges: BTreeMap::new(),
        };
        for entity in entities {
            let entity = normalize_label(&entity);
            if entity.is_empty() {
                return Err(KgError::InvalidGraph("empty entity label".into()));
            }
            graph.entities.insert(entity);
        }
        for edge in edges {
            for end in [edge.subject(), edge.object()] {
                if !graph.entities.contains(end) {
                    return Err(KgError::InvalidGraph(format!(
                        "edge {edge} references undeclared entity {end:?}"
                    )));
                }
            }
            let key = edge.link_key();
            if graph.edges.contains_key(&key) {
                return Err(KgError::DuplicateLink {
                    subject: key.0,
                    object: key.1,
                });
            }
            graph.edges.insert(key, edge);
        }
        Ok(graph)
    }

    /// Inserts an edge and its endpoints.
    ///
    /// Returns `Ok(false)` when the identical fact is already stored, and
    /// `DuplicateLink` when the pair is taken by a different relation.
    pub fn insert_edge(&mut self, edge: Triplet) -> Result<bool> {
        let key = edge.link_key();
        if let Some(existing) = self.edges.get(&key) {
            if existing.same_fact(&edge) {
                return Ok(false);
            }
            return Err(KgError::DuplicateLink {
                subject: key.0,
                object: key.1,
            });
        }
        self.entities.insert(edge.subject.clone());
        self.entities.insert(edge.object.clone());
        self.edges.insert(key, edge);
        Ok(true)
    }

    /// Adds an isolated entity. Returns whether it was new.
    pub fn insert_entity(&mut self, entity: &str) -> Result<bool> {
        let entity = normalize_label(entity);
        if entity.is_empty() {
            return Err(KgError::InvalidGraph("empty entity label".into()));
        }
        Ok(self.entities.insert(entity))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn seed(&self) -> &Triplet {
        &self.seed
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    /// Edges ordered by `(subject, object)`.
    pub fn edges(&self) -> impl Iterator<Item = &Triplet> {
        self.edges.values()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.entities.contains(entity)
    }

    pub fn contains_fact(&self, fact: &Triplet) -> bool {
        self.edge_between(fact.subject(), fact.object())
            .is_some_and(|e| e.same_fact(fact))
    }

    pub fn edge_between(&self, subject: &str, object: &str) -> Option<&Triplet> {
        self.edges.get(&(subject.to_string(), object.to_string()))
    }

    /// Edges leaving `subject`, ordered by object.
    pub fn out_edges<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a Triplet> + 'a {
        self.edges
            .range((subject.to_string(), String::new())..)
            .take_while(move |((s, _), _)| s == subject)
            .map(|(_, e)| e)
    }

    /// Edges leaving `subject` with the given relation.
    pub fn lookup<'a>(&'a self, subject: &'a str, relation: &'a str) -> impl Iterator<Item = &'a Triplet> + 'a {
        self.out_edges(subject).filter(move |e| e.relation() == relation)
    }

    /// Whether `path` is a connected sequence of edges stored in this graph.
    pub fn is_path(&self, path: &[Triplet]) -> bool {
        !path.is_empty()
            && path.iter().all(|e| self.contains_fact(e))
            && path.windows(2).all(|w| w[0].object() == w[1].subject())
    }

    fn require_entity(&self, entity: &str) -> Result<()> {
        if self.entities.contains(entity) {
            Ok(())
        } else {
            Err(KgError::UnknownEntity(entity.to_string()))
        }
    }

    /// Applies an edit batch: removed and modified originals leave, added and
    /// modified replacements join, and new endpoints are added to the entity set.
    pub fn apply_delta(&self, deltas: &[EditDelta]) -> Result<KnowledgeGraph> {
        let mut touched: BTreeMap<(String, String), &Triplet> = BTreeMap::new();
        let mut incoming: Vec<&Triplet> = Vec::new();

        for delta in deltas {
            let old = match delta {
                EditDelta::Add { new } => {
                    if let Some(existing) = self.edges.get(&new.link_key()) {
                        return Err(KgError::DuplicateLink {
                            subject: existing.subject.clone(),
                            object: existing.object.clone(),
                        });
                    }
                    incoming.push(new);
                    continue;
                }
                EditDelta::Remove { old } => old,
                EditDelta::Modify { old, new } => {
                    check_modify(old, new)?;
                    incoming.push(new);
                    old
                }
            };
            if !self.contains_fact(old) {
                return Err(KgError::MissingEdge(old.to_string()));
            }
            if touched.insert(old.link_key(), old).is_some() {
                return Err(KgError::ConflictingDeltas(old.to_string()));
            }
        }

        let mut next = self.clone();
        for key in touched.keys() {
            next.edges.remove(key);
        }
        for new in incoming {
            next.insert_edge(new.clone()).and_then(|inserted| {
                if inserted {
                    Ok(())
                } else {
                    Err(KgError::ConflictingDeltas(new.to_string()))
                }
            })?;
        }
        Ok(next)
    }

    /// Turns an edit request into concrete deltas.
    pub fn expand_edit_request(&self, request: &EditRequest) -> Result<Vec<EditDelta>> {
        let target = &request.target;
        if !self.contains_fact(target) {
            return Err(KgError::MissingEdge(target.to_string()));
        }
        match request.scope {
            EditScope::Shallow => {
                let new = target.with_object(&request.new_object)?;
                Ok(vec![EditDelta::modify(target.clone(), new)?])
            }
            EditScope::DeepSubject => self
                .out_edges(target.subject())
                .map(|edge| {
                    let object = if edge.same_fact(target) {
                        request.new_object.clone()
                    } else if let Some(replacement) = request.replacements.get(edge.object()) {
                        replacement.clone()
                    } else {
                        format!("{REDACTED_PREFIX}{}", edge.object())
                    };
                    EditDelta::modify(edge.clone(), edge.with_object(&object)?)
                })
                .collect(),
        }
    }

    /// Every simple directed path from `source` to `target` with at most
    /// `max_len` hops.
    ///
    /// Paths are ordered by length, then by the sequence of visited entities,
    /// then by the sequence of relations.
    pub fn enumerate_chains(&self, source: &str, target: &str, max_len: usize) -> Result<Vec<Vec<Triplet>>> {
        if !(1..=MAX_CHAIN_LEN).contains(&max_len) {
            return Err(KgError::InvalidLength(max_len));
        }
        self.require_entity(source)?;
        self.require_entity(target)?;

        let mut found = Vec::new();
        if source != target {
            let mut path = Vec::new();
            let mut visited = BTreeSet::from([source]);
            self.walk(source, target, max_len, &mut visited, &mut path, &mut found);
        }
        found.sort_by_cached_key(|p| chain_sort_key(p));
        Ok(found)
    }

    fn walk<'a>(
        &'a self,
        at: &'a str,
        target: &str,
        remaining: usize,
        visited: &mut BTreeSet<&'a str>,
        path: &mut Vec<&'a Triplet>,
        found: &mut Vec<Vec<Triplet>>,
    ) {
        for edge in self.out_edges(at) {
            let next = edge.object();
            if visited.contains(next) {
                continue;
            }
            path.push(edge);
            if next == target {
                found.push(path.iter().map(|e| (*e).clone()).collect());
            } else if remaining > 1 {
                visited.insert(next);
                self.walk(next, target, remaining - 1, visited, path, found);
                visited.remove(next);
            }
            path.pop();
        }
    }

    /// Bounded path-closure membership: present iff some path of at most
    /// `max_len` hops links `subject` to `object`.
    pub fn deduces(&self, subject: &str, object: &str, max_len: usize) -> Result<Option<DeducedFact>> {
        let witness_paths = self.enumerate_chains(subject, object, max_len)?;
        let Some(first) = witness_paths.first() else {
            return Ok(None);
        };
        let composite_relation = first.iter().map(Triplet::relation).collect::<Vec<_>>().join(COMPOSE);
        Ok(Some(DeducedFact {
            endpoints: (subject.to_string(), object.to_string()),
            witness_paths,
            composite_relation,
        }))
    }

    /// Splits edges into those with subject `s0` and the contextual rest.
    pub fn partition_contextual(&self, s0: &str) -> Result<(BTreeSet<Triplet>, BTreeSet<Triplet>)> {
        self.require_entity(s0)?;
        Ok(self.edges().cloned().partition(|e| e.subject() == s0))
    }
}

/// Ordering key for chains: length, visited entities, relations.
pub fn chain_sort_key(path: &[Triplet]) -> (usize, Vec<String>, Vec<String>) {
    let mut entities = Vec::with_capacity(path.len() + 1);
    if let Some(first) = path.first() {
        entities.push(first.subject().to_string());
    }
    entities.extend(path.iter().map(|e| e.object().to_string()));
    let relations = path.iter().map(|e| e.relation().to_string()).collect();
    (path.len(), entities, relations)
}

/// Checks that `hops` is a non-empty connected chain from `source` to `target`
/// of at most [`MAX_CHAIN_LEN`] hops that never revisits an entity.
pub fn check_chain_shape(hops: &[Triplet], source: &str, target: &str) -> std::result::Result<(), String> {
    let (Some(first), Some(last)) = (hops.first(), hops.last()) else {
        return Err("chain has no hops".into());
    };
    if hops.len() > MAX_CHAIN_LEN {
        return Err(format!("chain has {} hops, cap is {MAX_CHAIN_LEN}", hops.len()));
    }
    if first.subject() != source {
        return Err(format!("first hop subject {:?} is not {source:?}", first.subject()));
    }
    if last.object() != target {
        return Err(format!("last hop object {:?} is not {target:?}", last.object()));
    }
    let mut seen = BTreeSet::from([first.subject()]);
    for (i, pair) in hops.windows(2).enumerate() {
        if pair[0].object() != pair[1].subject() {
            return Err(format!(
                "hop {} subject {:?} does not follow hop {} object {:?}",
                i + 2,
                pair[1].subject(),
                i + 1,
                pair[0].object()
            ));
        }
    }
    for hop in hops {
        if !seen.insert(hop.object()) {
            return Err(format!("entity {:?} repeats along the chain", hop.object()));
        }
    }
    Ok(())
}
