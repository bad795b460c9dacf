//! Probing a bundle before and after an edit, and turning the records into a report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::dataset::{DatasetBundle, DatasetError};
use crate::kg::{EditRequest, EditScope, KgError, KnowledgeGraph, Triplet};
use crate::metrics::{
    ChainObservation, ContextObservation, FluencyMode, GenerationSample, MetricsError, MetricsReport, PreferenceCase,
    PromptFamily,
};
use crate::pipeline::{generate_query, QueryInput, QueryTemplates};
use crate::probe::{
    Endpoint, EndpointConfig, EndpointError, HttpEndpoint, MockResponder, Phase, ProbeOptions, ProbeQuery, ProbeRecord,
    Prober, QueryTag,
};

/// Chain id prefix of probe records for contextual facts.
pub const CONTEXT_PREFIX: &str = "ctx:";

/// Edited object used by the mock experiment unless another is given.
pub const DEFAULT_NEW_OBJECT: &str = "Edited Answer";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no probe record for {0}")]
    MissingProbes(String),
    #[error("probe records do not match the bundle: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("configuration: {0}")]
    Config(String),
}

impl EvalError {
    /// Process exit code: 2 configuration, 3 data, 4 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Config(_) => 2,
            EvalError::Endpoint(EndpointError::Config(_) | EndpointError::AuthMissing(_)) => 2,
            EvalError::Endpoint(_) => 4,
            EvalError::MissingProbes(_)
            | EvalError::SchemaMismatch(_)
            | EvalError::Dataset(_)
            | EvalError::Metrics(_)
            | EvalError::Graph(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A fact outside the edited subject's edges, probed to measure preservation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextFact {
    pub id: String,
    pub triplet: Triplet,
    pub query: String,
}

fn fact_query(triplet: &Triplet, templates: &QueryTemplates) -> String {
    generate_query(QueryInput::Triplet(triplet), templates)
        .unwrap_or_else(|_| format!("What is the {} of {}?", triplet.relation(), triplet.subject()))
}

/// Contextual facts of every graph: edges whose subject is not the seed subject.
pub fn context_facts(bundle: &DatasetBundle, templates: &QueryTemplates) -> Result<Vec<ContextFact>> {
    let mut facts = Vec::new();
    for graph in &bundle.graphs {
        let (_, independent) = graph.partition_contextual(graph.seed().subject())?;
        for triplet in independent {
            facts.push(ContextFact {
                id: format!("{CONTEXT_PREFIX}{}:{triplet}", graph.id()),
                query: fact_query(&triplet, templates),
                triplet,
            });
        }
    }
    Ok(facts)
}

fn step_queries(bundle: &DatasetBundle) -> Vec<(String, Vec<ProbeQuery>)> {
    bundle
        .chains
        .iter()
        .map(|chain| {
            let queries = chain
                .steps
                .iter()
                .map(|step| ProbeQuery {
                    query_id: step.query_id.clone(),
                    text: step.query.clone(),
                    expected_object: step.expected_object.clone(),
                    aliases: step.aliases.clone(),
                    tag: Some(QueryTag::fact(step.hop.clone())),
                })
                .collect();
            (chain.chain_id.clone(), queries)
        })
        .collect()
}

/// Probes every chain step and every contextual fact of a bundle.
///
/// Records come out in bundle order, chains first. Failed queries are kept
/// with an error and no ratio.
pub fn probe_bundle(
    prober: &Prober,
    bundle: &DatasetBundle,
    phase: Phase,
    templates: &QueryTemplates,
) -> Result<Vec<ProbeRecord>> {
    let mut groups = step_queries(bundle);
    for fact in context_facts(bundle, templates)? {
        let query = ProbeQuery::for_fact(fact.id.clone(), fact.query, &fact.triplet);
        groups.push((fact.id, vec![query]));
    }
    let records = if prober.options().conversation {
        groups
            .iter()
            .map(|(id, queries)| {
                let steps = if id.starts_with(CONTEXT_PREFIX) {
                    prober.probe_queries(queries)
                } else {
                    prober.probe_chain(queries)
                };
                ProbeRecord {
                    chain_id: id.clone(),
                    phase,
                    steps,
                }
            })
            .collect()
    } else {
        let flat: Vec<ProbeQuery> = groups.iter().flat_map(|(_, q)| q.iter().cloned()).collect();
        let mut outcomes = prober.probe_queries(&flat).into_iter();
        groups
            .iter()
            .map(|(id, queries)| ProbeRecord {
                chain_id: id.clone(),
                phase,
                steps: outcomes.by_ref().take(queries.len()).collect(),
            })
            .collect()
    };
    Ok(records)
}

fn index(records: &[ProbeRecord], phase: Phase) -> Result<BTreeMap<&str, &ProbeRecord>> {
    let mut map = BTreeMap::new();
    for record in records {
        if record.phase != phase {
            return Err(EvalError::SchemaMismatch(format!(
                "{} is a {:?} record in the {:?} file",
                record.chain_id, record.phase, phase
            )));
        }
        if map.insert(record.chain_id.as_str(), record).is_some() {
            return Err(EvalError::SchemaMismatch(format!("{} recorded twice", record.chain_id)));
        }
    }
    Ok(map)
}

fn ratios(record: &ProbeRecord, expected_ids: &[&str]) -> Result<Vec<f64>> {
    if record.steps.len() != expected_ids.len() {
        return Err(EvalError::SchemaMismatch(format!(
            "{} has {} steps, expected {}",
            record.chain_id,
            record.steps.len(),
            expected_ids.len()
        )));
    }
    record
        .steps
        .iter()
        .zip(expected_ids)
        .map(|(step, id)| {
            if step.query_id != *id {
                return Err(EvalError::SchemaMismatch(format!(
                    "expected step {id}, found {}",
                    step.query_id
                )));
            }
            step.p.ok_or_else(|| {
                EvalError::MissingProbes(format!("{id} ({})", step.error.as_deref().unwrap_or("no ratio")))
            })
        })
        .collect()
}

fn lookup<'a>(map: &BTreeMap<&str, &'a ProbeRecord>, id: &str, phase: &str) -> Result<&'a ProbeRecord> {
    map.get(id)
        .copied()
        .ok_or_else(|| EvalError::MissingProbes(format!("{id} ({phase})")))
}

/// Pairs pre- and post-edit records with the bundle's chains and contextual facts.
pub fn observations(
    bundle: &DatasetBundle,
    pre: &[ProbeRecord],
    post: &[ProbeRecord],
    templates: &QueryTemplates,
) -> Result<(Vec<ChainObservation>, Vec<ContextObservation>)> {
    let pre = index(pre, Phase::Pre)?;
    let post = index(post, Phase::Post)?;
    let mut expected = BTreeSet::new();

    let mut chains = Vec::with_capacity(bundle.chains.len());
    for chain in &bundle.chains {
        let id = chain.chain_id.as_str();
        expected.insert(id.to_string());
        let step_ids: Vec<&str> = chain.steps.iter().map(|s| s.query_id.as_str()).collect();
        let before = ratios(lookup(&pre, id, "pre")?, &step_ids)?;
        let after = ratios(lookup(&post, id, "post")?, &step_ids)?;
        chains.push(ChainObservation::new(id, before, after)?);
    }

    let mut context = Vec::new();
    for fact in context_facts(bundle, templates)? {
        expected.insert(fact.id.clone());
        let ids = [fact.id.as_str()];
        let before = ratios(lookup(&pre, &fact.id, "pre")?, &ids)?[0];
        let after = ratios(lookup(&post, &fact.id, "post")?, &ids)?[0];
        context.push(ContextObservation::new(fact.id.as_str(), before, after)?);
    }

    if let Some(extra) = pre.keys().chain(post.keys()).find(|id| !expected.contains(**id)) {
        return Err(EvalError::SchemaMismatch(format!("{extra} is not part of the bundle")));
    }
    Ok((chains, context))
}

/// Report from recorded probes plus optional preference cases and generations.
pub fn run_evaluation(
    bundle: &DatasetBundle,
    pre: &[ProbeRecord],
    post: &[ProbeRecord],
    cases: &[PreferenceCase],
    generations: &[GenerationSample],
    fluency_mode: FluencyMode,
) -> Result<MetricsReport> {
    let (chains, context) = observations(bundle, pre, post, &QueryTemplates::default())?;
    Ok(MetricsReport::assemble(
        &chains,
        &context,
        cases,
        generations,
        fluency_mode,
    )?)
}

/// Rewrites the seed fact of every graph to point at `new_object`.
pub fn edit_seeds(graphs: &[KnowledgeGraph], scope: EditScope, new_object: &str) -> Result<Vec<KnowledgeGraph>> {
    graphs
        .iter()
        .map(|graph| {
            let request = EditRequest::new(graph.seed().clone(), new_object, scope)?;
            Ok(graph.apply_delta(&graph.expand_edit_request(&request)?)?)
        })
        .collect()
}

/// Endpoint described by `config`. Mock endpoints know `graphs`, edited first
/// when the mock settings ask for it.
pub fn open_endpoint(config: &EndpointConfig, graphs: &[KnowledgeGraph]) -> Result<Arc<dyn Endpoint>> {
    config.validate()?;
    if !config.is_mock() {
        return Ok(Arc::new(HttpEndpoint::from_config(config)?));
    }
    let settings = config.mock.clone().unwrap_or_default();
    let graphs = match &settings.edit {
        Some(edit) => edit_seeds(graphs, edit.scope, &edit.new_object)?,
        None => graphs.to_vec(),
    };
    Ok(Arc::new(MockResponder::from_graphs(
        &graphs,
        settings.noise,
        settings.seed,
    )?))
}

/// Settings of the offline edit experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MockExperiment {
    pub scope: EditScope,
    pub noise: f64,
    pub seed: u64,
    pub new_object: String,
    pub samples_per_query: usize,
    pub max_parallel: usize,
}

impl Default for MockExperiment {
    fn default() -> Self {
        MockExperiment {
            scope: EditScope::Shallow,
            noise: 0.0,
            seed: 0,
            new_object: DEFAULT_NEW_OBJECT.to_string(),
            samples_per_query: 5,
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockRun {
    pub edited: Vec<KnowledgeGraph>,
    pub pre: Vec<ProbeRecord>,
    pub post: Vec<ProbeRecord>,
    pub cases: Vec<PreferenceCase>,
    pub report: MetricsReport,
}

/// Applies the seed edit of every graph to a graph-backed mock model and
/// evaluates it against the unedited mock.
pub fn run_mock_experiment(bundle: &DatasetBundle, settings: &MockExperiment) -> Result<MockRun> {
    bundle.validate()?;
    let edited = edit_seeds(&bundle.graphs, settings.scope, &settings.new_object)?;
    let options = ProbeOptions {
        samples_per_query: settings.samples_per_query,
        max_parallel: settings.max_parallel,
        ..ProbeOptions::default()
    };
    if options.samples_per_query == 0 || options.max_parallel == 0 {
        return Err(EvalError::Config("samples and parallelism must be positive".into()));
    }
    let before = Prober::new(
        Arc::new(MockResponder::from_graphs(
            &bundle.graphs,
            settings.noise,
            settings.seed,
        )?),
        options.clone(),
    );
    let after = Prober::new(
        Arc::new(MockResponder::from_graphs(&edited, settings.noise, settings.seed)?),
        options,
    );
    let templates = QueryTemplates::default();
    let pre = probe_bundle(&before, bundle, Phase::Pre, &templates)?;
    let post = probe_bundle(&after, bundle, Phase::Post, &templates)?;

    let mut cases = Vec::new();
    for graph in &bundle.graphs {
        let seed = graph.seed();
        let direct = ProbeQuery::for_fact(format!("{}/direct", graph.id()), fact_query(seed, &templates), seed);
        let paraphrase = ProbeQuery::for_fact(
            format!("{}/paraphrase", graph.id()),
            format!("{} {}:", seed.subject(), seed.relation()),
            seed,
        );
        for (query, family) in [(direct, PromptFamily::Direct), (paraphrase, PromptFamily::Paraphrase)] {
            cases.push(after.preference(&query.query_id, family, &query, &settings.new_object, seed.object())?);
        }
    }
    let report = run_evaluation(bundle, &pre, &post, &cases, &[], FluencyMode::default())?;
    Ok(MockRun {
        edited,
        pre,
        post,
        cases,
        report,
    })
}
