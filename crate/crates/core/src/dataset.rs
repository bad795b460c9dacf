//! On-disk formats: graphs, chains, probe records, reports and seed templates.
//!
//! JSON files are canonical (sorted keys, two-space indent, LF, trailing
//! newline) so that saving a loaded file reproduces it byte for byte. Every
//! write goes through a temporary file in the target directory and a rename.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{check_chain_shape, KnowledgeGraph, Triplet, MAX_CHAIN_LEN};
use crate::metrics::MetricsReport;
use crate::pipeline::{generate_query, PipelineError, QueryInput, QueryTemplates};
use crate::probe::{ProbeRecord, TranscriptLine};

pub const FORMAT_VERSION: &str = "knowgic/1";

pub const GRAPH_SUFFIX: &str = ".graph.json";
pub const CHAINS_SUFFIX: &str = ".chains.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("chain {chain_id}: {reason}")]
    InvariantViolation { chain_id: String, reason: String },
    #[error("row {row}: template {template:?} needs exactly one blank placeholder")]
    MissingPlaceholder { row: usize, template: String },
    #[error("unsupported format version {0:?}")]
    VersionMismatch(String),
    #[error("checksum mismatch: expected {expected}, found {actual}")]
    ChecksumMismatch { expected: String, actual: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(e: serde_json::Error) -> DatasetError {
    DatasetError::ParseError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn violation(chain_id: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::InvariantViolation {
        chain_id: chain_id.to_string(),
        reason: reason.into(),
    }
}

/// One question of a chain, probing one hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStep {
    pub query_id: String,
    pub query: String,
    pub expected_object: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub hop: Triplet,
}

/// A path from the seed subject to the seed object, with one question per hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicationChain {
    pub chain_id: String,
    pub graph_id: String,
    pub target: Triplet,
    pub steps: Vec<QueryStep>,
}

/// `<graph>/<length>-<first 8 hex digits of the hop digest>`.
pub fn chain_id(graph_id: &str, hops: &[Triplet]) -> String {
    let mut hasher = Sha256::new();
    for hop in hops {
        hasher.update(hop.to_string().as_bytes());
        hasher.update(b"\n");
    }
    let digest = hex::encode(hasher.finalize());
    format!("{graph_id}/{}-{}", hops.len(), &digest[..8])
}

impl ImplicationChain {
    pub fn from_hops(
        graph_id: &str,
        target: &Triplet,
        hops: Vec<Triplet>,
        templates: &QueryTemplates,
    ) -> std::result::Result<Self, PipelineError> {
        let chain_id = chain_id(graph_id, &hops);
        let steps = hops
            .into_iter()
            .enumerate()
            .map(|(j, hop)| {
                Ok(QueryStep {
                    query_id: format!("{chain_id}#{}", j + 1),
                    query: generate_query(QueryInput::Triplet(&hop), templates)?,
                    expected_object: hop.object().to_string(),
                    aliases: hop.object_aliases().to_vec(),
                    hop,
                })
            })
            .collect::<std::result::Result<Vec<_>, PipelineError>>()?;
        Ok(ImplicationChain {
            chain_id,
            graph_id: graph_id.to_string(),
            target: target.clone(),
            steps,
        })
    }

    pub fn hops(&self) -> impl Iterator<Item = &Triplet> {
        self.steps.iter().map(|s| &s.hop)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Graphs plus the chains built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub version: String,
    pub graphs: Vec<KnowledgeGraph>,
    pub chains: Vec<ImplicationChain>,
}

impl Default for DatasetBundle {
    fn default() -> Self {
        DatasetBundle {
            version: FORMAT_VERSION.to_string(),
            graphs: Vec::new(),
            chains: Vec::new(),
        }
    }
}

impl DatasetBundle {
    pub fn graph(&self, graph_id: &str) -> Option<&KnowledgeGraph> {
        self.graphs.iter().find(|g| g.id() == graph_id)
    }

    /// Checks every chain against its graph. Reports the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch(self.version.clone()));
        }
        let mut graph_ids = BTreeSet::new();
        for g in &self.graphs {
            if !graph_ids.insert(g.id()) {
                return Err(violation("", format!("duplicate graph id {:?}", g.id())));
            }
        }
        let mut chain_ids = BTreeSet::new();
        for chain in &self.chains {
            let id = chain.chain_id.as_str();
            if !chain_ids.insert(id) {
                return Err(violation(id, "duplicate chain id"));
            }
            if !(1..=MAX_CHAIN_LEN).contains(&chain.len()) {
                return Err(violation(
                    id,
                    format!("length {} outside 1..={MAX_CHAIN_LEN}", chain.len()),
                ));
            }
            let hops: Vec<Triplet> = chain.hops().cloned().collect();
            check_chain_shape(&hops, chain.target.subject(), chain.target.object()).map_err(|r| violation(id, r))?;
            for step in &chain.steps {
                if step.expected_object != step.hop.object() {
                    return Err(violation(
                        id,
                        format!(
                            "step {} expects {:?}, hop ends at {:?}",
                            step.query_id,
                            step.expected_object,
                            step.hop.object()
                        ),
                    ));
                }
            }
            let graph = self
                .graph(&chain.graph_id)
                .ok_or_else(|| violation(id, format!("unknown graph {:?}", chain.graph_id)))?;
            if !graph.is_path(&hops) {
                return Err(violation(id, "hops are not a simple path of the graph"));
            }
        }
        Ok(())
    }
}

/// Chain counts per length (1 to 5) and overall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub by_length: BTreeMap<usize, usize>,
    pub total: usize,
}

pub fn stats(bundle: &DatasetBundle) -> ChainStats {
    let mut by_length: BTreeMap<usize, usize> = (1..=MAX_CHAIN_LEN).map(|n| (n, 0)).collect();
    for chain in &bundle.chains {
        *by_length.entry(chain.len()).or_insert(0) += 1;
    }
    ChainStats {
        by_length,
        total: bundle.chains.len(),
    }
}

fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let entries: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(entries.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Sorted keys, two-space indent, trailing newline.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let value = sorted(serde_json::to_value(value)?);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

/// Replaces `path` with `bytes` in one rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = to_canonical_json(value).map_err(parse_err)?;
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: String,
    graphs: Vec<KnowledgeGraph>,
}

#[derive(Serialize, Deserialize)]
struct ChainsFile {
    version: String,
    chains: Vec<ImplicationChain>,
}

/// The graph and chain files of a bundle. `path` may be the stem or either file.
pub fn bundle_paths(path: &Path) -> (PathBuf, PathBuf) {
    let text = path.to_string_lossy();
    let stem = text
        .strip_suffix(GRAPH_SUFFIX)
        .or_else(|| text.strip_suffix(CHAINS_SUFFIX))
        .unwrap_or(&text);
    (
        PathBuf::from(format!("{stem}{GRAPH_SUFFIX}")),
        PathBuf::from(format!("{stem}{CHAINS_SUFFIX}")),
    )
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let (graph_path, chains_path) = bundle_paths(path);
    write_json(
        &graph_path,
        &GraphFile {
            version: bundle.version.clone(),
            graphs: bundle.graphs.clone(),
        },
    )?;
    write_json(
        &chains_path,
        &ChainsFile {
            version: bundle.version.clone(),
            chains: bundle.chains.clone(),
        },
    )
}

/// Loads and validates a bundle.
pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let (graph_path, chains_path) = bundle_paths(path);
    let graphs: GraphFile = serde_json::from_str(&read(&graph_path)?).map_err(parse_err)?;
    let chains: ChainsFile = serde_json::from_str(&read(&chains_path)?).map_err(parse_err)?;
    if graphs.version != chains.version {
        return Err(DatasetError::VersionMismatch(format!(
            "{} vs {}",
            graphs.version, chains.version
        )));
    }
    let bundle = DatasetBundle {
        version: graphs.version,
        graphs: graphs.graphs,
        chains: chains.chains,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// A base query template with its seed fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTemplate {
    pub category: String,
    pub template: String,
    pub triplet: Triplet,
}

#[derive(Deserialize)]
struct SeedRow {
    category: String,
    template: String,
    subject: String,
    relation: String,
    object: String,
}

/// Reads seed templates from CSV (with a header row) or, for `.json` files,
/// an array of objects with the same fields.
pub fn import_seed_templates(path: &Path) -> Result<Vec<SeedTemplate>> {
    let rows: Vec<SeedRow> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&read(path)?).map_err(parse_err)?
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?
    };
    let blank = Regex::new(r"_{2,}").expect("static regex");
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            if blank.find_iter(&row.template).count() != 1 {
                return Err(DatasetError::MissingPlaceholder {
                    row: i + 1,
                    template: row.template,
                });
            }
            let triplet =
                Triplet::new(&row.subject, &row.relation, &row.object).map_err(|e| DatasetError::ParseError {
                    line: i + 2,
                    column: 0,
                    message: e.to_string(),
                })?;
            Ok(SeedTemplate {
                category: row.category.trim().to_string(),
                template: row.template.trim().to_string(),
                triplet,
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> DatasetError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else {
            unreachable!()
        };
        return DatasetError::Io {
            path: path.to_path_buf(),
            source: io,
        };
    }
    let line = e.position().map_or(0, |p| p.line() as usize);
    DatasetError::ParseError {
        line,
        column: 0,
        message: e.to_string(),
    }
}

const RATIO_TOLERANCE: f64 = 1e-12;

fn check_record(record: &ProbeRecord) -> std::result::Result<(), String> {
    for step in &record.steps {
        if step.hits > step.samples {
            return Err(format!(
                "{}: {} hits out of {} samples",
                step.query_id, step.hits, step.samples
            ));
        }
        if let Some(p) = step.p {
            if step.samples == 0 || (p - step.hits as f64 / step.samples as f64).abs() > RATIO_TOLERANCE {
                return Err(format!(
                    "{}: p = {p} is not {}/{}",
                    step.query_id, step.hits, step.samples
                ));
            }
        }
    }
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        let line = serde_json::to_string(&sorted(serde_json::to_value(item).map_err(parse_err)?)).map_err(parse_err)?;
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// One probe record per line.
pub fn write_probes(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    write_lines(path, records)
}

/// Reads probe records, checking that every ratio is hits over samples.
pub fn read_probes(path: &Path) -> Result<Vec<ProbeRecord>> {
    let text = read(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ProbeRecord = serde_json::from_str(line).map_err(|e| DatasetError::ParseError {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        check_record(&record).map_err(|reason| violation(&record.chain_id, reason))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_transcript(path: &Path, lines: &[TranscriptLine]) -> Result<()> {
    write_lines(path, lines)
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    serde_json::from_str(&read(path)?).map_err(parse_err)
}

/// Checks a downloaded archive against its published SHA-256 digest.
pub fn verify_sha256(path: &Path, expected_hex: &str) -> Result<()> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let actual = hex::encode(hasher.finalize());
    if actual.eq_ignore_ascii_case(expected_hex.trim()) {
        Ok(())
    } else {
        Err(DatasetError::ChecksumMismatch {
            expected: expected_hex.trim().to_lowercase(),
            actual,
        })
    }
}

/// The hp-mini graph and its three chains.
pub fn hp_mini_bundle() -> DatasetBundle {
    let graph = crate::fixtures::hp_mini();
    let config = crate::pipeline::PipelineConfig::default();
    let chains = crate::pipeline::sequence_chains(&graph, &config).expect("hp-mini chains");
    DatasetBundle {
        version: FORMAT_VERSION.to_string(),
        graphs: vec![graph],
        chains,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::t;
    use crate::probe::{Phase, QueryOutcome};

    #[test]
    fn hp_mini_stats() {
        let bundle = hp_mini_bundle();
        bundle.validate().unwrap();
        let s = stats(&bundle);
        assert_eq!(s.total, 3);
        assert_eq!(s.by_length[&1], 1);
        assert_eq!(s.by_length[&2], 2);
        assert_eq!(s.by_length[&5], 0);
        assert_eq!(bundle.chains[0].steps[0].query, "Where did Harry Potter study?");
        assert!(bundle.chains[0].chain_id.starts_with("hp-mini/1-"));
        assert_eq!(
            bundle.chains[1].steps[1].query_id,
            format!("{}#2", bundle.chains[1].chain_id)
        );
    }

    #[test]
    fn empty_stats() {
        let s = stats(&DatasetBundle::default());
        assert_eq!(s.total, 0);
        assert!(s.by_length.values().all(|&c| c == 0));
        assert_eq!(s.by_length.len(), 5);
    }

    #[test]
    fn broken_link_is_reported() {
        let mut bundle = hp_mini_bundle();
        let id = bundle.chains[1].chain_id.clone();
        bundle.chains[1].steps[1].hop = t("Hermione Granger", "school", "Hogwarts");
        bundle.chains[1].steps[1].expected_object = "Hogwarts".into();
        match bundle.validate() {
            Err(DatasetError::InvariantViolation { chain_id, .. }) => assert_eq!(chain_id, id),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v: Value = serde_json::from_str(r#"{"b":{"z":1,"a":[{"y":2,"x":3}]},"a":0}"#).unwrap();
        assert_eq!(
            to_canonical_json(&v).unwrap(),
            "{\n  \"a\": 0,\n  \"b\": {\n    \"a\": [\n      {\n        \"x\": 3,\n        \"y\": 2\n      }\n    ],\n    \"z\": 1\n  }\n}\n"
        );
    }

    #[test]
    fn probe_ratio_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut record = ProbeRecord {
            chain_id: "c".into(),
            phase: Phase::Pre,
            steps: vec![QueryOutcome {
                query_id: "c#1".into(),
                samples: 5,
                hits: 2,
                p: Some(0.4),
                raw_responses: None,
                error: None,
            }],
        };
        write_probes(&path, std::slice::from_ref(&record)).unwrap();
        assert_eq!(read_probes(&path).unwrap(), vec![record.clone()]);
        record.steps[0].p = Some(0.5);
        write_probes(&path, &[record]).unwrap();
        assert!(matches!(
            read_probes(&path),
            Err(DatasetError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn parse_error_position() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(
            dir.path().join("bad.graph.json"),
            "{\n  \"version\": \"knowgic/1\",\n  \"graphs\": [,]\n}\n",
        )
        .unwrap();
        fs::write(dir.path().join("bad.chains.json"), "{}").unwrap();
        match load_bundle(&stem) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn placeholder_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeds.csv");
        fs::write(
            &path,
            "category,template,subject,relation,object\nStudy Location,Where did ____ study?,Harry Potter,school,Hogwarts\n",
        )
        .unwrap();
        let seeds = import_seed_templates(&path).unwrap();
        assert_eq!(seeds[0].triplet, t("Harry Potter", "school", "Hogwarts"));
        fs::write(
            &path,
            "category,template,subject,relation,object\nX,Where did he study?,a,b,c\n",
        )
        .unwrap();
        assert!(matches!(
            import_seed_templates(&path),
            Err(DatasetError::MissingPlaceholder { row: 1, .. })
        ));
        fs::write(&path, "category,template,subject,relation,object\nX,__ and __,a,b,c\n").unwrap();
        assert!(matches!(
            import_seed_templates(&path),
            Err(DatasetError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        fs::write(&path, b"abc").unwrap();
        verify_sha256(
            &path,
            "BA7816BF8F01CFEA414140DE5DAE2223B00361A396177A9CB410FF61F20015AD",
        )
        .unwrap();
        assert!(matches!(
            verify_sha256(&path, "00"),
            Err(DatasetError::ChecksumMismatch { .. })
        ));
    }
}
