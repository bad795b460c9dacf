//! Question templates and the prompts sent to the model while building graphs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::kg::{check_chain_shape, Triplet, MAX_CHAIN_LEN};
use crate::probe::normalize_tokens;

const DEFAULT_TRIPLET_FALLBACK: &str = "What is the {relation} of {subject}?";
const DEFAULT_CHAIN_FALLBACK: &str = "Starting from {origin} and following {chain}, which entity do you reach?";

const DEFAULT_COT: &str = "Answer the question below. Reason step by step and write every intermediate \
fact as its own complete sentence before giving the final answer.\n\nQuestion: {query}";

const DEFAULT_FACT_EXTRACTION: &str = "Extract every fact stated in the sentence below as a knowledge \
triplet. Write one triplet per line in the form (subject, relation, object) and nothing else.\n\nSentence: {fact}";

const DEFAULT_TRIPLET_RULES: &[(&str, &str)] = &[
    ("belongs to", "What does {subject} belong to?"),
    ("child", "Who is {subject}'s child?"),
    ("classmate", "Who was a classmate of {subject}?"),
    (
        "country of citizenship",
        "What is the country of citizenship of {subject}?",
    ),
    ("country of origin", "Which country was {subject} created in?"),
    ("created by", "Who was {subject} created by?"),
    ("developer", "Who is the developer of {subject}?"),
    ("employer", "Who is the employer of {subject}?"),
    ("house", "Which house is {subject} in?"),
    ("produced by", "Which company is {subject} produced by?"),
    ("school", "Where did {subject} study?"),
    ("spouse", "Who is {subject} married to?"),
    ("sport", "Which sport is {subject} associated with?"),
    ("student", "Where did {subject} study?"),
    ("studied at", "Where did {subject} study?"),
    ("subject", "Which subject does {subject} study?"),
    ("taught by", "Who teaches {subject}?"),
    ("work location", "Which city did {subject} work in?"),
];

const DEFAULT_CHAIN_RULES: &[(&str, &str)] = &[
    ("taught by", "Who teaches {subject} to {origin}?"),
    ("school", "Where did {subject}, linked to {origin}, study?"),
];

/// Prompt texts used to query the model.
///
/// Question templates are keyed by relation. Placeholders: `{subject}` is the
/// subject of the (last) hop, `{relation}` its relation, `{origin}` the first
/// subject of a chain and `{chain}` the chain rendered up to the last relation.
/// The chain-of-thought prompt takes `{query}` and the extraction prompt `{fact}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplates {
    pub triplet: BTreeMap<String, String>,
    pub triplet_fallback: String,
    pub chain: BTreeMap<String, String>,
    pub chain_fallback: String,
    pub cot: String,
    pub fact_extraction: String,
}

impl Default for QueryTemplates {
    fn default() -> Self {
        let table = |rules: &[(&str, &str)]| rules.iter().map(|(r, t)| (r.to_string(), t.to_string())).collect();
        QueryTemplates {
            triplet: table(DEFAULT_TRIPLET_RULES),
            triplet_fallback: DEFAULT_TRIPLET_FALLBACK.into(),
            chain: table(DEFAULT_CHAIN_RULES),
            chain_fallback: DEFAULT_CHAIN_FALLBACK.into(),
            cot: DEFAULT_COT.into(),
            fact_extraction: DEFAULT_FACT_EXTRACTION.into(),
        }
    }
}

/// Parses `relation => template` lines. `*` names the fallback; `#` starts a comment.
fn parse_rules(text: &str) -> Result<(BTreeMap<String, String>, Option<String>), PipelineError> {
    let mut rules = BTreeMap::new();
    let mut fallback = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (relation, template) = line
            .split_once("=>")
            .ok_or_else(|| PipelineError::MalformedInput(format!("template line {} lacks `=>`: {line:?}", i + 1)))?;
        let (relation, template) = (relation.trim(), template.trim());
        if !template.contains("{subject}") && !template.contains("{origin}") {
            return Err(PipelineError::MalformedInput(format!(
                "template line {} never names the subject",
                i + 1
            )));
        }
        if relation == "*" {
            fallback = Some(template.to_string());
        } else {
            rules.insert(relation.to_string(), template.to_string());
        }
    }
    Ok((rules, fallback))
}

impl QueryTemplates {
    /// Defaults overridden by whichever of `triplet_query.txt`, `chain_query.txt`,
    /// `cot.txt` and `fact_extraction.txt` exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let mut templates = QueryTemplates::default();
        let read = |name: &str| -> Result<Option<String>, PipelineError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| PipelineError::MalformedInput(format!("{}: {e}", path.display())))
        };
        if let Some(text) = read("triplet_query.txt")? {
            let (rules, fallback) = parse_rules(&text)?;
            templates.triplet.extend(rules);
            if let Some(f) = fallback {
                templates.triplet_fallback = f;
            }
        }
        if let Some(text) = read("chain_query.txt")? {
            let (rules, fallback) = parse_rules(&text)?;
            templates.chain.extend(rules);
            if let Some(f) = fallback {
                templates.chain_fallback = f;
            }
        }
        if let Some(text) = read("cot.txt")? {
            templates.cot = text.trim_end().to_string();
        }
        if let Some(text) = read("fact_extraction.txt")? {
            templates.fact_extraction = text.trim_end().to_string();
        }
        Ok(templates)
    }

    /// Registers a blank-style question (`Where did ____ study?`) for a relation.
    pub fn register_blank_template(&mut self, relation: &str, template: &str) {
        let re = regex::Regex::new("_{2,}").expect("static regex");
        self.triplet
            .insert(relation.to_string(), re.replace(template, "{subject}").into_owned());
    }

    pub fn cot_prompt(&self, query: &str) -> String {
        self.cot.replace("{query}", query)
    }

    pub fn extraction_prompt(&self, fact: &str) -> String {
        self.fact_extraction.replace("{fact}", fact)
    }
}

/// What a question is generated from.
#[derive(Debug, Clone, Copy)]
pub enum QueryInput<'a> {
    Triplet(&'a Triplet),
    Chain(&'a [Triplet]),
}

impl<'a> QueryInput<'a> {
    pub fn hops(&self) -> &'a [Triplet] {
        match *self {
            QueryInput::Triplet(t) => std::slice::from_ref(t),
            QueryInput::Chain(hops) => hops,
        }
    }
}

fn render(template: &str, hop: &Triplet, origin: &str, chain: &str) -> String {
    template
        .replace("{subject}", hop.subject())
        .replace("{relation}", hop.relation())
        .replace("{origin}", origin)
        .replace("{chain}", chain)
}

/// Whether `question` names `answer` outside the entities it legitimately mentions.
fn reveals(question: &str, answer: &str, mentioned: &[&str]) -> bool {
    let mut tokens = normalize_tokens(question);
    for name in mentioned {
        let name = normalize_tokens(name);
        if name.is_empty() {
            continue;
        }
        let mut i = 0;
        while i + name.len() <= tokens.len() {
            if tokens[i..i + name.len()] == name[..] {
                tokens.drain(i..i + name.len());
            } else {
                i += 1;
            }
        }
    }
    let answer = normalize_tokens(answer);
    !answer.is_empty() && tokens.windows(answer.len()).any(|w| w == answer.as_slice())
}

/// Builds the natural-language question for a fact or a chain.
///
/// A triplet yields a question about its subject and relation. A chain names its
/// origin and intermediate context and asks for the terminal object. The answer
/// never appears in the question outside the names of mentioned entities.
pub fn generate_query(input: QueryInput<'_>, templates: &QueryTemplates) -> Result<String, PipelineError> {
    let hops = input.hops();
    let (Some(first), Some(last)) = (hops.first(), hops.last()) else {
        return Err(PipelineError::MalformedInput("no hops to ask about".into()));
    };
    if hops.len() > MAX_CHAIN_LEN {
        return Err(PipelineError::MalformedInput(format!(
            "chain of {} hops exceeds the cap of {MAX_CHAIN_LEN}",
            hops.len()
        )));
    }
    check_chain_shape(hops, first.subject(), last.object()).map_err(PipelineError::MalformedInput)?;

    let origin = first.subject();
    let question = if hops.len() == 1 {
        let template = templates
            .triplet
            .get(last.relation())
            .unwrap_or(&templates.triplet_fallback);
        render(template, last, origin, last.relation())
    } else {
        let mut chain = Vec::new();
        for hop in &hops[..hops.len() - 1] {
            chain.push(hop.relation().to_string());
            chain.push(hop.object().to_string());
        }
        chain.push(last.relation().to_string());
        let chain = chain.join(" → ");
        let template = templates
            .chain
            .get(last.relation())
            .unwrap_or(&templates.chain_fallback);
        render(template, last, origin, &chain)
    };

    let mentioned: Vec<&str> = hops.iter().map(Triplet::subject).collect();
    if reveals(&question, last.object(), &mentioned) {
        return Err(PipelineError::MalformedInput(format!(
            "question {question:?} reveals the answer {:?}",
            last.object()
        )));
    }
    Ok(question)
}
