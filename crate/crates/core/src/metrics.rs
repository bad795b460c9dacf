//! Metric kernels for edit evaluation.
//!
//! All functions here are pure. Probabilities are plain `f64` values in `[0, 1]`;
//! observation constructors enforce that range so the kernels never see invalid input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::MAX_CHAIN_LEN;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("observation {id}: {reason}")]
    InvalidObservation { id: String, reason: String },
    #[error("no preference cases for family {0:?}")]
    EmptyFamily(PromptFamily),
    #[error("text has {0} tokens, at least 3 are required")]
    TooShort(usize),
    #[error("consistency needs two non-empty texts")]
    EmptyText,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_probability(id: &str, what: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(MetricsError::InvalidObservation {
            id: id.to_string(),
            reason: format!("{what} probability {p} outside [0, 1]"),
        })
    }
}

/// Per-hop retention probabilities of one chain, before and after an edit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainObservation {
    chain_id: String,
    pre: Vec<f64>,
    post: Vec<f64>,
}

impl ChainObservation {
    pub fn new(chain_id: impl Into<String>, pre: Vec<f64>, post: Vec<f64>) -> Result<Self> {
        let chain_id = chain_id.into();
        let invalid = |reason: String| MetricsError::InvalidObservation {
            id: chain_id.clone(),
            reason,
        };
        if pre.is_empty() || pre.len() > MAX_CHAIN_LEN {
            return Err(invalid(format!("length {} outside 1..={MAX_CHAIN_LEN}", pre.len())));
        }
        if pre.len() != post.len() {
            return Err(invalid(format!(
                "{} pre-edit values but {} post-edit values",
                pre.len(),
                post.len()
            )));
        }
        for &p in &pre {
            check_probability(&chain_id, "pre-edit", p)?;
        }
        for &p in &post {
            check_probability(&chain_id, "post-edit", p)?;
        }
        Ok(ChainObservation { chain_id, pre, post })
    }

    pub fn chain_id(&self) -> &str {
        &self.chain_id
    }

    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn pre(&self) -> &[f64] {
        &self.pre
    }

    pub fn post(&self) -> &[f64] {
        &self.post
    }
}

/// Probability of one contextual fact before and after an edit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextObservation {
    triplet_id: String,
    pre: f64,
    post: f64,
}

impl ContextObservation {
    pub fn new(triplet_id: impl Into<String>, pre: f64, post: f64) -> Result<Self> {
        let triplet_id = triplet_id.into();
        check_probability(&triplet_id, "pre-edit", pre)?;
        check_probability(&triplet_id, "post-edit", post)?;
        Ok(ContextObservation { triplet_id, pre, post })
    }

    pub fn triplet_id(&self) -> &str {
        &self.triplet_id
    }

    pub fn pre(&self) -> f64 {
        self.pre
    }

    pub fn post(&self) -> f64 {
        self.post
    }
}

/// Which prompt family a preference case was scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    /// The edit prompt itself (efficacy).
    Direct,
    /// Paraphrases of the edit prompt (generalization).
    Paraphrase,
    /// Prompts about neighbouring subjects (specificity).
    Neighborhood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMode {
    /// Probabilities from continuation log-scores.
    Scored,
    /// Probabilities from sampled hit frequencies.
    Sampled,
}

/// Likelihood of the edited output versus the original output for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceCase {
    pub case_id: String,
    pub family: PromptFamily,
    pub p_new: f64,
    pub p_old: f64,
    #[serde(default = "default_mode")]
    pub mode: PreferenceMode,
}

fn default_mode() -> PreferenceMode {
    PreferenceMode::Scored
}

impl PreferenceCase {
    pub fn new(case_id: impl Into<String>, family: PromptFamily, p_new: f64, p_old: f64) -> Result<Self> {
        let case_id = case_id.into();
        check_probability(&case_id, "edited-output", p_new)?;
        check_probability(&case_id, "original-output", p_old)?;
        Ok(PreferenceCase {
            case_id,
            family,
            p_new,
            p_old,
            mode: PreferenceMode::Scored,
        })
    }

    pub fn sampled(mut self) -> Self {
        self.mode = PreferenceMode::Sampled;
        self
    }

    /// Strict preference for the edited output.
    pub fn prefers_new(&self) -> bool {
        self.p_new > self.p_old
    }
}

/// Product of pre-edit and post-edit hop probabilities.
pub fn chain_retention(obs: &ChainObservation) -> (f64, f64) {
    (obs.pre.iter().product(), obs.post.iter().product())
}

/// Aggregate indirect fact recovery.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IfrSummary {
    pub overall: f64,
    pub by_length: BTreeMap<usize, f64>,
    pub active_counts: BTreeMap<usize, usize>,
}

/// Indirect fact recovery over a set of chains.
///
/// Chains whose pre-edit retention is zero are inactive and ignored. The overall
/// value is the mean of retention ratios `R'/R` weighted by `1/sqrt(n)`; the
/// per-length values restrict the same formula to one chain length. With no
/// active chains the overall value is 0.
pub fn ifr(observations: &[ChainObservation]) -> IfrSummary {
    let mut weighted = 0.0;
    let mut weights = 0.0;
    let mut per_length: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();

    for obs in observations {
        let (pre, post) = chain_retention(obs);
        if pre == 0.0 {
            continue;
        }
        let n = obs.len();
        let ratio = post / pre;
        let weight = 1.0 / (n as f64).sqrt();
        weighted += ratio * weight;
        weights += weight;
        let slot = per_length.entry(n).or_insert((0.0, 0.0, 0));
        slot.0 += ratio * weight;
        slot.1 += weight;
        slot.2 += 1;
    }

    IfrSummary {
        overall: if weights > 0.0 { weighted / weights } else { 0.0 },
        by_length: per_length.iter().map(|(&n, &(num, den, _))| (n, num / den)).collect(),
        active_counts: per_length.iter().map(|(&n, &(_, _, count))| (n, count)).collect(),
    }
}

/// Connected knowledge preservation: mean `p'/p` over contextual facts the
/// model knew before the edit, or 1 when there are none.
pub fn ckp(observations: &[ContextObservation]) -> f64 {
    let (sum, count) = observations
        .iter()
        .filter(|o| o.pre != 0.0)
        .fold((0.0, 0usize), |(sum, count), o| (sum + o.post / o.pre, count + 1));
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Fraction of cases in `family` where the edited output strictly wins.
pub fn paired_preference_rate(cases: &[PreferenceCase], family: PromptFamily) -> Result<f64> {
    let (wins, total) = cases
        .iter()
        .filter(|c| c.family == family)
        .fold((0usize, 0usize), |(wins, total), c| {
            (wins + usize::from(c.prefers_new()), total + 1)
        });
    if total == 0 {
        return Err(MetricsError::EmptyFamily(family));
    }
    Ok(wins as f64 / total as f64)
}

/// Sign convention for the n-gram entropy fluency score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluencyMode {
    /// `(2/3)·H2 + (4/3)·H3`: both entropies reward variety.
    #[default]
    Entropy,
    /// `(2/3)·H2 − (4/3)·H3`, the weighted combination with the trigram sign flipped.
    AsPrinted,
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Shannon entropy in bits of the empirical n-gram distribution.
pub fn ngram_entropy<S: AsRef<str>>(tokens: &[S], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    for window in tokens.windows(n) {
        *counts.entry(window.iter().map(AsRef::as_ref).collect()).or_default() += 1;
    }
    let total = (tokens.len() - n + 1) as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // a single distinct n-gram yields -0.0
    h.max(0.0)
}

/// N-gram entropy fluency of a token sequence with at least three tokens.
pub fn fluency<S: AsRef<str>>(tokens: &[S], mode: FluencyMode) -> Result<f64> {
    if tokens.len() < 3 {
        return Err(MetricsError::TooShort(tokens.len()));
    }
    let h2 = ngram_entropy(tokens, 2);
    let h3 = ngram_entropy(tokens, 3);
    Ok(match mode {
        FluencyMode::Entropy => (2.0 / 3.0) * h2 + (4.0 / 3.0) * h3,
        FluencyMode::AsPrinted => (2.0 / 3.0) * h2 - (4.0 / 3.0) * h3,
    })
}

/// Cosine similarity of smoothed TF-IDF vectors over the two-document corpus
/// `{generated, reference}`.
///
/// `tf` is the raw count and `idf(t) = ln((1 + N) / (1 + df(t))) + 1` with `N = 2`.
pub fn consistency<S: AsRef<str>>(generated: &[S], reference: &[S]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let counts = |tokens: &[S]| {
        let mut map: BTreeMap<String, f64> = BTreeMap::new();
        for token in tokens {
            *map.entry(token.as_ref().to_string()).or_default() += 1.0;
        }
        map
    };
    let a = counts(generated);
    let b = counts(reference);
    let idf = |term: &str| {
        let df = f64::from(u8::from(a.contains_key(term)) + u8::from(b.contains_key(term)));
        (3.0 / (1.0 + df)).ln() + 1.0
    };
    fn weigh<'a>(doc: &'a BTreeMap<String, f64>, idf: &dyn Fn(&str) -> f64) -> BTreeMap<&'a str, f64> {
        let raw: BTreeMap<&str, f64> = doc.iter().map(|(t, &c)| (t.as_str(), c * idf(t))).collect();
        let norm = raw.values().map(|w| w * w).sum::<f64>().sqrt();
        raw.into_iter().map(|(t, w)| (t, w / norm)).collect()
    }
    let va = weigh(&a, &idf);
    let vb = weigh(&b, &idf);
    let dot: f64 = va.iter().filter_map(|(t, w)| vb.get(t).map(|v| w * v)).sum();
    Ok(dot.clamp(0.0, 1.0))
}

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ifr_overall: f64,
    pub ifr_by_length: BTreeMap<usize, f64>,
    pub active_chain_counts: BTreeMap<usize, usize>,
    /// All probed chains per length, active or not.
    pub chain_counts: BTreeMap<usize, usize>,
    pub ckp: f64,
    pub context_facts: usize,
    pub efficacy: Option<f64>,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
    pub fluency: Option<f64>,
    pub consistency: Option<f64>,
}

/// One generated text and its reference for fluency and consistency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub generated: String,
    pub reference: String,
}

impl MetricsReport {
    /// Builds a report. Preference metrics are filled for families that have
    /// cases; fluency and consistency are means over the generation samples.
    pub fn assemble(
        chains: &[ChainObservation],
        context: &[ContextObservation],
        cases: &[PreferenceCase],
        generations: &[GenerationSample],
        fluency_mode: FluencyMode,
    ) -> Result<Self> {
        let summary = ifr(chains);
        let mut chain_counts = BTreeMap::new();
        for obs in chains {
            *chain_counts.entry(obs.len()).or_insert(0) += 1;
        }
        let rate = |family| paired_preference_rate(cases, family).ok();

        let (fluency, consistency) = if generations.is_empty() {
            (None, None)
        } else {
            let mut f_sum = 0.0;
            let mut c_sum = 0.0;
            for sample in generations {
                let generated = tokenize(&sample.generated);
                f_sum += fluency(&generated, fluency_mode)?;
                c_sum += consistency(&generated, &tokenize(&sample.reference))?;
            }
            let n = generations.len() as f64;
            (Some(f_sum / n), Some(c_sum / n))
        };

        Ok(MetricsReport {
            ifr_overall: summary.overall,
            ifr_by_length: summary.by_length,
            active_chain_counts: summary.active_counts,
            chain_counts,
            ckp: ckp(context),
            context_facts: context.len(),
            efficacy: rate(PromptFamily::Direct),
            generalization: rate(PromptFamily::Paraphrase),
            specificity: rate(PromptFamily::Neighborhood),
            fluency,
            consistency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(pre: &[f64], post: &[f64]) -> ChainObservation {
        ChainObservation::new("c", pre.to_vec(), post.to_vec()).unwrap()
    }

    #[test]
    fn retention_products() {
        assert_eq!(chain_retention(&chain(&[1.0, 1.0], &[0.0, 1.0])), (1.0, 0.0));
        let (r, r2) = chain_retention(&chain(&[0.8, 0.5], &[0.4, 0.5]));
        assert!((r - 0.4).abs() < 1e-12 && (r2 - 0.2).abs() < 1e-12);
        let same = chain(&[0.6, 0.3, 0.9], &[0.6, 0.3, 0.9]);
        let (a, b) = chain_retention(&same);
        assert_eq!(a, b);
    }

    #[test]
    fn observation_validation() {
        assert!(ChainObservation::new("c", vec![], vec![]).is_err());
        assert!(ChainObservation::new("c", vec![0.5; 6], vec![0.5; 6]).is_err());
        assert!(ChainObservation::new("c", vec![0.5], vec![0.5, 0.5]).is_err());
        assert!(ChainObservation::new("c", vec![1.5], vec![0.5]).is_err());
        assert!(ContextObservation::new("t", 0.5, -0.1).is_err());
        assert!(PreferenceCase::new("p", PromptFamily::Direct, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn single_one_step_chain() {
        let s = ifr(&[chain(&[1.0], &[0.2])]);
        assert!((s.overall - 0.2).abs() < 1e-12);
        assert_eq!(s.active_counts, BTreeMap::from([(1, 1)]));
    }

    #[test]
    fn sqrt_weighting() {
        let s = ifr(&[chain(&[1.0], &[1.0]), chain(&[1.0; 4], &[0.0, 1.0, 1.0, 1.0])]);
        assert!((s.overall - 2.0 / 3.0).abs() < 1e-12, "{}", s.overall);
        assert_eq!(s.by_length[&1], 1.0);
        assert_eq!(s.by_length[&4], 0.0);
    }

    #[test]
    fn no_active_chains() {
        assert_eq!(ifr(&[]).overall, 0.0);
        let s = ifr(&[chain(&[0.0, 1.0], &[1.0, 1.0])]);
        assert_eq!(s.overall, 0.0);
        assert!(s.by_length.is_empty());
    }

    #[test]
    fn per_length_is_plain_mean() {
        let s = ifr(&[
            chain(&[1.0, 1.0], &[0.5, 1.0]),
            chain(&[0.5, 1.0], &[0.5, 0.5]),
            chain(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]),
        ]);
        assert!((s.by_length[&2] - 0.5).abs() < 1e-12);
        assert_eq!(s.active_counts[&2], 2);
        assert_eq!(s.by_length[&3], 1.0);
    }

    #[test]
    fn ckp_cases() {
        assert_eq!(ckp(&[]), 1.0);
        let obs = [
            ContextObservation::new("a", 0.5, 0.25).unwrap(),
            ContextObservation::new("b", 1.0, 1.0).unwrap(),
        ];
        assert!((ckp(&obs) - 0.75).abs() < 1e-12);
        let unknown = ContextObservation::new("z", 0.0, 1.0).unwrap();
        assert_eq!(ckp(std::slice::from_ref(&unknown)), 1.0);
        assert!((ckp(&[obs[0].clone(), obs[1].clone(), unknown]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn preference_rates() {
        let cases: Vec<_> = [(0.9, 0.1), (0.3, 0.4), (0.7, 0.2)]
            .iter()
            .enumerate()
            .map(|(i, &(n, o))| PreferenceCase::new(format!("c{i}"), PromptFamily::Direct, n, o).unwrap())
            .collect();
        let rate = paired_preference_rate(&cases, PromptFamily::Direct).unwrap();
        assert!((rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            paired_preference_rate(&cases, PromptFamily::Paraphrase),
            Err(MetricsError::EmptyFamily(PromptFamily::Paraphrase))
        );
        let ties = [PreferenceCase::new("t", PromptFamily::Neighborhood, 0.4, 0.4).unwrap()];
        assert_eq!(paired_preference_rate(&ties, PromptFamily::Neighborhood).unwrap(), 0.0);
    }

    #[test]
    fn fluency_fixtures() {
        assert_eq!(fluency(&tokenize("a a a a"), FluencyMode::Entropy).unwrap(), 0.0);
        let f = fluency(&tokenize("a b a b a"), FluencyMode::Entropy).unwrap();
        assert!((f - 1.891061).abs() < 1e-6, "{f}");
        assert!((ngram_entropy(&tokenize("a b a b a"), 2) - 1.0).abs() < 1e-12);
        let printed = fluency(&tokenize("a b a b a"), FluencyMode::AsPrinted).unwrap();
        assert!((printed - (2.0 / 3.0 - 4.0 / 3.0 * 0.918296)).abs() < 1e-6);
        assert_eq!(
            fluency(&tokenize("a b"), FluencyMode::Entropy),
            Err(MetricsError::TooShort(2))
        );
    }

    #[test]
    fn consistency_fixtures() {
        let a = tokenize("hogwarts school of magic");
        assert!((consistency(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(consistency(&a, &tokenize("ilvermorny academy")).unwrap(), 0.0);
        assert_eq!(consistency(&a, &Vec::<String>::new()), Err(MetricsError::EmptyText));
    }

    #[test]
    fn report_assembly() {
        let chains = [chain(&[1.0], &[0.0]), chain(&[1.0, 1.0], &[1.0, 1.0])];
        let context = [ContextObservation::new("x", 1.0, 1.0).unwrap()];
        let cases = [PreferenceCase::new("d", PromptFamily::Direct, 0.9, 0.1).unwrap()];
        let gens = [GenerationSample {
            generated: "a b a b a".into(),
            reference: "a b c".into(),
        }];
        let report = MetricsReport::assemble(&chains, &context, &cases, &gens, FluencyMode::Entropy).unwrap();
        assert_eq!(report.efficacy, Some(1.0));
        assert_eq!(report.generalization, None);
        assert_eq!(report.chain_counts, BTreeMap::from([(1, 1), (2, 1)]));
        assert_eq!(report.ckp, 1.0);
        assert!(report.fluency.unwrap() > 1.89);
    }
}
