//! Backend-agnostic classification contract: candidate presentation, prompt
//! construction, output normalization, and a deterministic mock backend for
//! hermetic tests.
//!
//! A backend is anything that can pick one candidate name for a piece of
//! text. The contract is deliberately narrow: the pipeline builds the
//! candidate set, the backend returns raw text, and [`normalize_label`]
//! resolves that text against the candidates or fails loudly. Off-menu
//! output is an error, never a silent default, so every recorded decision
//! is auditable.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blueprint::CategoryPath;

/// A labeled example shown to a few-shot classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub text: String,
    pub label: String,
}

impl Exemplar {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self { text: text.into(), label: label.into() }
    }
}

/// One category offered to the backend for a single decision: its name,
/// an optional descriptive definition, and any exemplars attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLabel {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplars: Vec<Exemplar>,
}

impl CandidateLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), definition: None, exemplars: Vec::new() }
    }

    pub fn with_definition(mut self, definition: impl Into<String>) -> Self {
        self.definition = Some(definition.into());
        self
    }
}

/// Classification strategy for one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    FewShot,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::ZeroShot => f.write_str("zero_shot"),
            Mode::FewShot => f.write_str("few_shot"),
        }
    }
}

/// The outcome of a single-label decision. `chosen` is always one of
/// `candidates_offered`, in the candidate's canonical casing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub chosen: String,
    /// The backend's verbatim reply (for the mock, which branch fired).
    pub raw_output: String,
    pub candidates_offered: Vec<String>,
    pub mode: Mode,
}

/// The outcome of a multi-label decision: up to `max_labels` distinct
/// candidate names, possibly none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelDecision {
    pub chosen: Vec<String>,
    pub max_labels: usize,
    pub raw_output: String,
    /// Reply lines that did not resolve to any candidate. Non-empty means
    /// the backend strayed off-menu and part of the reply was discarded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("no candidates offered")]
    NoCandidates,
    #[error("unresolvable output {raw:?} (candidates: {candidates:?})")]
    Unresolvable { raw: String, candidates: Vec<String> },
    #[error("oracle has no usable answer for {text:?} (candidates: {candidates:?})")]
    OracleMiss { text: String, candidates: Vec<String> },
    #[error("max labels {max} out of range for {candidates} candidates")]
    InvalidMaxLabels { max: usize, candidates: usize },
    #[error("backend failure: {0}")]
    Backend(String),
}

/// One classification request as issued by the pipeline.
///
/// `item_index` and `level` identify the call within a batch run;
/// deterministic backends use them to derive a per-call RNG stream, so
/// results do not depend on call order or thread interleaving.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyRequest<'a> {
    pub text: &'a str,
    pub candidates: &'a [CandidateLabel],
    pub mode: Mode,
    pub item_index: u64,
    /// 1-based level in the hierarchy this decision belongs to.
    pub level: u64,
}

/// A pluggable single-label classifier.
pub trait ClassifierBackend: Send + Sync {
    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError>;
}

impl<T: ClassifierBackend> ClassifierBackend for Arc<T> {
    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
        (**self).classify(request)
    }
}

/// A pluggable multi-label classifier with an upper bound on the number of
/// labels per item.
pub trait MultiLabelBackend: Send + Sync {
    fn classify_multi(
        &self,
        text: &str,
        candidates: &[CandidateLabel],
        max_labels: usize,
    ) -> Result<MultiLabelDecision, ClassifyError>;
}

/// Builds the prompt for one single-label decision.
///
/// The prompt is a pure function of its inputs: it lists every candidate as
/// `"name"` plus `, Definition: <definition>` when a definition is present,
/// renders each candidate's exemplars as labeled example blocks in few-shot
/// mode, and instructs the backend to reply with exactly one candidate name
/// and nothing else.
pub fn build_prompt(
    text: &str,
    candidates: &[CandidateLabel],
    mode: Mode,
) -> Result<String, ClassifyError> {
    if candidates.is_empty() {
        return Err(ClassifyError::NoCandidates);
    }
    let mut prompt = String::new();
    prompt.push_str("Classify the text into exactly one of the candidate categories.\n");
    prompt.push_str("\nCandidates:\n");
    for candidate in candidates {
        prompt.push_str("- \"");
        prompt.push_str(&candidate.name);
        prompt.push('"');
        if let Some(definition) = &candidate.definition {
            prompt.push_str(", Definition: ");
            prompt.push_str(definition);
        }
        prompt.push('\n');
    }
    if mode == Mode::FewShot {
        prompt.push_str("\nExamples:\n");
        for candidate in candidates {
            for exemplar in &candidate.exemplars {
                prompt.push_str("\nText: ");
                prompt.push_str(&exemplar.text);
                prompt.push_str("\nCategory: ");
                prompt.push_str(&exemplar.label);
                prompt.push('\n');
            }
        }
    }
    prompt.push_str("\nText: ");
    prompt.push_str(text);
    prompt.push_str("\n\nReply with exactly one candidate name as the entire reply.\n");
    Ok(prompt)
}

/// Definition markers stripped from backend replies. Some category tables
/// embed definitions in the label string after one of these markers (the
/// misspelled variant is seen in the wild), so both are recognized.
const DEFINITION_MARKERS: [&str; 2] = ["Defination:", "Definition:"];

/// Resolves a backend's raw reply to a candidate name in canonical casing.
///
/// The reply is cleaned first — everything from the first definition marker
/// is stripped, whitespace trimmed, and one trailing period removed — then
/// resolved: exact match, else case-insensitive match, else a containment
/// match that is accepted only when exactly one candidate name occurs in
/// the cleaned reply. Anything else is an error; a reply that names zero or
/// several candidates never resolves silently.
pub fn normalize_label(
    raw: &str,
    candidates: &[CandidateLabel],
) -> Result<String, ClassifyError> {
    if candidates.is_empty() {
        return Err(ClassifyError::NoCandidates);
    }
    let cut = DEFINITION_MARKERS.iter().filter_map(|m| raw.find(m)).min();
    let cleaned = match cut {
        Some(index) => &raw[..index],
        None => raw,
    };
    let cleaned = cleaned.trim();
    let cleaned = cleaned.strip_suffix('.').unwrap_or(cleaned).trim_end();

    if let Some(hit) = candidates.iter().find(|c| c.name == cleaned) {
        return Ok(hit.name.clone());
    }
    let lowered = cleaned.to_lowercase();
    if let Some(hit) = candidates.iter().find(|c| c.name.to_lowercase() == lowered) {
        return Ok(hit.name.clone());
    }
    let contained: Vec<&CandidateLabel> = candidates
        .iter()
        .filter(|c| lowered.contains(&c.name.to_lowercase()))
        .collect();
    if contained.len() == 1 {
        return Ok(contained[0].name.clone());
    }
    Err(ClassifyError::Unresolvable {
        raw: raw.to_string(),
        candidates: candidate_names(candidates),
    })
}

fn candidate_names(candidates: &[CandidateLabel]) -> Vec<String> {
    candidates.iter().map(|c| c.name.clone()).collect()
}

/// Answers one decision from a truth table, optionally flipping the answer
/// to a random other candidate.
///
/// With noise `(rate, rng)` the oracle's candidate is kept with probability
/// `1 - rate` and replaced by a uniformly chosen *other* candidate with
/// probability `rate`; with a single candidate there is no other choice and
/// the oracle's answer stands. The decision's `raw_output` records which
/// branch fired.
pub fn mock_classify<R: Rng>(
    text: &str,
    candidates: &[CandidateLabel],
    mode: Mode,
    oracle: &HashMap<String, String>,
    noise: Option<(f64, &mut R)>,
) -> Result<Decision, ClassifyError> {
    if candidates.is_empty() {
        return Err(ClassifyError::NoCandidates);
    }
    let miss = || ClassifyError::OracleMiss {
        text: text.to_string(),
        candidates: candidate_names(candidates),
    };
    let answer = oracle.get(text).ok_or_else(miss)?;
    let truth = normalize_label(answer, candidates).map_err(|_| miss())?;

    let mut flipped = None;
    if let Some((rate, rng)) = noise {
        if candidates.len() > 1 && rng.random_bool(rate.clamp(0.0, 1.0)) {
            let others: Vec<&str> = candidates
                .iter()
                .map(|c| c.name.as_str())
                .filter(|name| *name != truth)
                .collect();
            flipped = Some(others[rng.random_range(0..others.len())].to_string());
        }
    }

    let (chosen, raw_output) = match flipped {
        Some(other) => (other.clone(), format!("noise: {other}")),
        None => (truth.clone(), format!("oracle: {truth}")),
    };
    Ok(Decision {
        chosen,
        raw_output,
        candidates_offered: candidate_names(candidates),
        mode,
    })
}

/// Derives a child seed from a parent seed and two stream indices using
/// chained SplitMix64 finalizers. The scheme is fixed: callers rely on it
/// to reproduce runs from a single `u64` seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b)
}

/// Noise injection for [`MockBackend`]: with probability `rate` a decision
/// is flipped to a random sibling candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub rate: f64,
    /// Levels the noise applies to; `None` means every level.
    pub levels: Option<Vec<u64>>,
}

impl Noise {
    pub fn at_all_levels(rate: f64) -> Self {
        Self { rate, levels: None }
    }

    pub fn at_levels(rate: f64, levels: Vec<u64>) -> Self {
        Self { rate, levels: Some(levels) }
    }

    fn rate_for(&self, level: u64) -> Option<f64> {
        match &self.levels {
            None => Some(self.rate),
            Some(levels) if levels.contains(&level) => Some(self.rate),
            Some(_) => None,
        }
    }
}

/// Deterministic stand-in for a hosted classifier.
///
/// The backend carries a truth table from item text to that item's full
/// category path. A request at level `k` is answered with the path's
/// level-`k` label, resolved against the offered candidates; if the label
/// is not among them (for example after an upstream noisy decision sent the
/// item down the wrong branch) the call fails as an oracle miss.
///
/// Every call derives its own RNG as `derive_seed(seed, item_index, level)`,
/// so batch results are independent of call order and thread interleaving.
#[derive(Debug, Clone)]
pub struct MockBackend {
    truth: HashMap<String, CategoryPath>,
    seed: u64,
    noise: Option<Noise>,
}

impl MockBackend {
    pub fn new(truth: HashMap<String, CategoryPath>, seed: u64) -> Self {
        Self { truth, seed, noise: None }
    }

    pub fn with_noise(mut self, noise: Noise) -> Self {
        self.noise = Some(noise);
        self
    }
}

impl ClassifierBackend for MockBackend {
    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
        let miss = || ClassifyError::OracleMiss {
            text: request.text.to_string(),
            candidates: candidate_names(request.candidates),
        };
        let path = self.truth.get(request.text).ok_or_else(miss)?;
        let level = usize::try_from(request.level).map_err(|_| miss())?;
        let wanted = path.label_at_level(level).ok_or_else(miss)?;
        let oracle = HashMap::from([(request.text.to_string(), wanted.to_string())]);

        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, request.item_index, request.level));
        let rate = self.noise.as_ref().and_then(|n| n.rate_for(request.level));
        mock_classify(
            request.text,
            request.candidates,
            request.mode,
            &oracle,
            rate.map(|r| (r, &mut rng)),
        )
    }
}

/// Multi-label analogue of [`MockBackend`]: answers from a table of item
/// text to its full label set, truncated to the request's cap.
#[derive(Debug, Clone)]
pub struct MockMultiBackend {
    truth: HashMap<String, Vec<String>>,
}

impl MockMultiBackend {
    pub fn new(truth: HashMap<String, Vec<String>>) -> Self {
        Self { truth }
    }
}

impl MultiLabelBackend for MockMultiBackend {
    fn classify_multi(
        &self,
        text: &str,
        candidates: &[CandidateLabel],
        max_labels: usize,
    ) -> Result<MultiLabelDecision, ClassifyError> {
        if candidates.is_empty() {
            return Err(ClassifyError::NoCandidates);
        }
        if max_labels == 0 || max_labels > candidates.len() {
            return Err(ClassifyError::InvalidMaxLabels {
                max: max_labels,
                candidates: candidates.len(),
            });
        }
        let labels = self.truth.get(text).ok_or_else(|| ClassifyError::OracleMiss {
            text: text.to_string(),
            candidates: candidate_names(candidates),
        })?;
        let raw_output = labels.join("\n");
        Ok(resolve_label_lines(&raw_output, candidates, max_labels))
    }
}

/// Resolves a multi-line reply into a [`MultiLabelDecision`]: each
/// non-empty line is normalized independently, unresolvable lines are
/// dropped (recorded, not fatal), duplicates collapse to the first
/// occurrence, and the result is truncated to the first `max_labels`
/// resolvable labels.
pub fn resolve_label_lines(
    raw: &str,
    candidates: &[CandidateLabel],
    max_labels: usize,
) -> MultiLabelDecision {
    let mut chosen = Vec::new();
    let mut dropped = Vec::new();
    let mut seen = HashSet::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match normalize_label(line, candidates) {
            Ok(name) => {
                if seen.insert(name.clone()) && chosen.len() < max_labels {
                    chosen.push(name);
                }
            }
            Err(_) => dropped.push(line.to_string()),
        }
    }
    MultiLabelDecision { chosen, max_labels, raw_output: raw.to_string(), dropped }
}
