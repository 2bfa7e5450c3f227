//! Seeded repeated-subsampling simulation harness, plus the shipped
//! fixtures and synthetic-taxonomy builders used for testing and fuzzing.
//!
//! Everything derives from a single `u64` seed through the fixed
//! [`derive_seed`] scheme (ChaCha8 streams keyed by SplitMix64 hashing):
//! repetition `r` draws its sample with a `ChaCha8Rng` seeded by
//! `derive_seed(seed, r, SAMPLE_STREAM)` and hands
//! `derive_seed(seed, r, BACKEND_STREAM)` to the backend factory. Each
//! repetition therefore depends only on `(seed, r)`, so repetitions can be
//! run or re-run in any order without changing the report.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blueprint::{Blueprint, BlueprintError, BlueprintNode, CategoryPath};
use crate::classify::{derive_seed, ClassifierBackend, MockBackend, Noise};
use crate::metrics::{
    per_level_pairs, score_records, LabeledPair, MetricsError, MetricsReport, ReferenceEntry,
};
use crate::pipeline::{classify_batch, default_level_plan, Item, PipelineError};

const SAMPLE_STREAM: u64 = 0;
const BACKEND_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("sample size {sample} exceeds pool size {pool}")]
    SampleTooLarge { sample: usize, pool: usize },
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("pool word {word:?} appears more than once")]
    DuplicateWord { word: String },
    #[error("pool word {word:?}: {reason}")]
    InvalidPoolEntry { word: String, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Which classifier the simulation should run against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Llm,
}

impl std::fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendChoice::Mock => f.write_str("mock"),
            BackendChoice::Llm => f.write_str("llm"),
        }
    }
}

/// One pool entry: a word and its true leaf path in the blueprint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub word: String,
    pub path: CategoryPath,
}

impl PoolEntry {
    pub fn new(word: impl Into<String>, path: CategoryPath) -> Self {
        Self { word: word.into(), path }
    }
}

/// Full description of a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub blueprint: Blueprint,
    pub pool: Vec<PoolEntry>,
    pub sample_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub backend: BackendChoice,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            blueprint: fixture_blueprint(),
            pool: fixture_pool(),
            sample_size: 10,
            repetitions: 100,
            seed: 42,
            backend: BackendChoice::Mock,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sample_size == 0 {
            return Err(SimError::EmptySample);
        }
        if self.sample_size > self.pool.len() {
            return Err(SimError::SampleTooLarge {
                sample: self.sample_size,
                pool: self.pool.len(),
            });
        }
        if self.repetitions == 0 {
            return Err(SimError::NoRepetitions);
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &self.pool {
            if entry.word.trim().is_empty() {
                return Err(SimError::InvalidPoolEntry {
                    word: entry.word.clone(),
                    reason: "empty word".into(),
                });
            }
            if !seen.insert(entry.word.clone()) {
                return Err(SimError::DuplicateWord { word: entry.word.clone() });
            }
            if !self.blueprint.is_leaf_path(&entry.path) {
                return Err(SimError::InvalidPoolEntry {
                    word: entry.word.clone(),
                    reason: format!("path \"{}\" is not a leaf path in the blueprint", entry.path),
                });
            }
        }
        Ok(())
    }
}

/// Scalar echo of the spec a report was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    pub blueprint_title: String,
    pub pool_size: usize,
    pub sample_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub backend: BackendChoice,
}

/// Aggregated simulation results. `mean_weighted_f1` is the mean over
/// repetitions of each repetition's mean weighted F1 (the headline
/// number); `pooled_weighted_f1` instead pools every scored pair across
/// repetitions and levels into one computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub spec: SpecEcho,
    pub mean_weighted_f1: f64,
    pub pooled_weighted_f1: f64,
    pub mean_level_weighted_f1: BTreeMap<usize, f64>,
    pub mean_level_accuracy: BTreeMap<usize, f64>,
    pub per_repetition: Vec<MetricsReport>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A factory handing out one backend per repetition, keyed by that
/// repetition's derived seed. Mock backends take the seed so noise draws
/// are independent across repetitions; a shared live client may ignore it.
pub type BackendFactory<'a> = dyn Fn(u64) -> Box<dyn ClassifierBackend> + Sync + 'a;

/// Convenience factory over [`MockBackend`] answering from the pool's true
/// paths, with optional noise.
pub fn mock_backend_factory(
    pool: &[PoolEntry],
    noise: Option<Noise>,
) -> Box<dyn Fn(u64) -> Box<dyn ClassifierBackend> + Send + Sync> {
    let truth: HashMap<String, CategoryPath> =
        pool.iter().map(|e| (e.word.clone(), e.path.clone())).collect();
    Box::new(move |seed| {
        let backend = MockBackend::new(truth.clone(), seed);
        match &noise {
            Some(noise) => Box::new(backend.with_noise(noise.clone())),
            None => Box::new(backend),
        }
    })
}

/// Runs the full simulation: for each repetition, draw `sample_size` pool
/// entries without replacement, classify each word through the hierarchy,
/// and score against the pool's true paths. Per-item failures reduce the
/// scores; they never abort the run.
pub fn run_simulation(
    spec: &SimulationSpec,
    make_backend: &BackendFactory<'_>,
) -> Result<SimulationReport, SimError> {
    spec.validate()?;
    let levels = default_level_plan(&spec.blueprint);

    let mut per_repetition = Vec::with_capacity(spec.repetitions);
    let mut pooled_pairs: Vec<LabeledPair> = Vec::new();
    let mut level_f1_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut level_acc_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();

    for repetition in 0..spec.repetitions {
        let rep = repetition as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, rep, SAMPLE_STREAM));
        let picks = rand::seq::index::sample(&mut rng, spec.pool.len(), spec.sample_size);
        let sampled: Vec<&PoolEntry> = picks.iter().map(|i| &spec.pool[i]).collect();

        let items: Vec<Item> = sampled
            .iter()
            .map(|entry| Item::new(entry.word.clone(), entry.word.clone(), None))
            .collect::<Result<_, _>>()?;
        let references: Vec<ReferenceEntry> = sampled
            .iter()
            .map(|entry| ReferenceEntry::new(entry.word.clone(), entry.path.clone()))
            .collect();

        let backend = make_backend(derive_seed(spec.seed, rep, BACKEND_STREAM));
        let records = classify_batch(&spec.blueprint, &items, &levels, backend.as_ref(), 1);

        for (level, pairs) in per_level_pairs(&records, &references)? {
            let _ = level;
            pooled_pairs.extend(pairs);
        }
        let report = score_records(&records, &references)?;
        for (&level, metrics) in &report.per_level {
            let f1 = level_f1_sums.entry(level).or_insert((0.0, 0));
            f1.0 += metrics.weighted_f1;
            f1.1 += 1;
            let acc = level_acc_sums.entry(level).or_insert((0.0, 0));
            acc.0 += metrics.accuracy;
            acc.1 += 1;
        }
        per_repetition.push(report);
    }

    let mean_weighted_f1 = per_repetition.iter().map(|r| r.mean_weighted_f1).sum::<f64>()
        / per_repetition.len() as f64;
    let pooled_weighted_f1 = crate::metrics::weighted_f1(&pooled_pairs)?;
    let mean_level_weighted_f1 =
        level_f1_sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
    let mean_level_accuracy =
        level_acc_sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();

    Ok(SimulationReport {
        spec: SpecEcho {
            blueprint_title: spec.blueprint.title.clone(),
            pool_size: spec.pool.len(),
            sample_size: spec.sample_size,
            repetitions: spec.repetitions,
            seed: spec.seed,
            backend: spec.backend,
        },
        mean_weighted_f1,
        pooled_weighted_f1,
        mean_level_weighted_f1,
        mean_level_accuracy,
        per_repetition,
    })
}

// --- fixtures and synthetic taxonomies ---------------------------------

/// The shipped three-level animals/plants example taxonomy.
pub fn fixture_blueprint() -> Blueprint {
    let node = BlueprintNode::with_children;
    let leaf = BlueprintNode::leaf;
    Blueprint::new(
        "Animals and Plants",
        vec![
            node(
                "Animal",
                vec![
                    node("Mammal", vec![leaf("Dog"), leaf("Cat")]),
                    node("Bird", vec![leaf("Eagle"), leaf("Sparrow")]),
                ],
            ),
            node(
                "Plant",
                vec![
                    node("Tree", vec![leaf("Oak"), leaf("Pine")]),
                    node("Flower", vec![leaf("Rose"), leaf("Tulip")]),
                ],
            ),
        ],
        Some(3),
    )
    .expect("fixture blueprint is valid")
}

/// The shipped 20-word pool: five word variants for each of the leaves
/// Cat, Dog, Rose, and Tulip, each tagged with its true three-level path.
/// The other four leaves exist only as distractor candidates.
pub fn fixture_pool() -> Vec<PoolEntry> {
    fn entries(words: [&str; 5], path: [&str; 3]) -> Vec<PoolEntry> {
        words
            .iter()
            .map(|word| PoolEntry::new(*word, CategoryPath::from(path.map(String::from))))
            .collect()
    }
    let mut pool = Vec::with_capacity(20);
    pool.extend(entries(
        ["Meow", "tabby kitten", "Siamese", "Persian shorthair", "alley cat"],
        ["Animal", "Mammal", "Cat"],
    ));
    pool.extend(entries(
        ["Woof", "golden retriever puppy", "beagle", "bulldog", "terrier"],
        ["Animal", "Mammal", "Dog"],
    ));
    pool.extend(entries(
        ["damask rose", "rosebud", "floribunda", "briar bloom", "tea rose"],
        ["Plant", "Flower", "Rose"],
    ));
    pool.extend(entries(
        ["tulip bulb", "Dutch tulip", "parrot tulip", "triumph tulip", "tulip festival bouquet"],
        ["Plant", "Flower", "Tulip"],
    ));
    pool
}

/// Builds a taxonomy with the given number of categories per level,
/// children distributed as evenly as possible across parents. Useful for
/// rehearsing large-blueprint runs without real content.
pub fn synthetic_blueprint(title: &str, level_counts: &[usize]) -> Result<Blueprint, BlueprintError> {
    if level_counts.is_empty() || level_counts[0] == 0 {
        return Err(BlueprintError::NoRoots);
    }
    let depth = level_counts.len();
    let name = |level: usize, index: usize| format!("N{}.{}", level, index + 1);

    // build bottom-up: each pass groups the current level under new parents
    let last = depth - 1;
    let mut nodes: Vec<BlueprintNode> = (0..level_counts[last])
        .map(|i| {
            let mut node = BlueprintNode::leaf(name(last + 1, i));
            node.definition = Some(format!("Synthetic category {}", name(last + 1, i)));
            node
        })
        .collect();
    for level in (0..last).rev() {
        let parent_count = level_counts[level];
        let child_count = nodes.len();
        let base = child_count / parent_count;
        let remainder = child_count % parent_count;
        let mut children = nodes.into_iter();
        nodes = (0..parent_count)
            .map(|i| {
                let take = base + usize::from(i < remainder);
                let mut node = BlueprintNode::with_children(
                    name(level + 1, i),
                    children.by_ref().take(take).collect(),
                );
                node.definition = Some(format!("Synthetic category {}", name(level + 1, i)));
                node
            })
            .collect();
    }
    Blueprint::new(title, nodes, Some(depth))
}

/// Generates a random ragged taxonomy for fuzzing: at most `max_depth`
/// levels, at most `max_fanout` children per node, globally unique names.
pub fn random_blueprint<R: Rng>(rng: &mut R, max_depth: usize, max_fanout: usize) -> Blueprint {
    fn grow<R: Rng>(
        rng: &mut R,
        remaining: usize,
        max_fanout: usize,
        counter: &mut usize,
    ) -> Vec<BlueprintNode> {
        let fanout = rng.random_range(1..=max_fanout);
        (0..fanout)
            .map(|_| {
                *counter += 1;
                let mut node = BlueprintNode::leaf(format!("C{counter}"));
                if rng.random_bool(0.3) {
                    node.definition = Some(format!("category number {counter}"));
                }
                if remaining > 1 && rng.random_bool(0.8) {
                    node.children = grow(rng, remaining - 1, max_fanout, counter);
                }
                node
            })
            .collect()
    }
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut counter = 0;
    let roots = grow(rng, depth, max_fanout.max(1), &mut counter);
    Blueprint::new("fuzz taxonomy", roots, None).expect("generated names are unique")
}

/// Picks a uniformly random root-to-leaf path.
pub fn random_leaf_path<R: Rng>(rng: &mut R, blueprint: &Blueprint) -> CategoryPath {
    let mut path = CategoryPath::empty();
    let mut nodes = blueprint.roots();
    while !nodes.is_empty() {
        let node = &nodes[rng.random_range(0..nodes.len())];
        path.push(node.name.clone());
        nodes = &node.children;
    }
    path
}
