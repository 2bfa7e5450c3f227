//! Sequential top-down classification of item batches through a blueprint.
//!
//! Each item walks the tree from the roots: the candidates at every step
//! are exactly the children of the node reached so far, a single candidate
//! is auto-selected without a backend call, and a backend or normalization
//! error is embedded in the item's record instead of aborting the batch.
//! Within one item the levels are strictly sequential; across items the
//! batch fans out over a bounded worker pool, and records are returned in
//! input order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blueprint::{ci_eq, Blueprint, CategoryPath};
use crate::classify::{ClassifierBackend, ClassifyRequest, Decision, Exemplar, Mode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("item stem is empty")]
    EmptyStem,
    #[error("exemplar row {row}: unknown label {label:?}")]
    UnknownExemplarLabel { label: String, row: usize },
    #[error("level {level} is configured more than once")]
    DuplicateLevelConfig { level: usize },
    #[error("level {level} is out of range (blueprint depth is {depth})")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("level {level} uses few-shot mode but {node:?} has no exemplars")]
    FewShotWithoutExemplars { level: usize, node: String },
    #[error("blueprint rejected attached exemplars: {0}")]
    InvalidBlueprint(String),
}

/// Separator between an item's stem and its answer key in the combined
/// classifier input.
pub const ANSWER_SEPARATOR: &str = "\n\nAnswer: ";

/// Joins a question stem with its answer key. The key is marked with
/// [`ANSWER_SEPARATOR`] so it stays distinguishable inside prompts; a
/// missing key leaves the stem untouched.
pub fn combine_text(stem: &str, answer_key: Option<&str>) -> Result<String, PipelineError> {
    if stem.trim().is_empty() {
        return Err(PipelineError::EmptyStem);
    }
    Ok(match answer_key {
        Some(key) => format!("{stem}{ANSWER_SEPARATOR}{key}"),
        None => stem.to_string(),
    })
}

/// A unit of text to classify: a question stem plus an optional answer
/// key, combined once at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: String,
    pub stem: String,
    pub answer_key: Option<String>,
    combined: String,
}

impl Item {
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        answer_key: Option<String>,
    ) -> Result<Self, PipelineError> {
        let stem = stem.into();
        let combined = combine_text(&stem, answer_key.as_deref())?;
        Ok(Self { id: id.into(), stem, answer_key, combined })
    }

    /// The text the backend sees: stem, or stem plus answer key.
    pub fn combined_text(&self) -> &str {
        &self.combined
    }
}

/// Classification mode for one level of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub level: usize,
    pub mode: Mode,
}

/// The default plan: level 1 runs few-shot when every root already carries
/// exemplars, everything else zero-shot. Levels without an entry fall back
/// to zero-shot.
pub fn default_level_plan(blueprint: &Blueprint) -> Vec<LevelConfig> {
    let roots_have_exemplars = blueprint.roots().iter().all(|node| !node.exemplars.is_empty());
    (1..=blueprint.depth())
        .map(|level| LevelConfig {
            level,
            mode: if level == 1 && roots_have_exemplars { Mode::FewShot } else { Mode::ZeroShot },
        })
        .collect()
}

/// Checks a level plan against a blueprint: no duplicate or out-of-range
/// levels, and few-shot levels only where every node at that level has at
/// least one exemplar to show.
pub fn validate_level_plan(
    blueprint: &Blueprint,
    levels: &[LevelConfig],
) -> Result<(), PipelineError> {
    let depth = blueprint.depth();
    let mut seen = std::collections::HashSet::new();
    for config in levels {
        if config.level == 0 || config.level > depth {
            return Err(PipelineError::LevelOutOfRange { level: config.level, depth });
        }
        if !seen.insert(config.level) {
            return Err(PipelineError::DuplicateLevelConfig { level: config.level });
        }
        if config.mode == Mode::FewShot {
            let names = blueprint
                .labels_at_level(config.level)
                .map_err(|e| PipelineError::InvalidBlueprint(e.to_string()))?;
            let mut nodes = Vec::new();
            collect_nodes_at_level(blueprint, config.level, &mut nodes);
            for (name, exemplar_count) in names.iter().zip(nodes) {
                if exemplar_count == 0 {
                    return Err(PipelineError::FewShotWithoutExemplars {
                        level: config.level,
                        node: name.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn collect_nodes_at_level(blueprint: &Blueprint, level: usize, out: &mut Vec<usize>) {
    fn walk(nodes: &[crate::blueprint::BlueprintNode], depth: usize, level: usize, out: &mut Vec<usize>) {
        for node in nodes {
            if depth == level {
                out.push(node.exemplars.len());
            } else {
                walk(&node.children, depth + 1, level, out);
            }
        }
    }
    walk(blueprint.roots(), 1, level, out);
}

fn mode_for(levels: &[LevelConfig], level: usize) -> Mode {
    levels.iter().find(|c| c.level == level).map(|c| c.mode).unwrap_or(Mode::ZeroShot)
}

/// Where and why an item's classification stopped early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub level: usize,
    pub reason: String,
}

/// The audit trail for one item: the path assigned so far, one decision
/// per backend call (auto-selected levels contribute none), and the
/// failure that stopped the walk, if any. When `failure` is present the
/// path has exactly `failure.level - 1` labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub item_id: String,
    pub path: CategoryPath,
    pub decisions: Vec<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

/// Classifies one item top-down through the blueprint. Never panics or
/// errors: problems are embedded in the returned record.
pub fn classify_item(
    blueprint: &Blueprint,
    item: &Item,
    levels: &[LevelConfig],
    backend: &dyn ClassifierBackend,
) -> ClassificationRecord {
    classify_item_indexed(blueprint, item, 0, levels, backend)
}

/// [`classify_item`] with an explicit batch position, which deterministic
/// backends fold into their per-call seed.
pub fn classify_item_indexed(
    blueprint: &Blueprint,
    item: &Item,
    item_index: u64,
    levels: &[LevelConfig],
    backend: &dyn ClassifierBackend,
) -> ClassificationRecord {
    let mut path = CategoryPath::empty();
    let mut decisions = Vec::new();
    let mut failure = None;

    loop {
        let level = path.len() + 1;
        let candidates = match blueprint.children_of(&path) {
            Ok(candidates) => candidates,
            Err(e) => {
                failure = Some(Failure { level, reason: e.to_string() });
                break;
            }
        };
        if candidates.is_empty() {
            break; // leaf reached
        }
        if candidates.len() == 1 {
            // a one-way decision is vacuous; assign it without a call
            path.push(candidates[0].name.clone());
            continue;
        }
        let request = ClassifyRequest {
            text: item.combined_text(),
            candidates: &candidates,
            mode: mode_for(levels, level),
            item_index,
            level: level as u64,
        };
        match backend.classify(&request) {
            Ok(decision) => {
                // candidate-set fidelity: a decision may only move to one
                // of the candidates that were actually offered
                if !candidates.iter().any(|c| c.name == decision.chosen) {
                    failure = Some(Failure {
                        level,
                        reason: format!(
                            "backend chose {:?}, which was not among the offered candidates",
                            decision.chosen
                        ),
                    });
                    break;
                }
                path.push(decision.chosen.clone());
                decisions.push(decision);
            }
            Err(e) => {
                failure = Some(Failure { level, reason: e.to_string() });
                break;
            }
        }
    }

    ClassificationRecord { item_id: item.id.clone(), path, decisions, failure }
}

/// Classifies a batch with at most `concurrency_limit` items in flight.
/// Records come back in input order, and with a deterministic backend the
/// output is identical to a sequential run.
pub fn classify_batch(
    blueprint: &Blueprint,
    items: &[Item],
    levels: &[LevelConfig],
    backend: &dyn ClassifierBackend,
    concurrency_limit: usize,
) -> Vec<ClassificationRecord> {
    let workers = concurrency_limit.max(1).min(items.len());
    if workers <= 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| classify_item_indexed(blueprint, item, i as u64, levels, backend))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ClassificationRecord>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let record =
                    classify_item_indexed(blueprint, &items[i], i as u64, levels, backend);
                *slots[i].lock().unwrap() = Some(record);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Returns a blueprint with the exemplars merged onto their named nodes
/// (labels resolve case-insensitively; appended after any in-file
/// exemplars). Fails on the first label that names no node, reporting its
/// 1-based row.
pub fn attach_exemplars(
    blueprint: &Blueprint,
    exemplars: &[Exemplar],
) -> Result<Blueprint, PipelineError> {
    let mut out = blueprint.clone();
    for (index, exemplar) in exemplars.iter().enumerate() {
        let mut hit = false;
        out.visit_nodes_mut(&mut |node| {
            if ci_eq(&node.name, &exemplar.label) {
                node.exemplars.push(Exemplar::new(exemplar.text.clone(), node.name.clone()));
                hit = true;
            }
        });
        if !hit {
            return Err(PipelineError::UnknownExemplarLabel {
                label: exemplar.label.clone(),
                row: index + 1,
            });
        }
    }
    out.revalidate().map_err(|e| PipelineError::InvalidBlueprint(e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::blueprint::BlueprintNode;
    use crate::classify::{CandidateLabel, ClassifyError, MockBackend};
    use crate::sim::fixture_blueprint;

    #[test]
    fn combine_text_appends_answer_marker() {
        assert_eq!(
            combine_text("Which drug lowers blood sugar?", Some("Metformin")).unwrap(),
            "Which drug lowers blood sugar?\n\nAnswer: Metformin"
        );
        assert_eq!(combine_text("Which drug?", None).unwrap(), "Which drug?");
        assert_eq!(combine_text("  ", None), Err(PipelineError::EmptyStem));
    }

    #[test]
    fn combine_text_keeps_option_stems_and_answers_only() {
        let combined =
            combine_text("For the following options, pick the best.", Some("Option B text"))
                .unwrap();
        assert!(combined.starts_with("For the following options"));
        assert!(combined.ends_with("Option B text"));
    }

    fn meow_backend() -> MockBackend {
        let truth = HashMap::from([(
            "Meow".to_string(),
            CategoryPath::from(["Animal", "Mammal", "Cat"]),
        )]);
        MockBackend::new(truth, 0)
    }

    #[test]
    fn classify_item_walks_to_the_leaf() {
        let blueprint = fixture_blueprint();
        let item = Item::new("w1", "Meow", None).unwrap();
        let record = classify_item(&blueprint, &item, &default_level_plan(&blueprint), &meow_backend());
        assert_eq!(record.path, CategoryPath::from(["Animal", "Mammal", "Cat"]));
        assert_eq!(record.decisions.len(), 3);
        assert!(record.failure.is_none());
    }

    #[test]
    fn single_candidate_levels_are_auto_selected() {
        let blueprint = Blueprint::new(
            "chain",
            vec![BlueprintNode::with_children(
                "Only",
                vec![BlueprintNode::leaf("Deeper")],
            )],
            None,
        )
        .unwrap();
        // A backend that always fails: it must never be called.
        struct Explode;
        impl ClassifierBackend for Explode {
            fn classify(&self, _: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
                panic!("backend must not be called for single-candidate levels");
            }
        }
        let item = Item::new("1", "anything", None).unwrap();
        let record = classify_item(&blueprint, &item, &[], &Explode);
        assert_eq!(record.path, CategoryPath::from(["Only", "Deeper"]));
        assert!(record.decisions.is_empty());
        assert!(record.failure.is_none());
    }

    struct ScriptedBackend {
        by_level: HashMap<u64, String>,
    }

    impl ClassifierBackend for ScriptedBackend {
        fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
            let raw = self.by_level.get(&request.level).cloned().unwrap_or_default();
            let chosen = crate::classify::normalize_label(&raw, request.candidates)?;
            Ok(Decision {
                chosen,
                raw_output: raw,
                candidates_offered: request.candidates.iter().map(|c| c.name.clone()).collect(),
                mode: request.mode,
            })
        }
    }

    #[test]
    fn unresolvable_reply_is_recorded_as_failure() {
        let blueprint = fixture_blueprint();
        let backend = ScriptedBackend {
            by_level: HashMap::from([
                (1, "Animal".to_string()),
                (2, "something else entirely".to_string()),
            ]),
        };
        let item = Item::new("w1", "Meow", None).unwrap();
        let record = classify_item(&blueprint, &item, &[], &backend);
        assert_eq!(record.path, CategoryPath::from(["Animal"]));
        assert_eq!(record.decisions.len(), 1);
        let failure = record.failure.unwrap();
        assert_eq!(failure.level, 2);
        assert!(failure.reason.contains("unresolvable"));
    }

    struct OffMenuBackend;
    impl ClassifierBackend for OffMenuBackend {
        fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Decision, ClassifyError> {
            Ok(Decision {
                chosen: "Fungus".to_string(),
                raw_output: "Fungus".to_string(),
                candidates_offered: request.candidates.iter().map(|c| c.name.clone()).collect(),
                mode: request.mode,
            })
        }
    }

    #[test]
    fn off_menu_backend_choice_is_rejected() {
        let blueprint = fixture_blueprint();
        let item = Item::new("w1", "Meow", None).unwrap();
        let record = classify_item(&blueprint, &item, &[], &OffMenuBackend);
        assert!(record.path.is_empty());
        let failure = record.failure.unwrap();
        assert_eq!(failure.level, 1);
        assert!(failure.reason.contains("not among the offered candidates"));
    }

    #[test]
    fn batch_preserves_input_order_and_matches_sequential() {
        let blueprint = fixture_blueprint();
        let pool = crate::sim::fixture_pool();
        let truth: HashMap<String, CategoryPath> =
            pool.iter().map(|e| (e.word.clone(), e.path.clone())).collect();
        let backend = MockBackend::new(truth, 9).with_noise(crate::classify::Noise::at_all_levels(0.3));
        let items: Vec<Item> = pool
            .iter()
            .map(|e| Item::new(e.word.clone(), e.word.clone(), None).unwrap())
            .collect();
        let levels = default_level_plan(&blueprint);

        let sequential = classify_batch(&blueprint, &items, &levels, &backend, 1);
        let concurrent = classify_batch(&blueprint, &items, &levels, &backend, 8);
        assert_eq!(sequential, concurrent);
        for (item, record) in items.iter().zip(&sequential) {
            assert_eq!(item.id, record.item_id);
        }
    }

    #[test]
    fn empty_batch_yields_no_records() {
        let blueprint = fixture_blueprint();
        let records = classify_batch(&blueprint, &[], &[], &meow_backend(), 4);
        assert!(records.is_empty());
    }

    #[test]
    fn attach_exemplars_merges_by_label() {
        let blueprint = fixture_blueprint();
        let table: Vec<Exemplar> = (0..10)
            .flat_map(|i| {
                vec![
                    Exemplar::new(format!("animal sample {i}"), "Animal"),
                    Exemplar::new(format!("plant sample {i}"), "plant"),
                ]
            })
            .collect();
        let enriched = attach_exemplars(&blueprint, &table).unwrap();
        assert_eq!(enriched.roots()[0].exemplars.len(), 10);
        assert_eq!(enriched.roots()[1].exemplars.len(), 10);
        // labels are stored in the node's canonical casing
        assert!(enriched.roots()[1].exemplars.iter().all(|e| e.label == "Plant"));
        // the original is untouched
        assert!(blueprint.roots()[0].exemplars.is_empty());
    }

    #[test]
    fn attach_exemplars_reports_unknown_labels_with_row() {
        let blueprint = fixture_blueprint();
        let table = vec![
            Exemplar::new("ok", "Animal"),
            Exemplar::new("bad", "Cardiologgy"),
        ];
        assert_eq!(
            attach_exemplars(&blueprint, &table),
            Err(PipelineError::UnknownExemplarLabel { label: "Cardiologgy".into(), row: 2 })
        );
    }

    #[test]
    fn attach_exemplars_empty_table_is_identity() {
        let blueprint = fixture_blueprint();
        assert_eq!(attach_exemplars(&blueprint, &[]).unwrap(), blueprint);
    }

    #[test]
    fn default_plan_prefers_few_shot_only_with_exemplars() {
        let blueprint = fixture_blueprint();
        let plan = default_level_plan(&blueprint);
        assert!(plan.iter().all(|c| c.mode == Mode::ZeroShot));

        let table = vec![Exemplar::new("a", "Animal"), Exemplar::new("p", "Plant")];
        let enriched = attach_exemplars(&blueprint, &table).unwrap();
        let plan = default_level_plan(&enriched);
        assert_eq!(plan[0].mode, Mode::FewShot);
        assert!(plan[1..].iter().all(|c| c.mode == Mode::ZeroShot));
    }

    #[test]
    fn level_plan_validation() {
        let blueprint = fixture_blueprint();
        let few = |level| LevelConfig { level, mode: Mode::FewShot };
        let zero = |level| LevelConfig { level, mode: Mode::ZeroShot };

        assert!(validate_level_plan(&blueprint, &[zero(1), zero(2), zero(3)]).is_ok());
        assert_eq!(
            validate_level_plan(&blueprint, &[zero(1), zero(1)]),
            Err(PipelineError::DuplicateLevelConfig { level: 1 })
        );
        assert_eq!(
            validate_level_plan(&blueprint, &[zero(4)]),
            Err(PipelineError::LevelOutOfRange { level: 4, depth: 3 })
        );
        assert!(matches!(
            validate_level_plan(&blueprint, &[few(1)]),
            Err(PipelineError::FewShotWithoutExemplars { level: 1, .. })
        ));

        let table = vec![Exemplar::new("a", "Animal"), Exemplar::new("p", "Plant")];
        let enriched = attach_exemplars(&blueprint, &table).unwrap();
        assert!(validate_level_plan(&enriched, &[few(1), zero(2)]).is_ok());
    }

    fn candidate_names(cands: &[CandidateLabel]) -> Vec<String> {
        cands.iter().map(|c| c.name.clone()).collect()
    }

    #[test]
    fn offered_candidates_are_exactly_the_children() {
        let blueprint = fixture_blueprint();
        let item = Item::new("w1", "Meow", None).unwrap();
        let record = classify_item(&blueprint, &item, &[], &meow_backend());
        let mut prefix = CategoryPath::empty();
        let mut decision_iter = record.decisions.iter();
        for label in record.path.labels() {
            let offered = blueprint.children_of(&prefix).unwrap();
            if offered.len() > 1 {
                let decision = decision_iter.next().unwrap();
                assert_eq!(decision.candidates_offered, candidate_names(&offered));
            }
            prefix.push(label.clone());
        }
    }
}
