//! Property tests over randomly generated taxonomies and batches.

use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bpmap_core::blueprint::{parse_blueprint, CategoryPath};
use bpmap_core::classify::{normalize_label, CandidateLabel, MockBackend, Noise};
use bpmap_core::metrics::{weighted_f1, LabeledPair};
use bpmap_core::pipeline::{classify_batch, Item};
use bpmap_core::sim::{random_blueprint, random_leaf_path};

fn names(cands: &[CandidateLabel]) -> Vec<String> {
    cands.iter().map(|c| c.name.clone()).collect()
}

proptest! {
    #[test]
    fn serialized_blueprints_reparse_equal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blueprint = random_blueprint(&mut rng, 5, 6);
        let reparsed = parse_blueprint(&blueprint.to_json()).unwrap();
        prop_assert_eq!(reparsed, blueprint);
    }

    #[test]
    fn children_appear_in_the_next_level_listing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blueprint = random_blueprint(&mut rng, 4, 5);

        // walk every valid path; at each prefix of length k the children
        // must appear in labels_at_level(k + 1)
        let mut stack = vec![CategoryPath::empty()];
        while let Some(path) = stack.pop() {
            let children = blueprint.children_of(&path).unwrap();
            if children.is_empty() {
                continue;
            }
            let listing = blueprint.labels_at_level(path.len() + 1).unwrap();
            for child in &children {
                prop_assert!(listing.contains(&child.name));
            }
            for child in children {
                let mut next = path.clone();
                next.push(child.name);
                stack.push(next);
            }
        }
    }

    #[test]
    fn children_union_equals_level_listing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blueprint = random_blueprint(&mut rng, 4, 5);

        for level in 1..=blueprint.depth() {
            // gather children over every valid path of length level - 1
            let mut gathered = Vec::new();
            let mut stack = vec![CategoryPath::empty()];
            while let Some(path) = stack.pop() {
                if path.len() + 1 == level {
                    gathered.extend(names(&blueprint.children_of(&path).unwrap()));
                    continue;
                }
                for child in blueprint.children_of(&path).unwrap() {
                    let mut next = path.clone();
                    next.push(child.name);
                    stack.push(next);
                }
            }
            let mut listing = blueprint.labels_at_level(level).unwrap();
            gathered.sort_unstable();
            listing.sort_unstable();
            prop_assert_eq!(gathered, listing);
        }
    }

    #[test]
    fn normalization_is_idempotent_when_it_succeeds(
        raw in "[A-Za-z ,]{0,30}",
        pick in 0usize..3,
        trailing_period in any::<bool>(),
    ) {
        let candidates = vec![
            CandidateLabel::new("Alpha"),
            CandidateLabel::new("Beta"),
            CandidateLabel::new("Gamma"),
        ];
        // half the cases target a real candidate with decorations, the
        // rest are arbitrary strings that may or may not resolve
        let target = ["Alpha", "Beta", "Gamma"][pick];
        let decorated = format!(
            "{target}{}{raw}",
            if trailing_period { ". Definition:" } else { " Defination:" }
        );
        for input in [decorated.as_str(), raw.as_str()] {
            if let Ok(resolved) = normalize_label(input, &candidates) {
                prop_assert_eq!(normalize_label(&resolved, &candidates).unwrap(), resolved);
            }
        }
    }

    #[test]
    fn emitted_paths_satisfy_the_chain_invariant(seed in any::<u64>(), noise_step in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blueprint = random_blueprint(&mut rng, 5, 6);
        let noise_rate = [0.0, 0.25, 0.6][noise_step];

        let item_count = rng.random_range(1..=6);
        let mut truth = HashMap::new();
        let mut items = Vec::new();
        for i in 0..item_count {
            let text = format!("item text {i}");
            truth.insert(text.clone(), random_leaf_path(&mut rng, &blueprint));
            items.push(Item::new(format!("i{i}"), text, None).unwrap());
        }
        let backend = MockBackend::new(truth, seed ^ 0x5eed)
            .with_noise(Noise::at_all_levels(noise_rate));
        let records = classify_batch(&blueprint, &items, &[], &backend, 3);

        for record in records {
            // chain invariant: every prefix of the path resolves, stepwise
            let mut prefix = CategoryPath::empty();
            for label in record.path.labels() {
                let children = names(&blueprint.children_of(&prefix).unwrap());
                prop_assert!(children.contains(label));
                prefix.push(label.clone());
            }
            // failure bookkeeping: the path stops just above the failed level
            if let Some(failure) = &record.failure {
                prop_assert_eq!(record.path.len(), failure.level - 1);
            }
            // candidate-set fidelity: decisions saw exactly the children
            // of the path so far (auto-selected levels record no decision)
            let mut prefix = CategoryPath::empty();
            let mut decisions = record.decisions.iter();
            for label in record.path.labels() {
                let offered = blueprint.children_of(&prefix).unwrap();
                if offered.len() > 1 {
                    let decision = decisions.next().unwrap();
                    prop_assert_eq!(&decision.candidates_offered, &names(&offered));
                }
                prefix.push(label.clone());
            }
        }
    }

    #[test]
    fn weighted_f1_is_one_exactly_when_all_pairs_match(
        labels in proptest::collection::vec("[a-d]", 1..40),
        flip in any::<bool>(),
    ) {
        let mut pairs: Vec<LabeledPair> =
            labels.iter().map(|l| LabeledPair::new(l.clone(), l.clone())).collect();
        if flip {
            pairs[0].predicted = "zz".to_string();
        }
        let all_match = pairs.iter().all(|p| p.predicted == p.reference);
        let score = weighted_f1(&pairs).unwrap();
        if all_match {
            prop_assert_eq!(score, 1.0);
        } else {
            prop_assert!(score < 1.0);
        }
    }
}
