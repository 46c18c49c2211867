use hallulab_core::benchgen::{gen_pope, gen_vg_qa, vg_frequencies, Fact, QAItem};
use hallulab_core::datagen::{cooccurrence_from_scene_graphs, SamplingMode};
use hallulab_core::datastore::{SceneGraph, SceneObject, SceneRelation};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 8] = ["dog", "cat", "car", "tree", "bench", "cup", "kite", "horse"];
const ATTRS: [&str; 8] = ["red", "blue", "small", "large", "wooden", "striped", "rare1", "rare2"];
const PREDS: [&str; 5] = ["on", "near", "under", "holding", "riding"];

fn corpus(seed: u64, n: usize) -> Vec<SceneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.random_range(2..=5);
            let objects: Vec<SceneObject> = (0..k)
                .map(|j| SceneObject {
                    object_id: format!("o{j}"),
                    name: NAMES.choose(&mut rng).unwrap().to_string(),
                    attributes: {
                        let mut a: Vec<String> = ATTRS[..6]
                            .iter()
                            .filter(|_| rng.random_bool(0.3))
                            .map(|a| a.to_string())
                            .collect();
                        if rng.random_bool(0.05) {
                            a.push(ATTRS[6 + j % 2].to_string());
                        }
                        a
                    },
                    bbox: [1.0, 1.0, 10.0, 10.0],
                })
                .collect();
            let relations = (0..rng.random_range(0..4))
                .map(|_| {
                    let s = rng.random_range(0..k);
                    SceneRelation {
                        subject_id: format!("o{s}"),
                        predicate: if rng.random_bool(0.03) { "riding" } else { PREDS[rng.random_range(0..4)] }
                            .to_string(),
                        object_id: format!("o{}", (s + 1) % k),
                    }
                })
                .collect();
            SceneGraph {
                image_id: format!("img{i:03}"),
                objects,
                relations,
            }
        })
        .collect()
}

#[test]
fn rare_attributes_and_predicates_never_asked() {
    for seed in 0..5 {
        let graphs = corpus(seed, 60);
        let threshold = 5;
        let (attrs, preds) = vg_frequencies(&graphs);
        let (items, _) = gen_vg_qa(&graphs, threshold, seed).unwrap();
        assert!(!items.is_empty());
        for item in &items {
            match &item.provenance.fact {
                Fact::Attribute { attribute, .. } => {
                    assert!(attrs[attribute] >= threshold, "{attribute} asked");
                    assert!(item.question.contains(attribute.as_str()));
                }
                Fact::Relation { predicate, .. } => {
                    assert!(preds[predicate] >= threshold, "{predicate} asked");
                }
                other => panic!("unexpected fact {other:?}"),
            }
            for rare in ATTRS[6..].iter().filter(|a| attrs.get(**a).copied().unwrap_or(0) < threshold) {
                assert!(!item.question.contains(rare), "{}", item.question);
            }
            if preds.get("riding").copied().unwrap_or(0) < threshold {
                assert!(!item.question.contains(" riding "), "{}", item.question);
            }
        }
    }
}

fn ids(items: &[QAItem]) -> Vec<&str> {
    items.iter().map(|i| i.id.as_str()).collect()
}

#[test]
fn generation_is_deterministic_with_stable_ids() {
    let graphs = corpus(9, 40);
    let table = cooccurrence_from_scene_graphs(&graphs);
    for mode in SamplingMode::ALL {
        let a = gen_pope(&graphs, &table, mode, 2, 3).unwrap();
        let b = gen_pope(&graphs, &table, mode, 2, 3).unwrap();
        assert_eq!(a, b);
        let unique: std::collections::BTreeSet<&str> = ids(&a.0).into_iter().collect();
        assert_eq!(unique.len(), a.0.len());
    }
    let a = gen_vg_qa(&graphs, 3, 3).unwrap();
    assert_eq!(a, gen_vg_qa(&graphs, 3, 3).unwrap());

    // An image's items do not depend on the images around it.
    let (all, _) = gen_vg_qa(&graphs, 3, 3).unwrap();
    let (all_pope, _) = gen_pope(&graphs, &table, SamplingMode::Random, 2, 3).unwrap();
    let (one_pope, _) = gen_pope(&graphs[5..6], &table, SamplingMode::Random, 2, 3).unwrap();
    let from_all: Vec<&QAItem> = all_pope.iter().filter(|i| i.subject == graphs[5].image_id).collect();
    assert_eq!(from_all, one_pope.iter().collect::<Vec<_>>());
    assert!(all.iter().all(|i| i.id.starts_with("vg-")));
}
