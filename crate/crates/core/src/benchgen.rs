//! Balanced yes/no benchmark generation from scene graphs and knowledge-graph
//! triples.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, sample_negative_objects, CooccurrenceTable, GenWarning, SamplingMode};
use crate::datastore::{read_json_lines, write_json_lines, KgTriple, SceneGraph};
use crate::error::{LabError, Result};

pub const QA_SCHEMA_VERSION: u32 = 1;

/// Default minimum corpus frequency for attributes and predicates.
pub const DEFAULT_FREQUENCY_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    ObjectExistence,
    Attribute,
    Relation,
    KgEntity,
    KgRelation,
}

impl QType {
    pub fn name(self) -> &'static str {
        match self {
            Self::ObjectExistence => "object_existence",
            Self::Attribute => "attribute",
            Self::Relation => "relation",
            Self::KgEntity => "kg_entity",
            Self::KgRelation => "kg_relation",
        }
    }
}

/// The fact a question asserts; for gold `no` items this is the planted
/// falsehood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fact {
    Object {
        object: String,
    },
    Attribute {
        object_id: String,
        object: String,
        attribute: String,
    },
    Relation {
        subject_id: String,
        subject: String,
        predicate: String,
        object_id: String,
        object: String,
    },
    Entity {
        entity: String,
    },
    Triple {
        head: String,
        relation: String,
        tail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Annotation the item was built from.
    pub source: String,
    pub fact: Fact,
    /// Field replaced to build a negative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub schema_version: u32,
    pub id: String,
    /// Image id, or the visual handle / entity for knowledge-graph items.
    pub subject: String,
    pub question: String,
    pub gold: Answer,
    pub qtype: QType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_mode: Option<SamplingMode>,
    pub provenance: Provenance,
}

fn item(
    id: String,
    subject: &str,
    question: String,
    gold: Answer,
    qtype: QType,
    sampling_mode: Option<SamplingMode>,
    provenance: Provenance,
) -> QAItem {
    QAItem {
        schema_version: QA_SCHEMA_VERSION,
        id,
        subject: subject.to_string(),
        question,
        gold,
        qtype,
        sampling_mode,
        provenance,
    }
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn pope_question(object: &str) -> String {
    format!("Is there {} {object} in the image?", article(object))
}

pub fn attribute_question(object: &str, attribute: &str) -> String {
    format!("Is the {object} {attribute} in the image?")
}

pub fn relation_question(subject: &str, predicate: &str, object: &str) -> String {
    format!("Is the {subject} {predicate} the {object}?")
}

pub fn entity_question(entity: &str) -> String {
    format!("Is this {entity}?")
}

pub fn triple_question(head: &str, relation: &str, tail: &str) -> String {
    format!("Is {head} {relation} {tail}?")
}

/// `n_per_image` present-object questions and as many absent-object
/// questions per image; images that cannot supply both are skipped.
pub fn gen_pope(
    graphs: &[SceneGraph],
    table: &CooccurrenceTable,
    mode: SamplingMode,
    n_per_image: usize,
    seed: u64,
) -> Result<(Vec<QAItem>, Vec<GenWarning>)> {
    if n_per_image == 0 {
        return Err(LabError::invalid("n_per_image must be at least 1"));
    }
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for g in graphs {
        let image_seed = derive_seed(seed, &g.image_id);
        let present = g.object_names();
        if present.len() < n_per_image {
            warnings.push(GenWarning::new(
                &g.image_id,
                format!("skipped: {} present objects, need {n_per_image}", present.len()),
            ));
            continue;
        }
        let negatives = match sample_negative_objects(table, &present, mode, n_per_image, image_seed) {
            Ok(n) => n,
            Err(e) => {
                warnings.push(GenWarning::new(&g.image_id, format!("skipped: {e}")));
                continue;
            }
        };
        let names: Vec<&String> = present.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed.rotate_left(17));
        let positives: Vec<&String> = names.choose_multiple(&mut rng, n_per_image).copied().collect();
        let source = format!("scene_graph:{}", g.image_id);
        for (j, (pos, neg)) in positives.iter().zip(&negatives).enumerate() {
            for (gold, object) in [(Answer::Yes, pos.as_str()), (Answer::No, neg.as_str())] {
                items.push(item(
                    format!("pope-{}-{}-{}-{j}", mode.name(), g.image_id, answer_tag(gold)),
                    &g.image_id,
                    pope_question(object),
                    gold,
                    QType::ObjectExistence,
                    Some(mode),
                    Provenance {
                        source: source.clone(),
                        fact: Fact::Object {
                            object: object.to_string(),
                        },
                        corrupted: None,
                    },
                ));
            }
        }
    }
    Ok((items, warnings))
}

fn answer_tag(a: Answer) -> &'static str {
    match a {
        Answer::Yes => "yes",
        Answer::No => "no",
    }
}

/// Attribute and predicate corpus frequencies.
pub fn vg_frequencies(graphs: &[SceneGraph]) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut attributes = BTreeMap::new();
    let mut predicates = BTreeMap::new();
    for g in graphs {
        for o in &g.objects {
            for a in &o.attributes {
                *attributes.entry(a.clone()).or_default() += 1;
            }
        }
        for r in &g.relations {
            *predicates.entry(r.predicate.clone()).or_default() += 1;
        }
    }
    (attributes, predicates)
}

/// Attribute and relation questions, one negative per positive, restricted to
/// attributes and predicates occurring at least `frequency_threshold` times.
pub fn gen_vg_qa(
    graphs: &[SceneGraph],
    frequency_threshold: usize,
    seed: u64,
) -> Result<(Vec<QAItem>, Vec<GenWarning>)> {
    if graphs.is_empty() {
        return Err(LabError::EmptyInput("scene graphs"));
    }
    let (attr_freq, pred_freq) = vg_frequencies(graphs);
    let frequent = |m: &BTreeMap<String, usize>| -> Vec<String> {
        m.iter()
            .filter(|(_, &c)| c >= frequency_threshold)
            .map(|(k, _)| k.clone())
            .collect()
    };
    let attributes = frequent(&attr_freq);
    let predicates = frequent(&pred_freq);
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for g in graphs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &g.image_id));
        let source = format!("scene_graph:{}", g.image_id);
        for o in &g.objects {
            let held: Vec<&String> = o.attributes.iter().filter(|a| attributes.contains(a)).collect();
            let Some(&truth) = held.choose(&mut rng) else {
                continue;
            };
            let same_name: BTreeSet<&String> = g
                .objects
                .iter()
                .filter(|p| p.name == o.name)
                .flat_map(|p| &p.attributes)
                .collect();
            let options: Vec<&String> = attributes.iter().filter(|a| !same_name.contains(a)).collect();
            let Some(&false_attr) = options.choose(&mut rng) else {
                warnings.push(GenWarning::new(
                    &g.image_id,
                    format!("object {} skipped: no absent frequent attribute", o.object_id),
                ));
                continue;
            };
            for (gold, attr) in [(Answer::Yes, truth), (Answer::No, false_attr)] {
                items.push(item(
                    format!("vg-attr-{}-{}-{}", g.image_id, o.object_id, answer_tag(gold)),
                    &g.image_id,
                    attribute_question(&o.name, attr),
                    gold,
                    QType::Attribute,
                    None,
                    Provenance {
                        source: format!("{source}/{}", o.object_id),
                        fact: Fact::Attribute {
                            object_id: o.object_id.clone(),
                            object: o.name.clone(),
                            attribute: attr.clone(),
                        },
                        corrupted: (gold == Answer::No).then(|| "attribute".to_string()),
                    },
                ));
            }
        }
        for (ri, r) in g.relations.iter().enumerate() {
            if !predicates.contains(&r.predicate) {
                continue;
            }
            let (Some(s), Some(o)) = (g.object(&r.subject_id), g.object(&r.object_id)) else {
                continue;
            };
            let held: BTreeSet<&String> = g
                .relations
                .iter()
                .filter(|q| {
                    g.object(&q.subject_id).is_some_and(|x| x.name == s.name)
                        && g.object(&q.object_id).is_some_and(|x| x.name == o.name)
                })
                .map(|q| &q.predicate)
                .collect();
            let options: Vec<&String> = predicates.iter().filter(|p| !held.contains(p)).collect();
            let Some(&false_pred) = options.choose(&mut rng) else {
                warnings.push(GenWarning::new(
                    &g.image_id,
                    format!("relation {ri} skipped: no absent frequent predicate"),
                ));
                continue;
            };
            for (gold, pred) in [(Answer::Yes, &r.predicate), (Answer::No, false_pred)] {
                items.push(item(
                    format!("vg-rel-{}-{ri}-{}", g.image_id, answer_tag(gold)),
                    &g.image_id,
                    relation_question(&s.name, pred, &o.name),
                    gold,
                    QType::Relation,
                    None,
                    Provenance {
                        source: format!("{source}/relation-{ri}"),
                        fact: Fact::Relation {
                            subject_id: s.object_id.clone(),
                            subject: s.name.clone(),
                            predicate: pred.clone(),
                            object_id: o.object_id.clone(),
                            object: o.name.clone(),
                        },
                        corrupted: (gold == Answer::No).then(|| "predicate".to_string()),
                    },
                ));
            }
        }
    }
    Ok((items, warnings))
}

/// Entity questions against each head entity's visual handle and relation
/// questions with filtered relation-or-tail corruption.
pub fn gen_kg_qa(
    triples: &[KgTriple],
    handles: &BTreeMap<String, String>,
    seed: u64,
) -> Result<(Vec<QAItem>, Vec<GenWarning>)> {
    if triples.is_empty() {
        return Err(LabError::EmptyInput("knowledge-graph triples"));
    }
    let known: BTreeSet<&KgTriple> = triples.iter().collect();
    let entities: BTreeSet<&String> = triples.iter().flat_map(|t| [&t.head, &t.tail]).collect();
    let relations: BTreeSet<&String> = triples.iter().map(|t| &t.relation).collect();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut asked_heads = BTreeSet::new();
    for (ti, t) in triples.iter().enumerate() {
        let key = format!("{}\t{}\t{}", t.head, t.relation, t.tail);
        let Some(handle) = handles.get(&t.head) else {
            warnings.push(GenWarning::new(&key, format!("skipped: no visual handle for {}", t.head)));
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key));
        let source = format!("triple:{ti}");

        if asked_heads.insert(t.head.clone()) {
            let others: Vec<&&String> = entities
                .iter()
                .filter(|e| ***e != t.head && handles.get(**e) != Some(handle))
                .collect();
            match others.choose(&mut rng) {
                Some(other) => {
                    for (gold, entity) in [(Answer::Yes, &t.head), (Answer::No, **other)] {
                        items.push(item(
                            format!("kg-ent-{ti}-{}", answer_tag(gold)),
                            handle,
                            entity_question(entity),
                            gold,
                            QType::KgEntity,
                            None,
                            Provenance {
                                source: format!("{source}/head"),
                                fact: Fact::Entity {
                                    entity: entity.clone(),
                                },
                                corrupted: (gold == Answer::No).then(|| "entity".to_string()),
                            },
                        ));
                    }
                }
                None => warnings.push(GenWarning::new(&key, "entity question skipped: single entity")),
            }
        }

        let tails: Vec<KgTriple> = entities
            .iter()
            .filter(|e| ***e != t.tail)
            .map(|e| KgTriple {
                tail: (*e).clone(),
                ..t.clone()
            })
            .filter(|c| !known.contains(c))
            .collect();
        let rels: Vec<KgTriple> = relations
            .iter()
            .filter(|r| ***r != t.relation)
            .map(|r| KgTriple {
                relation: (*r).clone(),
                ..t.clone()
            })
            .filter(|c| !known.contains(c))
            .collect();
        let prefer_tail = rng.random_bool(0.5);
        let pick = match (prefer_tail, tails.is_empty(), rels.is_empty()) {
            (_, true, true) => None,
            (true, false, _) | (false, false, true) => tails.choose(&mut rng).map(|c| (c, "tail")),
            _ => rels.choose(&mut rng).map(|c| (c, "relation")),
        };
        let Some((negative, field)) = pick else {
            warnings.push(GenWarning::new(&key, "relation question skipped: no valid corruption"));
            continue;
        };
        for (gold, fact) in [(Answer::Yes, t), (Answer::No, negative)] {
            items.push(item(
                format!("kg-rel-{ti}-{}", answer_tag(gold)),
                &t.head,
                triple_question(&fact.head, &fact.relation, &fact.tail),
                gold,
                QType::KgRelation,
                None,
                Provenance {
                    source: source.clone(),
                    fact: Fact::Triple {
                        head: fact.head.clone(),
                        relation: fact.relation.clone(),
                        tail: fact.tail.clone(),
                    },
                    corrupted: (gold == Answer::No).then(|| field.to_string()),
                },
            ));
        }
    }
    Ok((items, warnings))
}

pub fn save_qa_items(path: &Path, items: &[QAItem]) -> Result<()> {
    write_json_lines(path, items)
}

pub fn load_qa_items(path: &Path) -> Result<Vec<QAItem>> {
    read_json_lines(path)
}

pub fn save_warnings(path: &Path, warnings: &[GenWarning]) -> Result<()> {
    write_json_lines(path, warnings)
}
