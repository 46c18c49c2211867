#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hallulab_core::benchgen::{Answer, Fact, Provenance, QAItem, QType, QA_SCHEMA_VERSION};
use hallulab_core::datastore::{save_scene_graphs, KgTriple, SceneGraph, SceneObject, SceneRelation};
use hallulab_core::eval_harness::AnswerRecord;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const NAMES: [&str; 12] = [
    "dog", "cat", "person", "car", "tree", "bench", "cup", "apple", "umbrella", "kite", "horse", "bottle",
];
pub const ATTRIBUTES: [&str; 6] = ["red", "blue", "small", "large", "wooden", "striped"];
pub const PREDICATES: [&str; 4] = ["on", "near", "under", "holding"];

/// Scene graphs with repeated names, random attributes and relations.
pub fn random_corpus<R: Rng>(rng: &mut R, n_images: usize) -> Vec<SceneGraph> {
    (0..n_images)
        .map(|i| {
            let n_obj = rng.random_range(1..=6);
            let objects: Vec<SceneObject> = (0..n_obj)
                .map(|j| SceneObject {
                    object_id: format!("o{j}"),
                    name: NAMES.choose(rng).unwrap().to_string(),
                    attributes: ATTRIBUTES
                        .iter()
                        .filter(|_| rng.random_bool(0.3))
                        .map(|a| a.to_string())
                        .collect(),
                    bbox: [
                        rng.random_range(0.0..400.0),
                        rng.random_range(0.0..300.0),
                        rng.random_range(5.0..120.0),
                        rng.random_range(5.0..120.0),
                    ],
                })
                .collect();
            let mut relations = Vec::new();
            if n_obj >= 2 {
                for _ in 0..rng.random_range(0..=4) {
                    let s = rng.random_range(0..n_obj);
                    let o = (s + rng.random_range(1..n_obj)) % n_obj;
                    relations.push(SceneRelation {
                        subject_id: format!("o{s}"),
                        predicate: PREDICATES.choose(rng).unwrap().to_string(),
                        object_id: format!("o{o}"),
                    });
                }
            }
            SceneGraph {
                image_id: format!("img{i:03}"),
                objects,
                relations,
            }
        })
        .collect()
}

/// Distinct triples over a small vocabulary; handles are shared between
/// some entities.
pub fn random_triples<R: Rng>(rng: &mut R, n: usize) -> (Vec<KgTriple>, BTreeMap<String, String>) {
    let mut triples = Vec::new();
    while triples.len() < n {
        let t = KgTriple::new(
            &format!("e{}", rng.random_range(0..15)),
            &format!("r{}", rng.random_range(0..5)),
            &format!("e{}", rng.random_range(0..15)),
        )
        .unwrap();
        if !triples.contains(&t) {
            triples.push(t);
        }
    }
    let handles = (0..15)
        .filter(|i| i % 7 != 6)
        .map(|i| (format!("e{i}"), format!("h{}", i % 10)))
        .collect();
    (triples, handles)
}

fn fixture_item(id: String, gold: Answer) -> QAItem {
    QAItem {
        schema_version: QA_SCHEMA_VERSION,
        id,
        subject: "img".into(),
        question: "Is there a dog in the image?".into(),
        gold,
        qtype: QType::ObjectExistence,
        sampling_mode: None,
        provenance: Provenance {
            source: "fixture".into(),
            fact: Fact::Object { object: "dog".into() },
            corrupted: None,
        },
    }
}

/// QA items and transcripts with TP=40, FP=10, TN=35, FN=15.
pub fn confusion_fixture() -> (Vec<QAItem>, Vec<AnswerRecord>) {
    let mut items = Vec::new();
    let mut answers = Vec::new();
    let groups = [
        (Answer::Yes, "Yes, there is.", 40),
        (Answer::No, "Yes.", 10),
        (Answer::No, "No, I do not see one.", 35),
        (Answer::Yes, "no", 15),
    ];
    for (g, (gold, transcript, n)) in groups.into_iter().enumerate() {
        for i in 0..n {
            let id = format!("q{g}-{i:02}");
            items.push(fixture_item(id.clone(), gold));
            answers.push(AnswerRecord {
                item_id: id,
                transcript: transcript.into(),
            });
        }
    }
    (items, answers)
}

pub struct Fixtures {
    pub scenes: PathBuf,
    pub triples: PathBuf,
    pub handles: PathBuf,
    pub captions: PathBuf,
    pub qa: PathBuf,
    pub answers: PathBuf,
}

impl Fixtures {
    pub fn paths(&self) -> [&Path; 6] {
        [
            &self.scenes,
            &self.triples,
            &self.handles,
            &self.captions,
            &self.qa,
            &self.answers,
        ]
    }
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).unwrap() + "\n")
        .collect()
}

pub fn write_fixtures(dir: &Path) -> Fixtures {
    use rand::SeedableRng;
    fs::create_dir_all(dir).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let graphs = random_corpus(&mut rng, 40);
    let scenes = dir.join("scenes.jsonl");
    save_scene_graphs(&scenes, &graphs).unwrap();

    let (triples, handles) = random_triples(&mut rng, 30);
    let triples_path = dir.join("triples.tsv");
    let tsv: String = triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect();
    fs::write(&triples_path, tsv).unwrap();
    let handles_path = dir.join("handles.json");
    fs::write(&handles_path, serde_json::to_string_pretty(&handles).unwrap()).unwrap();

    let captions: Vec<serde_json::Value> = graphs
        .iter()
        .filter(|g| g.objects.len() >= 2)
        .map(|g| {
            let (a, b) = (&g.objects[0].name, &g.objects[1].name);
            serde_json::json!({
                "image_id": g.image_id,
                "caption": format!("A [{a}] is next to a [{b}] in a park."),
            })
        })
        .collect();
    let captions_path = dir.join("captions.jsonl");
    fs::write(&captions_path, jsonl(&captions)).unwrap();

    let (items, answers) = confusion_fixture();
    let qa = dir.join("qa.jsonl");
    fs::write(&qa, jsonl(&items)).unwrap();
    let answers_path = dir.join("answers.jsonl");
    fs::write(&answers_path, jsonl(&answers)).unwrap();

    Fixtures {
        scenes,
        triples: triples_path,
        handles: handles_path,
        captions: captions_path,
        qa,
        answers: answers_path,
    }
}

pub fn hallulab<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallulab"))
        .args(args)
        .output()
        .expect("spawn hallulab")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Relative path to file contents for every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}
