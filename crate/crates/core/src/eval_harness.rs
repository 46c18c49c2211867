//! Answer parsing, forced-choice template matching and accuracy/F1 scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchgen::{Answer, QAItem, QType};
use crate::datagen::SamplingMode;
use crate::datastore::{read_json_lines, write_json_lines};
use crate::error::{LabError, Result};
use crate::numerics::cosine_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    Yes,
    No,
    Unparseable,
}

impl From<Answer> for ParsedAnswer {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Yes => Self::Yes,
            Answer::No => Self::No,
        }
    }
}

/// First standalone `yes`/`no` word, case-insensitive.
pub fn parse_yes_no(transcript: &str) -> ParsedAnswer {
    transcript
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| {
            if w.eq_ignore_ascii_case("yes") {
                Some(ParsedAnswer::Yes)
            } else if w.eq_ignore_ascii_case("no") {
                Some(ParsedAnswer::No)
            } else {
                None
            }
        })
        .unwrap_or(ParsedAnswer::Unparseable)
}

pub fn match_template(object: &str) -> String {
    let article = match object.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    };
    format!("There is {article} {object} in the image")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub answer: Answer,
    pub tie: bool,
}

/// Answers `yes` for `candidate` when its filled template is strictly closer
/// to the image than the rival object's template.
pub fn template_match_answer<F>(image: &[f64], candidate: &str, rival: &str, embed: F) -> Result<MatchOutcome>
where
    F: Fn(&str) -> Option<Vec<f64>>,
{
    let score = |object: &str| -> Result<f64> {
        let sentence = match_template(object);
        let text = embed(&sentence)
            .ok_or_else(|| LabError::invalid(format!("no embedding for {sentence:?}")))?;
        cosine_similarity(image, &text)
    };
    let (mine, theirs) = (score(candidate)?, score(rival)?);
    Ok(MatchOutcome {
        answer: if mine > theirs { Answer::Yes } else { Answer::No },
        tie: mine == theirs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub transcript: String,
}

pub fn load_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    read_json_lines(path)
}

pub fn save_answers(path: &Path, answers: &[AnswerRecord]) -> Result<()> {
    write_json_lines(path, answers)
}

/// Confusion counts with `yes` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_unparseable: usize,
}

impl Counts {
    pub fn add(&mut self, gold: Answer, answer: ParsedAnswer) {
        match (gold, answer) {
            (_, ParsedAnswer::Unparseable) => self.n_unparseable += 1,
            (Answer::Yes, ParsedAnswer::Yes) => self.tp += 1,
            (Answer::No, ParsedAnswer::Yes) => self.fp += 1,
            (Answer::No, ParsedAnswer::No) => self.tn += 1,
            (Answer::Yes, ParsedAnswer::No) => self.fn_ += 1,
        }
    }

    pub fn n_items(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.n_unparseable
    }

    /// Correct answers over all items; unparseable answers count as wrong.
    pub fn accuracy(&self) -> f64 {
        match self.n_items() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        match 2 * self.tp + self.fp + self.fn_ {
            0 => 0.0,
            d => (2 * self.tp) as f64 / d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub split: String,
    pub n_items: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub accuracy: f64,
    pub f1: f64,
}

impl EvalCell {
    fn new(split: String, counts: Counts) -> Self {
        Self {
            split,
            n_items: counts.n_items(),
            counts,
            accuracy: counts.accuracy(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalCell,
    pub by_qtype: Vec<EvalCell>,
    pub by_sampling_mode: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cells(&self) -> impl Iterator<Item = &EvalCell> {
        std::iter::once(&self.overall).chain(&self.by_qtype).chain(&self.by_sampling_mode)
    }

    /// Fixed-order table with columns split, n, acc, f1.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<28} {:>7} {:>7} {:>7}\n", "split", "n", "acc", "f1");
        for c in self.cells() {
            let _ = writeln!(out, "{:<28} {:>7} {:>7.4} {:>7.4}", c.split, c.n_items, c.accuracy, c.f1);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Scores parsed answers keyed by item id.
pub fn score(items: &[QAItem], answers: &BTreeMap<String, ParsedAnswer>) -> Result<EvalReport> {
    let missing: Vec<String> = items
        .iter()
        .filter(|i| !answers.contains_key(&i.id))
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(LabError::MissingAnswers(missing));
    }
    let known: BTreeSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let unknown: Vec<&str> = answers.keys().map(String::as_str).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(LabError::invalid(format!("answers for unknown items: {}", unknown.join(", "))));
    }
    let mut overall = Counts::default();
    let mut by_qtype: BTreeMap<QType, Counts> = BTreeMap::new();
    let mut by_mode: BTreeMap<SamplingMode, Counts> = BTreeMap::new();
    for item in items {
        let answer = answers[&item.id];
        overall.add(item.gold, answer);
        by_qtype.entry(item.qtype).or_default().add(item.gold, answer);
        if let Some(mode) = item.sampling_mode {
            by_mode.entry(mode).or_default().add(item.gold, answer);
        }
    }
    Ok(EvalReport {
        overall: EvalCell::new("overall".to_string(), overall),
        by_qtype: by_qtype
            .into_iter()
            .map(|(q, c)| EvalCell::new(format!("qtype:{}", q.name()), c))
            .collect(),
        by_sampling_mode: by_mode
            .into_iter()
            .map(|(m, c)| EvalCell::new(format!("mode:{}", m.name()), c))
            .collect(),
    })
}

/// Parses transcripts and scores them; duplicate item ids are rejected.
pub fn score_transcripts(items: &[QAItem], answers: &[AnswerRecord]) -> Result<EvalReport> {
    let mut parsed = BTreeMap::new();
    for a in answers {
        if parsed.insert(a.item_id.clone(), parse_yes_no(&a.transcript)).is_some() {
            return Err(LabError::invalid(format!("duplicate answer for item {}", a.item_id)));
        }
    }
    score(items, &parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{Fact, Provenance, QA_SCHEMA_VERSION};

    fn qa(id: usize, gold: Answer) -> QAItem {
        QAItem {
            schema_version: QA_SCHEMA_VERSION,
            id: format!("q{id}"),
            subject: "img".into(),
            question: "Is there a dog in the image?".into(),
            gold,
            qtype: QType::ObjectExistence,
            sampling_mode: Some(SamplingMode::Random),
            provenance: Provenance {
                source: "test".into(),
                fact: Fact::Object { object: "dog".into() },
                corrupted: None,
            },
        }
    }

    fn fixture() -> (Vec<QAItem>, BTreeMap<String, ParsedAnswer>) {
        let mut items = Vec::new();
        let mut answers = BTreeMap::new();
        let plan = [
            (40, Answer::Yes, ParsedAnswer::Yes),
            (10, Answer::No, ParsedAnswer::Yes),
            (35, Answer::No, ParsedAnswer::No),
            (15, Answer::Yes, ParsedAnswer::No),
        ];
        for (count, gold, answer) in plan {
            for _ in 0..count {
                let i = qa(items.len(), gold);
                answers.insert(i.id.clone(), answer);
                items.push(i);
            }
        }
        (items, answers)
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_yes_no("Yes, the dog is red."), ParsedAnswer::Yes);
        assert_eq!(parse_yes_no("  NO"), ParsedAnswer::No);
        assert_eq!(parse_yes_no("The image shows a cat."), ParsedAnswer::Unparseable);
        assert_eq!(parse_yes_no("I think... no."), ParsedAnswer::No);
        assert_eq!(parse_yes_no("nobody knows"), ParsedAnswer::Unparseable);
        assert_eq!(parse_yes_no(""), ParsedAnswer::Unparseable);
    }

    #[test]
    fn confusion_fixture() {
        let (items, answers) = fixture();
        let r = score(&items, &answers).unwrap();
        assert_eq!(r.overall.counts, Counts { tp: 40, fp: 10, tn: 35, fn_: 15, n_unparseable: 0 });
        assert_eq!(format!("{:.4}", r.overall.accuracy), "0.7500");
        assert!((r.overall.f1 - 80.0 / 105.0).abs() < 1e-15);
        assert!(r.summary_table().contains("0.7500  0.7619"));
    }

    #[test]
    fn perfect_and_unparseable() {
        let items: Vec<QAItem> = (0..6).map(|i| qa(i, if i % 2 == 0 { Answer::Yes } else { Answer::No })).collect();
        let perfect = items.iter().map(|i| (i.id.clone(), i.gold.into())).collect();
        let r = score(&items, &perfect).unwrap();
        assert_eq!((r.overall.accuracy, r.overall.f1), (1.0, 1.0));
        let none = items.iter().map(|i| (i.id.clone(), ParsedAnswer::Unparseable)).collect();
        let r = score(&items, &none).unwrap();
        assert_eq!(r.overall.accuracy, 0.0);
        assert_eq!(r.overall.counts.n_unparseable, 6);
    }

    #[test]
    fn missing_answers_are_listed() {
        let items = vec![qa(0, Answer::Yes), qa(1, Answer::No)];
        let answers = BTreeMap::from([("q0".to_string(), ParsedAnswer::Yes)]);
        match score(&items, &answers) {
            Err(LabError::MissingAnswers(ids)) => assert_eq!(ids, vec!["q1"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_forced_choice() {
        let embed = |s: &str| -> Option<Vec<f64>> {
            Some(if s.contains("dog") { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        };
        assert_eq!(match_template("owl"), "There is an owl in the image");
        let yes = template_match_answer(&[1.0, 0.1], "dog", "cat", embed).unwrap();
        assert_eq!(yes, MatchOutcome { answer: Answer::Yes, tie: false });
        let no = template_match_answer(&[1.0, 0.1], "cat", "dog", embed).unwrap();
        assert_eq!(no.answer, Answer::No);
        let tie = template_match_answer(&[1.0, 1.0], "dog", "cat", embed).unwrap();
        assert_eq!(tie, MatchOutcome { answer: Answer::No, tie: true });
        assert!(template_match_answer(&[1.0, 0.0], "dog", "cat", |_| None).is_err());
    }
}
