//! Negative objects, template caption perturbations and region instructions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{tokenize, SceneGraph};
use crate::error::{LabError, Result};

/// Fixed instruction paired with every region caption.
pub const REGION_PROMPT: &str = "Please caption the content in the bounding box";

/// Candidates kept per sampling category when building insertion negatives.
pub const NEGATIVE_POOL_SIZE: usize = 3;

/// FNV-1a over the master seed and an item id.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(id.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Something a batch generator had to leave out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenWarning {
    pub subject: String,
    pub reason: String,
}

impl GenWarning {
    pub fn new(subject: &str, reason: impl Into<String>) -> Self {
        Self {
            subject: subject.to_string(),
            reason: reason.into(),
        }
    }
}

/// Per-image presence counts of objects and unordered object pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceTable {
    pub object_counts: BTreeMap<String, usize>,
    /// Keys are stored with the lexicographically smaller name first.
    pub pair_counts: BTreeMap<(String, String), usize>,
    pub corpus_size: usize,
}

impl CooccurrenceTable {
    pub fn count(&self, name: &str) -> usize {
        self.object_counts.get(name).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, a: &str, b: &str) -> usize {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.pair_counts
            .get(&(key.0.to_string(), key.1.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

/// Counts each object once per image, and each unordered pair of distinct
/// objects once per image.
pub fn build_cooccurrence<I, O, S>(images: I) -> CooccurrenceTable
where
    I: IntoIterator<Item = O>,
    O: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut table = CooccurrenceTable::default();
    for objects in images {
        table.corpus_size += 1;
        let present: BTreeSet<String> = objects.into_iter().map(|s| s.as_ref().to_string()).collect();
        for name in &present {
            *table.object_counts.entry(name.clone()).or_default() += 1;
        }
        let names: Vec<&String> = present.iter().collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                *table.pair_counts.entry(((*a).clone(), (*b).clone())).or_default() += 1;
            }
        }
    }
    table
}

pub fn cooccurrence_from_scene_graphs(graphs: &[SceneGraph]) -> CooccurrenceTable {
    build_cooccurrence(graphs.iter().map(|g| g.object_names()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    Popular,
    Adversarial,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 3] = [Self::Random, Self::Popular, Self::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Popular => "popular",
            Self::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::invalid(format!("unknown sampling mode {s:?}")))
    }
}

/// How adversarial ranking combines pair counts over the present objects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Sum,
    Max,
}

pub fn sample_negative_objects(
    table: &CooccurrenceTable,
    present: &BTreeSet<String>,
    mode: SamplingMode,
    k: usize,
    seed: u64,
) -> Result<Vec<String>> {
    sample_negative_objects_with(table, present, mode, k, seed, Aggregate::Sum)
}

pub fn sample_negative_objects_with(
    table: &CooccurrenceTable,
    present: &BTreeSet<String>,
    mode: SamplingMode,
    k: usize,
    seed: u64,
    aggregate: Aggregate,
) -> Result<Vec<String>> {
    let mut candidates: Vec<&String> = table
        .object_counts
        .keys()
        .filter(|name| !present.contains(*name))
        .collect();
    if candidates.len() < k {
        return Err(LabError::InsufficientCandidates {
            needed: k,
            available: candidates.len(),
        });
    }
    match mode {
        SamplingMode::Random => {
            candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        SamplingMode::Popular => {
            candidates.sort_by(|a, b| table.count(b).cmp(&table.count(a)).then(a.cmp(b)));
        }
        SamplingMode::Adversarial => {
            let score = |c: &str| {
                let counts = present.iter().map(|p| table.pair_count(p, c));
                match aggregate {
                    Aggregate::Sum => counts.sum(),
                    Aggregate::Max => counts.max().unwrap_or(0),
                }
            };
            let mut scored: Vec<(usize, &String)> = candidates.iter().map(|c| (score(c), *c)).collect();
            scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
            candidates = scored.into_iter().map(|(_, c)| c).collect();
        }
    }
    Ok(candidates.into_iter().take(k).cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    InsertRandom,
    InsertPopular,
    InsertAdversarial,
    Remove,
}

impl NegativeStrategy {
    pub fn insertion(mode: SamplingMode) -> Self {
        match mode {
            SamplingMode::Random => Self::InsertRandom,
            SamplingMode::Popular => Self::InsertPopular,
            SamplingMode::Adversarial => Self::InsertAdversarial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeCaption {
    pub source_image_id: String,
    pub text: String,
    pub strategy: NegativeStrategy,
    /// Inserted or removed object names.
    pub edits: Vec<String>,
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Whether the object's words occur contiguously in the caption.
pub fn mentions(caption: &str, object: &str) -> bool {
    let words = tokenize(caption);
    let needle = tokenize(object);
    !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn perturb_caption_insert(
    source_image_id: &str,
    caption: &str,
    objects: &[String],
    strategy: NegativeStrategy,
) -> Result<NegativeCaption> {
    if strategy == NegativeStrategy::Remove {
        return Err(LabError::invalid("insertion cannot use the remove strategy"));
    }
    let caption = caption.trim_end();
    if caption.is_empty() {
        return Err(LabError::EmptyInput("caption"));
    }
    if !(1..=3).contains(&objects.len()) {
        return Err(LabError::invalid(format!(
            "insert count must be 1 to 3, got {}",
            objects.len()
        )));
    }
    let distinct: BTreeSet<&String> = objects.iter().collect();
    if distinct.len() != objects.len() {
        return Err(LabError::invalid("inserted objects must be distinct"));
    }
    if let Some(o) = objects.iter().find(|o| mentions(caption, o)) {
        return Err(LabError::invalid(format!("object {o:?} already appears in the caption")));
    }
    let phrases: Vec<String> = objects.iter().map(|o| format!("{} {o}", article(o))).collect();
    let clause = match phrases.as_slice() {
        [a] => format!(", along with {a}"),
        [a, b] => format!(", along with {a}, {b}"),
        [a, b, c] => format!(", along with {a}, {b}, and {c}"),
        _ => unreachable!(),
    };
    let text = match caption.strip_suffix('.') {
        Some(body) => format!("{body}{clause}."),
        None => format!("{caption}{clause}"),
    };
    Ok(NegativeCaption {
        source_image_id: source_image_id.to_string(),
        text,
        strategy,
        edits: objects.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    text: String,
    span: Option<usize>,
}

impl Token {
    fn is_punct(&self) -> bool {
        self.text.chars().all(|c| c.is_ascii_punctuation())
    }
}

/// A caption whose object mentions are marked with brackets, as in
/// `"A [dog] and a [red cat]."`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedCaption {
    tokens: Vec<Token>,
    spans: Vec<String>,
}

impl AnnotatedCaption {
    pub fn parse(marked: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        let mut current: Option<usize> = None;
        let mut word = String::new();
        let flush = |word: &mut String, tokens: &mut Vec<Token>, span: Option<usize>| {
            if !word.is_empty() {
                tokens.push(Token {
                    text: std::mem::take(word),
                    span,
                });
            }
        };
        for c in marked.chars() {
            match c {
                '[' => {
                    if current.is_some() {
                        return Err(LabError::invalid(format!("nested '[' in caption {marked:?}")));
                    }
                    flush(&mut word, &mut tokens, current);
                    spans.push(String::new());
                    current = Some(spans.len() - 1);
                }
                ']' => {
                    let Some(id) = current.take() else {
                        return Err(LabError::invalid(format!("unmatched ']' in caption {marked:?}")));
                    };
                    flush(&mut word, &mut tokens, Some(id));
                    let name: Vec<&str> = tokens
                        .iter()
                        .filter(|t| t.span == Some(id))
                        .map(|t| t.text.as_str())
                        .collect();
                    if name.is_empty() {
                        return Err(LabError::invalid(format!("empty object span in caption {marked:?}")));
                    }
                    spans[id] = name.join(" ");
                }
                c if c.is_whitespace() => flush(&mut word, &mut tokens, current),
                c if c.is_ascii_punctuation() && c != '-' && c != '\'' => {
                    flush(&mut word, &mut tokens, current);
                    tokens.push(Token {
                        text: c.to_string(),
                        span: None,
                    });
                }
                c => word.push(c),
            }
        }
        if current.is_some() {
            return Err(LabError::invalid(format!("unclosed '[' in caption {marked:?}")));
        }
        flush(&mut word, &mut tokens, None);
        if tokens.is_empty() {
            return Err(LabError::EmptyInput("caption"));
        }
        Ok(Self { tokens, spans })
    }

    /// Annotated object names in caption order.
    pub fn objects(&self) -> &[String] {
        &self.spans
    }

    /// The caption without markup.
    pub fn text(&self) -> String {
        render(&self.tokens)
    }

    /// Drops the given spans with their articles and one adjacent conjunction.
    pub fn without(&self, spans: &[usize]) -> String {
        let starts_upper = self.tokens[0].text.chars().next().is_some_and(char::is_uppercase);
        let mut tokens = self.tokens.clone();
        for &id in spans {
            let Some(start) = tokens.iter().position(|t| t.span == Some(id)) else {
                continue;
            };
            let end = start + tokens[start..].iter().take_while(|t| t.span == Some(id)).count();
            let mut lo = start;
            if lo > 0 && is_article(&tokens[lo - 1].text) {
                lo -= 1;
            }
            let mut hi = end;
            if lo > 0 && is_joiner(&tokens[lo - 1].text) {
                lo -= 1;
            } else if hi < tokens.len() && is_joiner(&tokens[hi].text) {
                hi += 1;
            }
            tokens.drain(lo..hi);
        }
        let mut tokens = tidy(tokens);
        if starts_upper {
            if let Some(first) = tokens.first_mut() {
                let mut chars = first.text.chars();
                if let Some(c) = chars.next() {
                    first.text = c.to_uppercase().chain(chars).collect();
                }
            }
        }
        render(&tokens)
    }
}

fn is_article(word: &str) -> bool {
    matches!(word.to_lowercase().as_str(), "a" | "an" | "the")
}

fn is_joiner(word: &str) -> bool {
    matches!(word.to_lowercase().as_str(), "and" | "or" | "with" | ",")
}

/// Removes leading punctuation other than the sentence terminator, repeated
/// punctuation and commas before a terminator.
fn tidy(tokens: Vec<Token>) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.is_punct() {
            match out.last() {
                None if t.text == "," || t.text == ";" => continue,
                Some(prev) if prev.is_punct() => {
                    if prev.text == "," || prev.text == ";" {
                        out.pop();
                    } else {
                        continue;
                    }
                }
                _ => {}
            }
        }
        out.push(t);
    }
    out
}

fn render(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && !t.is_punct() {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

pub fn perturb_caption_remove(
    source_image_id: &str,
    caption: &AnnotatedCaption,
    n_remove: usize,
    seed: u64,
) -> Result<NegativeCaption> {
    if !(1..=2).contains(&n_remove) {
        return Err(LabError::invalid(format!("remove count must be 1 or 2, got {n_remove}")));
    }
    if caption.spans.len() < n_remove {
        return Err(LabError::InsufficientCandidates {
            needed: n_remove,
            available: caption.spans.len(),
        });
    }
    let mut order: Vec<usize> = (0..caption.spans.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..n_remove].to_vec();
    chosen.sort_unstable();
    Ok(NegativeCaption {
        source_image_id: source_image_id.to_string(),
        text: caption.without(&chosen),
        strategy: NegativeStrategy::Remove,
        edits: chosen.iter().map(|&i| caption.spans[i].clone()).collect(),
    })
}

/// Input record for negative-caption generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    /// Caption with `[object]` markup.
    pub caption: String,
}

/// One insertion negative per sampling category plus one removal negative
/// for every caption. Insert counts (1 to 3) and removal counts (1 or 2) are
/// drawn from a per-image seed.
pub fn gen_negative_captions(
    captions: &[CaptionRecord],
    graphs: &[SceneGraph],
    table: &CooccurrenceTable,
    seed: u64,
) -> Result<(Vec<NegativeCaption>, Vec<GenWarning>)> {
    let by_id: BTreeMap<&str, &SceneGraph> = graphs.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for record in captions {
        let annotated = AnnotatedCaption::parse(&record.caption)?;
        let text = annotated.text();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &record.image_id));
        let mut present: BTreeSet<String> = by_id
            .get(record.image_id.as_str())
            .map(|g| g.object_names())
            .unwrap_or_default();
        present.extend(annotated.objects().iter().cloned());
        present.extend(table.object_counts.keys().filter(|o| mentions(&text, o)).cloned());
        for mode in SamplingMode::ALL {
            let count = rng.random_range(1..=NEGATIVE_POOL_SIZE);
            let pool_seed = rng.random();
            match sample_negative_objects(table, &present, mode, NEGATIVE_POOL_SIZE, pool_seed) {
                Ok(pool) => out.push(perturb_caption_insert(
                    &record.image_id,
                    &text,
                    &pool[..count],
                    NegativeStrategy::insertion(mode),
                )?),
                Err(e) => warnings.push(GenWarning::new(
                    &record.image_id,
                    format!("{} insertion skipped: {e}", mode.name()),
                )),
            }
        }
        let n_remove = rng.random_range(1..=2).min(annotated.objects().len());
        let remove_seed = rng.random();
        if n_remove == 0 {
            warnings.push(GenWarning::new(&record.image_id, "removal skipped: no annotated objects"));
        } else {
            out.push(perturb_caption_remove(&record.image_id, &annotated, n_remove, remove_seed)?);
        }
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionInstruction {
    pub image_id: String,
    pub object_ids: [String; 2],
    pub boxes: [[f64; 4]; 2],
    pub prompt: String,
    pub response: String,
}

pub fn gen_region_instruction(graph: &SceneGraph, seed: u64) -> Result<RegionInstruction> {
    if graph.objects.len() < 2 {
        return Err(LabError::InsufficientCandidates {
            needed: 2,
            available: graph.objects.len(),
        });
    }
    let mut picks: Vec<usize> = rand::seq::index::sample(
        &mut ChaCha8Rng::seed_from_u64(seed),
        graph.objects.len(),
        2,
    )
    .into_vec();
    picks.sort_unstable();
    let (a, b) = (&graph.objects[picks[0]], &graph.objects[picks[1]]);
    let fragment = |o: &crate::datastore::SceneObject| {
        let mut words = vec!["the".to_string()];
        words.extend(o.attributes.iter().cloned());
        words.push(o.name.clone());
        words.join(" ")
    };
    let mut response = format!("{} and {}", fragment(a), fragment(b));
    let link = graph.relations.iter().find(|r| {
        (r.subject_id == a.object_id && r.object_id == b.object_id)
            || (r.subject_id == b.object_id && r.object_id == a.object_id)
    });
    if let Some(r) = link {
        let (s, o) = if r.subject_id == a.object_id { (a, b) } else { (b, a) };
        response.push_str(&format!("; the {} {} the {}", s.name, r.predicate, o.name));
    }
    Ok(RegionInstruction {
        image_id: graph.image_id.clone(),
        object_ids: [a.object_id.clone(), b.object_id.clone()],
        boxes: [a.bbox, b.bbox],
        prompt: REGION_PROMPT.to_string(),
        response,
    })
}

pub fn gen_region_instructions(graphs: &[SceneGraph], seed: u64) -> (Vec<RegionInstruction>, Vec<GenWarning>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for g in graphs {
        match gen_region_instruction(g, derive_seed(seed, &g.image_id)) {
            Ok(r) => out.push(r),
            Err(e) => warnings.push(GenWarning::new(&g.image_id, format!("skipped: {e}"))),
        }
    }
    (out, warnings)
}
