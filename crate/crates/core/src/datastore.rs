//! Embedding datasets, structured annotations and the planted synthetic
//! generator.
//!
//! On disk an embedding dataset is a pair of files sharing a stem:
//! `<stem>.manifest` (JSON metadata) and `<stem>.f32bin` (little-endian
//! `f32`, row-major, no header).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{random_orthogonal, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
    pub modalities: Vec<Modality>,
    /// image id -> caption (text) id
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<BTreeMap<String, String>>,
}

impl DatasetManifest {
    /// Manifest describing `records` as-is, with an optional pairing.
    pub fn describe(
        dim: usize,
        records: &[EmbeddingRecord],
        pairing: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let manifest = Self {
            dim,
            count: records.len(),
            ids: records.iter().map(|r| r.id.clone()).collect(),
            modalities: records.iter().map(|r| r.modality).collect(),
            pairing,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.count {
            return Err(LabError::InvalidManifest(format!(
                "count is {} but {} ids are listed",
                self.count,
                self.ids.len()
            )));
        }
        if self.modalities.len() != self.count {
            return Err(LabError::InvalidManifest(format!(
                "count is {} but {} modalities are listed",
                self.count,
                self.modalities.len()
            )));
        }
        let unique: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
        if unique.len() != self.ids.len() {
            return Err(LabError::InvalidManifest("duplicate ids".into()));
        }
        if let Some(pairing) = &self.pairing {
            for (image, text) in pairing {
                for id in [image, text] {
                    if !unique.contains(id.as_str()) {
                        return Err(LabError::InvalidManifest(format!(
                            "pairing references unknown id {id}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest")
}

pub fn binary_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".f32bin")
}

pub(crate) fn write_f32_le(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_f32_le(path: &Path, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let expected = expected_values * 4;
    if bytes.len() != expected {
        return Err(LabError::TruncatedBinary {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `<stem>.manifest` and `<stem>.f32bin`. Records must be in manifest order.
pub fn save_embeddings(
    stem: &Path,
    manifest: &DatasetManifest,
    records: &[EmbeddingRecord],
) -> Result<()> {
    manifest.validate()?;
    if records.len() != manifest.count {
        return Err(LabError::InvalidManifest(format!(
            "manifest count {} but {} records given",
            manifest.count,
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.id != manifest.ids[i] || r.modality != manifest.modalities[i] {
            return Err(LabError::InvalidManifest(format!(
                "record {i} ({}) does not match manifest entry {}",
                r.id, manifest.ids[i]
            )));
        }
        if r.vector.len() != manifest.dim {
            return Err(LabError::DimensionMismatch {
                expected: manifest.dim,
                actual: r.vector.len(),
            });
        }
    }
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(manifest_path(stem), serde_json::to_string_pretty(manifest)? + "\n")?;
    write_f32_le(
        &binary_path(stem),
        records.iter().flat_map(|r| r.vector.iter().copied()),
    )
}

pub fn load_embeddings(stem: &Path) -> Result<(DatasetManifest, Vec<EmbeddingRecord>)> {
    let text = fs::read_to_string(manifest_path(stem))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| LabError::InvalidManifest(e.to_string()))?;
    manifest.validate()?;
    let values = read_f32_le(&binary_path(stem), manifest.dim * manifest.count)?;
    let records = manifest
        .ids
        .iter()
        .zip(&manifest.modalities)
        .enumerate()
        .map(|(i, (id, &modality))| EmbeddingRecord {
            id: id.clone(),
            modality,
            vector: values[i * manifest.dim..(i + 1) * manifest.dim].to_vec(),
        })
        .collect();
    Ok((manifest, records))
}

/// Image and caption matrices of a paired dataset, rows aligned by pairing
/// (ordered by image id position in the manifest).
#[derive(Debug, Clone)]
pub struct PairedMatrices {
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub images: DenseMatrix,
    pub texts: DenseMatrix,
}

pub fn paired_matrices(
    manifest: &DatasetManifest,
    records: &[EmbeddingRecord],
) -> Result<PairedMatrices> {
    let pairing = manifest
        .pairing
        .as_ref()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| LabError::invalid("dataset has no image/text pairing"))?;
    let by_id: BTreeMap<&str, &EmbeddingRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut image_ids = Vec::new();
    let mut text_ids = Vec::new();
    let mut image_rows = Vec::new();
    let mut text_rows = Vec::new();
    for id in &manifest.ids {
        let Some(text_id) = pairing.get(id) else {
            continue;
        };
        let image = by_id[id.as_str()];
        let text = by_id
            .get(text_id.as_str())
            .ok_or_else(|| LabError::invalid(format!("missing caption record {text_id}")))?;
        image_ids.push(id.clone());
        text_ids.push(text_id.clone());
        image_rows.push(image.vector.clone());
        text_rows.push(text.vector.clone());
    }
    Ok(PairedMatrices {
        image_ids,
        text_ids,
        images: DenseMatrix::from_rows(manifest.dim, &image_rows)?,
        texts: DenseMatrix::from_rows(manifest.dim, &text_rows)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    /// (x, y, w, h) in pixels
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<SceneRelation>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.objects.iter().map(|o| o.object_id.as_str()).collect();
        if ids.len() != self.objects.len() {
            return Err(LabError::invalid(format!(
                "scene graph {}: duplicate object ids",
                self.image_id
            )));
        }
        for o in &self.objects {
            let [x, y, w, h] = o.bbox;
            if !(x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0) {
                return Err(LabError::invalid(format!(
                    "scene graph {}: object {} has invalid bbox {:?}",
                    self.image_id, o.object_id, o.bbox
                )));
            }
        }
        for r in &self.relations {
            for end in [&r.subject_id, &r.object_id] {
                if !ids.contains(end.as_str()) {
                    return Err(LabError::invalid(format!(
                        "scene graph {}: relation references unknown object {end}",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, object_id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    /// Distinct object names present in the image.
    pub fn object_names(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.name.clone()).collect()
    }
}

/// One scene graph per line.
pub fn load_scene_graphs(path: &Path) -> Result<Vec<SceneGraph>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut graphs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let graph: SceneGraph = serde_json::from_str(&line).map_err(|e| {
            LabError::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        graph.validate()?;
        graphs.push(graph);
    }
    Ok(graphs)
}

pub fn save_scene_graphs(path: &Path, graphs: &[SceneGraph]) -> Result<()> {
    write_json_lines(path, graphs)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KgTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl KgTriple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err(LabError::invalid("knowledge-graph triple fields must be nonempty"));
        }
        Ok(Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        })
    }
}

/// `head<TAB>relation<TAB>tail`, one per line.
pub fn parse_kg_triples(text: &str) -> Result<Vec<KgTriple>> {
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(LabError::invalid(format!(
                "line {}: expected 3 tab-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        triples.push(KgTriple::new(fields[0], fields[1], fields[2])?);
    }
    Ok(triples)
}

pub fn load_kg_triples(path: &Path) -> Result<Vec<KgTriple>> {
    parse_kg_triples(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    PreProjector,
    PostProjector,
}

/// Features with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub stage: StageTag,
}

impl LabeledFeatureSet {
    pub fn new(
        features: DenseMatrix,
        labels: Vec<usize>,
        n_classes: usize,
        stage: StageTag,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(LabError::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(LabError::LabelOutOfRange { label, n_classes });
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            stage,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            stage: self.stage,
        }
    }

    pub fn with_features(&self, features: DenseMatrix, stage: StageTag) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.n_classes, stage)
    }
}

/// Sidecar label file written next to an embedding dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub n_classes: usize,
    /// record id -> class
    pub labels: BTreeMap<String, usize>,
}

impl LabelFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn labels_for(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| LabError::invalid(format!("no label for {id}")))
            })
            .collect()
    }
}

/// Word-level embedding lookup; text embeddings are the mean of the covered
/// token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl TokenTable {
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for v in vectors.values() {
            if v.len() != dim {
                return Err(LabError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
        }
        Ok(Self { dim, vectors })
    }

    /// Uses record ids as tokens.
    pub fn from_records(dim: usize, records: &[EmbeddingRecord]) -> Result<Self> {
        Self::new(
            dim,
            records
                .iter()
                .map(|r| (r.id.clone(), r.vector.clone()))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Mean of the covered tokens' vectors, `None` when no token is covered.
    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut covered = 0usize;
        for t in tokens {
            if let Some(v) = self.vectors.get(t.as_ref()) {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                covered += 1;
            }
        }
        if covered == 0 {
            return None;
        }
        acc.iter_mut().for_each(|a| *a /= covered as f64);
        Some(acc)
    }

    pub fn embed_text(&self, text: &str) -> Option<Vec<f64>> {
        self.embed_tokens(&tokenize(text))
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '_' && c != '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub n_classes: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_pairs: 512,
            dim: 32,
            noise_sigma: 0.1,
            n_classes: 4,
        }
    }
}

/// Scale of the class anchor relative to unit-variance per-pair content.
pub const PLANTED_ANCHOR_SCALE: f64 = 3.0;

/// Synthetic paired image/text embeddings with a known alignment.
#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub config: PlantedConfig,
    pub manifest: DatasetManifest,
    pub images: Vec<EmbeddingRecord>,
    pub texts: Vec<EmbeddingRecord>,
    /// Noise-free shared latent, one row per pair; class lives in the first
    /// `n_classes` coordinates.
    pub latent: LabeledFeatureSet,
    /// Orthogonal map applied to the image side only.
    pub rotation: DenseMatrix,
}

impl PlantedDataset {
    /// Images followed by texts, in manifest order.
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        self.images.iter().chain(&self.texts).cloned().collect()
    }

    pub fn image_matrix(&self) -> DenseMatrix {
        rows_of(self.config.dim, &self.images)
    }

    pub fn text_matrix(&self) -> DenseMatrix {
        rows_of(self.config.dim, &self.texts)
    }

    pub fn labels(&self) -> &[usize] {
        &self.latent.labels
    }

    /// Raw image embeddings labeled by class, tagged pre-projector.
    pub fn image_features(&self) -> LabeledFeatureSet {
        LabeledFeatureSet {
            features: self.image_matrix(),
            labels: self.latent.labels.clone(),
            n_classes: self.config.n_classes,
            stage: StageTag::PreProjector,
        }
    }

    pub fn label_file(&self) -> LabelFile {
        LabelFile {
            n_classes: self.config.n_classes,
            labels: self
                .images
                .iter()
                .zip(&self.latent.labels)
                .map(|(r, &l)| (r.id.clone(), l))
                .collect(),
        }
    }
}

fn rows_of(dim: usize, records: &[EmbeddingRecord]) -> DenseMatrix {
    let mut data = Vec::with_capacity(records.len() * dim);
    for r in records {
        data.extend_from_slice(&r.vector);
    }
    DenseMatrix::new(records.len(), dim, data).expect("records share the dataset dimension")
}

/// Image `k` is `R (z_k + σ ε_k)` and its caption is `z_k + σ ε'_k`, where
/// `z_k` is the class anchor `s · e_class` plus per-pair Gaussian content in
/// the remaining coordinates and `R` is a seeded orthogonal matrix.
pub fn synth_planted_dataset(config: PlantedConfig) -> Result<PlantedDataset> {
    let PlantedConfig {
        seed,
        n_pairs,
        dim,
        noise_sigma,
        n_classes,
    } = config;
    if n_classes < 2 {
        return Err(LabError::invalid("need at least 2 classes"));
    }
    if dim < n_classes + 2 {
        return Err(LabError::invalid(format!(
            "dim {dim} must be at least n_classes + 2 = {}",
            n_classes + 2
        )));
    }
    if n_pairs < 2 * n_classes {
        return Err(LabError::invalid(format!(
            "n_pairs {n_pairs} must be at least 2 * n_classes = {}",
            2 * n_classes
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(LabError::invalid(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_orthogonal(dim, &mut rng);
    let mut labels: Vec<usize> = (0..n_pairs).map(|k| k % n_classes).collect();
    labels.shuffle(&mut rng);

    let mut latent_rows = Vec::with_capacity(n_pairs);
    let mut images = Vec::with_capacity(n_pairs);
    let mut texts = Vec::with_capacity(n_pairs);
    let gauss = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    for (k, &label) in labels.iter().enumerate() {
        let mut z = vec![0.0; dim];
        z[label] = PLANTED_ANCHOR_SCALE;
        for v in z.iter_mut().skip(n_classes) {
            *v = gauss(&mut rng);
        }
        let noisy_image: Vec<f64> = z.iter().map(|v| v + noise_sigma * gauss(&mut rng)).collect();
        let text: Vec<f64> = z.iter().map(|v| v + noise_sigma * gauss(&mut rng)).collect();
        let image: Vec<f64> = (0..dim)
            .map(|i| {
                rotation
                    .row(i)
                    .iter()
                    .zip(&noisy_image)
                    .map(|(r, x)| r * x)
                    .sum()
            })
            .collect();
        images.push(EmbeddingRecord {
            id: format!("img-{k:05}"),
            modality: Modality::Image,
            vector: image,
        });
        texts.push(EmbeddingRecord {
            id: format!("txt-{k:05}"),
            modality: Modality::Text,
            vector: text,
        });
        latent_rows.push(z);
    }

    let pairing = images
        .iter()
        .zip(&texts)
        .map(|(i, t)| (i.id.clone(), t.id.clone()))
        .collect();
    let all: Vec<EmbeddingRecord> = images.iter().chain(&texts).cloned().collect();
    let manifest = DatasetManifest::describe(dim, &all, Some(pairing))?;
    let latent = LabeledFeatureSet::new(
        DenseMatrix::from_rows(dim, &latent_rows)?,
        labels,
        n_classes,
        StageTag::PreProjector,
    )?;
    Ok(PlantedDataset {
        config,
        manifest,
        images,
        texts,
        latent,
        rotation,
    })
}

pub(crate) fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| {
            LabError::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(items)
}
