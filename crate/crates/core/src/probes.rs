//! Linear probing of pre/post projector features and the caption cosine probe.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{LabeledFeatureSet, TokenTable};
use crate::error::{LabError, Result};
use crate::numerics::{cosine_similarity, DenseMatrix};
use crate::projector::ProjectorParams;

/// Optimisation settings of the affine-softmax probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            l2: 1e-4,
            tolerance: 1e-7,
            max_iterations: 5000,
            test_fraction: 0.2,
        }
    }
}

/// Trained multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// dim x n_classes, row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
    pub iterations: usize,
    pub final_loss: f64,
}

impl LinearProbe {
    pub fn fit(train: &LabeledFeatureSet, seed: u64, cfg: &ProbeConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(LabError::EmptyInput("probe training set"));
        }
        let mut seen = vec![false; train.n_classes];
        train.labels.iter().for_each(|&l| seen[l] = true);
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(LabError::invalid("probe training set contains a single class"));
        }
        let (n, d, c) = (train.len(), train.dim(), train.n_classes);
        let (mean, inv_std) = standardizer(&train.features);
        let x: Vec<f64> = standardize(&train.features, &mean, &inv_std);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = DenseMatrix::gaussian(d, c, 1e-3, &mut rng).into_vec();
        let mut bias = vec![0.0; c];
        let mut grad_w = vec![0.0; d * c];
        let mut grad_b = vec![0.0; c];
        let mut probs = vec![0.0; c];

        let mut prev = f64::INFINITY;
        let mut loss = f64::INFINITY;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            let mut data_loss = 0.0;
            for (i, &label) in train.labels.iter().enumerate() {
                let row = &x[i * d..(i + 1) * d];
                data_loss += softmax_cross_entropy(row, &weight, &bias, label, &mut probs);
                probs[label] -= 1.0;
                for (j, &xj) in row.iter().enumerate() {
                    let g = &mut grad_w[j * c..(j + 1) * c];
                    g.iter_mut().zip(&probs).for_each(|(g, p)| *g += xj * p);
                }
                grad_b.iter_mut().zip(&probs).for_each(|(g, p)| *g += p);
            }
            let reg: f64 = weight.iter().map(|w| w * w).sum::<f64>();
            loss = data_loss / n as f64 + 0.5 * cfg.l2 * reg;
            if prev - loss < cfg.tolerance {
                break;
            }
            prev = loss;
            let inv_n = 1.0 / n as f64;
            weight
                .iter_mut()
                .zip(&grad_w)
                .for_each(|(w, g)| *w -= cfg.lr * (g * inv_n + cfg.l2 * *w));
            bias.iter_mut().zip(&grad_b).for_each(|(b, g)| *b -= cfg.lr * g * inv_n);
            iterations += 1;
        }
        Ok(Self {
            mean,
            inv_std,
            weight,
            bias,
            iterations,
            final_loss: loss,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, features: &DenseMatrix) -> Result<Vec<usize>> {
        if features.cols() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                actual: features.cols(),
            });
        }
        let d = self.dim();
        let x = standardize(features, &self.mean, &self.inv_std);
        let mut logits = vec![0.0; self.n_classes()];
        Ok((0..features.rows())
            .map(|i| {
                affine(&x[i * d..(i + 1) * d], &self.weight, &self.bias, &mut logits);
                argmax(&logits)
            })
            .collect())
    }

    pub fn accuracy(&self, set: &LabeledFeatureSet) -> Result<f64> {
        if set.is_empty() {
            return Err(LabError::EmptyInput("probe test set"));
        }
        let predicted = self.predict(&set.features)?;
        let correct = predicted.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / set.len() as f64)
    }
}

fn standardizer(x: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean = x.mean_row().unwrap_or_else(|| vec![0.0; x.cols()]);
    let mut var = vec![0.0; x.cols()];
    for row in x.row_iter() {
        var.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(v, (a, m))| *v += (a - m) * (a - m));
    }
    let inv_std = var
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, inv_std)
}

fn standardize(x: &DenseMatrix, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    x.row_iter()
        .flat_map(|row| {
            row.iter()
                .zip(mean.iter().zip(inv_std))
                .map(|(a, (m, s))| (a - m) * s)
        })
        .collect()
}

fn affine(row: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let c = bias.len();
    out.copy_from_slice(bias);
    for (j, &xj) in row.iter().enumerate() {
        out.iter_mut()
            .zip(&weight[j * c..(j + 1) * c])
            .for_each(|(o, w)| *o += xj * w);
    }
}

/// Fills `probs` with the softmax of the logits and returns the cross-entropy
/// against `label`.
fn softmax_cross_entropy(row: &[f64], weight: &[f64], bias: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    affine(row, weight, bias, probs);
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let target = probs[label];
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    max + sum.ln() - target
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fits a probe on `train` and returns its accuracy on `test`.
pub fn fit_linear_probe(train: &LabeledFeatureSet, test: &LabeledFeatureSet, seed: u64) -> Result<f64> {
    fit_linear_probe_with(train, test, seed, &ProbeConfig::default())
}

pub fn fit_linear_probe_with(
    train: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(LabError::DimensionMismatch {
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    if train.n_classes != test.n_classes {
        return Err(LabError::invalid(format!(
            "label spaces differ: {} vs {} classes",
            train.n_classes, test.n_classes
        )));
    }
    LinearProbe::fit(train, seed, cfg)?.accuracy(test)
}

/// Seeded shuffle of `0..n` split into (train, test) index lists.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(LabError::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(LabError::invalid(format!("cannot split {n} rows into train and test")));
    }
    let train = order.split_off(n_test);
    Ok((train, order))
}

pub fn split_train_test(
    set: &LabeledFeatureSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet)> {
    let (train, test) = split_indices(set.len(), test_fraction, seed)?;
    Ok((set.select(&train), set.select(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub perf_pre: f64,
    pub perf_post: f64,
    pub delta_perf: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub probe_seed: u64,
}

impl ProbeReport {
    pub fn summary_line(&self) -> String {
        format!(
            "deltaperf perf_pre={:.4} perf_post={:.4} delta_perf={:.4} n_train={} n_test={} seed={}",
            self.perf_pre, self.perf_post, self.delta_perf, self.n_train, self.n_test, self.probe_seed
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

/// Probes pre- and post-projector features of the same examples.
pub fn delta_perf(
    pre: (&LabeledFeatureSet, &LabeledFeatureSet),
    post: (&LabeledFeatureSet, &LabeledFeatureSet),
    seed: u64,
) -> Result<ProbeReport> {
    delta_perf_with(pre, post, seed, &ProbeConfig::default())
}

pub fn delta_perf_with(
    pre: (&LabeledFeatureSet, &LabeledFeatureSet),
    post: (&LabeledFeatureSet, &LabeledFeatureSet),
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    for (a, b, which) in [(pre.0, post.0, "train"), (pre.1, post.1, "test")] {
        if a.labels != b.labels || a.n_classes != b.n_classes {
            return Err(LabError::invalid(format!(
                "pre/post {which} labels do not match row-for-row"
            )));
        }
    }
    let perf_pre = fit_linear_probe_with(pre.0, pre.1, seed, cfg)?;
    let perf_post = fit_linear_probe_with(post.0, post.1, seed, cfg)?;
    Ok(ProbeReport {
        perf_pre,
        perf_post,
        delta_perf: perf_pre - perf_post,
        n_train: pre.0.len(),
        n_test: pre.1.len(),
        probe_seed: seed,
    })
}

/// Splits both feature sets with one shared permutation, then probes.
pub fn delta_perf_split(
    pre: &LabeledFeatureSet,
    post: &LabeledFeatureSet,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if pre.len() != post.len() {
        return Err(LabError::DimensionMismatch {
            expected: pre.len(),
            actual: post.len(),
        });
    }
    let (train, test) = split_indices(pre.len(), cfg.test_fraction, seed)?;
    delta_perf_with(
        (&pre.select(&train), &pre.select(&test)),
        (&post.select(&train), &post.select(&test)),
        seed,
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub dataset_id: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// Pairs dropped because no caption token was in the table.
    pub skipped: usize,
}

impl AlignmentReport {
    pub fn from_values(dataset_id: &str, values: Vec<f64>, skipped: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(LabError::EmptyInput("alignment pairs"));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Ok(Self {
            dataset_id: dataset_id.to_string(),
            values,
            mean,
            median,
            skipped,
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "cosine dataset={} n={} mean={:.4} median={:.4} skipped={}",
            self.dataset_id,
            self.values.len(),
            self.mean,
            self.median,
            self.skipped
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

/// Cosine between each image's mean-pooled projected patches and the mean
/// token embedding of its caption.
pub fn alignment_cosine_probe<S: AsRef<str>>(
    projector: &ProjectorParams,
    images: &[DenseMatrix],
    table: &TokenTable,
    captions: &[Vec<S>],
    dataset_id: &str,
) -> Result<AlignmentReport> {
    if images.len() != captions.len() {
        return Err(LabError::DimensionMismatch {
            expected: images.len(),
            actual: captions.len(),
        });
    }
    if projector.out_dim() != table.dim() {
        return Err(LabError::DimensionMismatch {
            expected: projector.out_dim(),
            actual: table.dim(),
        });
    }
    let mut values = Vec::with_capacity(images.len());
    let mut skipped = 0;
    for (patches, caption) in images.iter().zip(captions) {
        let Some(text) = table.embed_tokens(caption) else {
            skipped += 1;
            continue;
        };
        let pooled = projector
            .forward(patches)?
            .mean_row()
            .ok_or(LabError::EmptyInput("image patches"))?;
        values.push(cosine_similarity(&pooled, &text)?);
    }
    AlignmentReport::from_values(dataset_id, values, skipped)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
