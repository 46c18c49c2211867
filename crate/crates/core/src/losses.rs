//! Contrastive, margin and generation-surrogate objectives with analytic
//! gradients.
//!
//! Similarities are cosines (`I·T` on L2-normalised vectors) unless
//! [`LossConfig::normalize`] is turned off. Every loss is mean-reduced: first
//! over the candidates attached to one anchor, then over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, logsumexp, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature β.
    pub beta: f64,
    /// Margin of positives over every negative.
    pub tau1: f64,
    /// Margin of synthetic negatives over standard negatives.
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Cosine similarity when true, raw dot product otherwise.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.07,
            tau1: 0.2,
            tau2: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            normalize: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        for (name, v) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2t,
    T2i,
}

/// Images with their matching captions and two pools of negative captions.
///
/// Row `k` of `positives` is the caption of image `k`. The text-to-image
/// direction always contrasts a caption against the other images of the
/// batch; the negative pools only enter the image-to-text direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    images: DenseMatrix,
    positives: DenseMatrix,
    standard_negatives: Vec<DenseMatrix>,
    synthetic_negatives: Vec<DenseMatrix>,
}

impl ContrastiveBatch {
    pub fn new(
        images: DenseMatrix,
        positives: DenseMatrix,
        standard_negatives: Vec<DenseMatrix>,
        synthetic_negatives: Vec<DenseMatrix>,
    ) -> Result<Self> {
        let n = images.rows();
        let d = images.cols();
        if n == 0 {
            return Err(LabError::EmptyInput("contrastive batch has no images"));
        }
        if positives.shape() != (n, d) {
            return Err(LabError::DimensionMismatch {
                expected: n * d,
                actual: positives.rows() * positives.cols(),
            });
        }
        for pool in [&standard_negatives, &synthetic_negatives] {
            if pool.len() != n {
                return Err(LabError::DimensionMismatch {
                    expected: n,
                    actual: pool.len(),
                });
            }
            if let Some(bad) = pool.iter().find(|m| m.cols() != d) {
                return Err(LabError::DimensionMismatch {
                    expected: d,
                    actual: bad.cols(),
                });
            }
        }
        Ok(Self {
            images,
            positives,
            standard_negatives,
            synthetic_negatives,
        })
    }

    /// Standard negatives of image `k` are the captions of every other image.
    pub fn in_batch(images: DenseMatrix, texts: DenseMatrix) -> Result<Self> {
        let n = texts.rows();
        let standard = (0..n)
            .map(|k| texts.select_rows(&(0..n).filter(|&j| j != k).collect::<Vec<_>>()))
            .collect();
        let synthetic = (0..n).map(|_| DenseMatrix::zeros(0, texts.cols())).collect();
        Self::new(images, texts, standard, synthetic)
    }

    pub fn with_synthetic(self, synthetic_negatives: Vec<DenseMatrix>) -> Result<Self> {
        Self::new(
            self.images,
            self.positives,
            self.standard_negatives,
            synthetic_negatives,
        )
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &DenseMatrix {
        &self.images
    }

    pub fn positives(&self) -> &DenseMatrix {
        &self.positives
    }

    pub fn standard_negatives(&self) -> &[DenseMatrix] {
        &self.standard_negatives
    }

    pub fn synthetic_negatives(&self) -> &[DenseMatrix] {
        &self.synthetic_negatives
    }

    /// Same batch with anchors (and their attached pools) reordered.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(order),
            positives: self.positives.select_rows(order),
            standard_negatives: order.iter().map(|&i| self.standard_negatives[i].clone()).collect(),
            synthetic_negatives: order.iter().map(|&i| self.synthetic_negatives[i].clone()).collect(),
        }
    }

    /// All entries in the order images, positives, standard pools, synthetic pools.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.images.as_slice());
        out.extend_from_slice(self.positives.as_slice());
        for m in self.standard_negatives.iter().chain(&self.synthetic_negatives) {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Inverse of [`Self::to_flat`] against this batch's shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut offset = 0;
        let mut fill = |m: &mut DenseMatrix| {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        };
        fill(&mut out.images);
        fill(&mut out.positives);
        out.standard_negatives.iter_mut().for_each(&mut fill);
        out.synthetic_negatives.iter_mut().for_each(&mut fill);
        out
    }

    fn vector(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Image(k) => self.images.row(k),
            Slot::Positive(k) => self.positives.row(k),
            Slot::Standard(k, j) => self.standard_negatives[k].row(j),
            Slot::Synthetic(k, j) => self.synthetic_negatives[k].row(j),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Image(usize),
    Positive(usize),
    Standard(usize, usize),
    Synthetic(usize, usize),
}

/// Gradients shaped like the [`ContrastiveBatch`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub images: DenseMatrix,
    pub positives: DenseMatrix,
    pub standard_negatives: Vec<DenseMatrix>,
    pub synthetic_negatives: Vec<DenseMatrix>,
}

impl BatchGrads {
    fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let zeros = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            images: zeros(&batch.images),
            positives: zeros(&batch.positives),
            standard_negatives: batch.standard_negatives.iter().map(zeros).collect(),
            synthetic_negatives: batch.synthetic_negatives.iter().map(zeros).collect(),
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut [f64] {
        match slot {
            Slot::Image(k) => self.images.row_mut(k),
            Slot::Positive(k) => self.positives.row_mut(k),
            Slot::Standard(k, j) => self.standard_negatives[k].row_mut(j),
            Slot::Synthetic(k, j) => self.synthetic_negatives[k].row_mut(j),
        }
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        [&mut self.images, &mut self.positives]
            .into_iter()
            .chain(self.standard_negatives.iter_mut())
            .chain(self.synthetic_negatives.iter_mut())
    }

    fn matrices(&self) -> impl Iterator<Item = &DenseMatrix> {
        [&self.images, &self.positives]
            .into_iter()
            .chain(self.standard_negatives.iter())
            .chain(self.synthetic_negatives.iter())
    }

    /// `self = a * self + b * other`.
    fn combine(&mut self, a: f64, other: &BatchGrads, b: f64) {
        for (dst, src) in self.matrices_mut().zip(other.matrices()) {
            for (x, y) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *x = a * *x + b * y;
            }
        }
    }

    /// Same layout as [`ContrastiveBatch::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.matrices().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrads<G> {
    pub value: f64,
    pub grads: G,
    /// Set when some anchor had no negatives at all, so its term is a
    /// constant zero that cannot train anything.
    pub degenerate: bool,
}

struct SimGrad {
    value: f64,
    d_a: Vec<f64>,
    d_b: Vec<f64>,
}

fn similarity(a: &[f64], b: &[f64], normalize: bool) -> Result<SimGrad> {
    let ab = dot(a, b);
    if !normalize {
        return Ok(SimGrad {
            value: ab,
            d_a: b.to_vec(),
            d_b: a.to_vec(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LabError::ZeroNorm);
    }
    let s = ab / (na * nb);
    // d/da (a·b / |a||b|) = b/(|a||b|) - s a/|a|²
    let d_a = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - s * x / (na * na))
        .collect();
    let d_b = b
        .iter()
        .zip(a)
        .map(|(y, x)| x / (na * nb) - s * y / (nb * nb))
        .collect();
    Ok(SimGrad { value: s, d_a, d_b })
}

fn accumulate(grads: &mut BatchGrads, slot: Slot, g: &[f64], factor: f64) {
    if factor == 0.0 {
        return;
    }
    for (dst, v) in grads.slot_mut(slot).iter_mut().zip(g) {
        *dst += factor * v;
    }
}

/// `-log softmax(scores)[0]` for one anchor; accumulates `weight * ∂` into grads.
fn anchor_softmax_term(
    batch: &ContrastiveBatch,
    grads: &mut BatchGrads,
    anchor: Slot,
    candidates: &[Slot],
    config: &LossConfig,
    weight: f64,
) -> Result<f64> {
    let a = batch.vector(anchor);
    let sims = candidates
        .iter()
        .map(|&c| similarity(a, batch.vector(c), config.normalize))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = sims.iter().map(|s| s.value / config.beta).collect();
    let lse = logsumexp(&scores)?;
    let loss = lse - scores[0];
    for (j, (&c, sim)) in candidates.iter().zip(&sims).enumerate() {
        let p = (scores[j] - lse).exp();
        let d_score = if j == 0 { p - 1.0 } else { p };
        let factor = weight * d_score / config.beta;
        accumulate(grads, anchor, &sim.d_a, factor);
        accumulate(grads, c, &sim.d_b, factor);
    }
    Ok(loss)
}

/// One direction of the in-batch contrastive loss.
///
/// Image-to-text: each image is contrasted against its caption, its
/// standard negatives and (with `include_synthetic`) its synthetic
/// negatives. Text-to-image: each caption against all batch images.
pub fn contrastive_directional(
    batch: &ContrastiveBatch,
    config: &LossConfig,
    direction: Direction,
    include_synthetic: bool,
) -> Result<LossValueAndGrads<BatchGrads>> {
    config.validate()?;
    let n = batch.len();
    let weight = 1.0 / n as f64;
    let mut grads = BatchGrads::zeros_like(batch);
    let mut total = 0.0;
    let mut degenerate = false;
    let mut candidates = Vec::new();
    for k in 0..n {
        candidates.clear();
        let anchor = match direction {
            Direction::I2t => {
                candidates.push(Slot::Positive(k));
                candidates.extend((0..batch.standard_negatives[k].rows()).map(|j| Slot::Standard(k, j)));
                if include_synthetic {
                    candidates.extend(
                        (0..batch.synthetic_negatives[k].rows()).map(|j| Slot::Synthetic(k, j)),
                    );
                }
                Slot::Image(k)
            }
            Direction::T2i => {
                candidates.push(Slot::Image(k));
                candidates.extend((0..n).filter(|&j| j != k).map(Slot::Image));
                Slot::Positive(k)
            }
        };
        degenerate |= candidates.len() == 1;
        total += anchor_softmax_term(batch, &mut grads, anchor, &candidates, config, weight)?;
    }
    Ok(LossValueAndGrads {
        value: total / n as f64,
        grads,
        degenerate,
    })
}

/// Symmetric image-text contrastive loss, the mean of both directions.
pub fn contrastive_itc(
    batch: &ContrastiveBatch,
    config: &LossConfig,
    include_synthetic: bool,
) -> Result<LossValueAndGrads<BatchGrads>> {
    let i2t = contrastive_directional(batch, config, Direction::I2t, include_synthetic)?;
    let t2i = contrastive_directional(batch, config, Direction::T2i, include_synthetic)?;
    let mut grads = i2t.grads;
    grads.combine(0.5, &t2i.grads, 0.5);
    Ok(LossValueAndGrads {
        value: 0.5 * (i2t.value + t2i.value),
        grads,
        degenerate: i2t.degenerate || t2i.degenerate,
    })
}

struct AnchorSims {
    positive: SimGrad,
    standard: Vec<SimGrad>,
    synthetic: Vec<SimGrad>,
}

fn anchor_sims(batch: &ContrastiveBatch, k: usize, normalize: bool) -> Result<AnchorSims> {
    let img = batch.images.row(k);
    let pool = |m: &DenseMatrix| {
        m.row_iter()
            .map(|t| similarity(img, t, normalize))
            .collect::<Result<Vec<_>>>()
    };
    Ok(AnchorSims {
        positive: similarity(img, batch.positives.row(k), normalize)?,
        standard: pool(&batch.standard_negatives[k])?,
        synthetic: pool(&batch.synthetic_negatives[k])?,
    })
}

/// Hinge `max(0, τ₁ - I·T⁺ + I·T*)` over every negative (standard and
/// synthetic) of every image.
pub fn margin_positive_vs_all(
    batch: &ContrastiveBatch,
    config: &LossConfig,
) -> Result<LossValueAndGrads<BatchGrads>> {
    config.validate()?;
    let n = batch.len();
    let mut grads = BatchGrads::zeros_like(batch);
    let mut total = 0.0;
    for k in 0..n {
        let sims = anchor_sims(batch, k, config.normalize)?;
        let negatives: Vec<(Slot, &SimGrad)> = sims
            .standard
            .iter()
            .enumerate()
            .map(|(j, s)| (Slot::Standard(k, j), s))
            .chain(
                sims.synthetic
                    .iter()
                    .enumerate()
                    .map(|(j, s)| (Slot::Synthetic(k, j), s)),
            )
            .collect();
        if negatives.is_empty() {
            return Err(LabError::invalid(format!("image {k} has no negatives for the margin term")));
        }
        let count = negatives.len() as f64;
        let weight = 1.0 / (n as f64 * count);
        let mut anchor_total = 0.0;
        for (slot, neg) in negatives {
            let arg = config.tau1 - sims.positive.value + neg.value;
            if arg > 0.0 {
                anchor_total += arg;
                accumulate(&mut grads, Slot::Image(k), &sims.positive.d_a, -weight);
                accumulate(&mut grads, Slot::Positive(k), &sims.positive.d_b, -weight);
                accumulate(&mut grads, Slot::Image(k), &neg.d_a, weight);
                accumulate(&mut grads, slot, &neg.d_b, weight);
            }
        }
        total += anchor_total / count;
    }
    Ok(LossValueAndGrads {
        value: total / n as f64,
        grads,
        degenerate: false,
    })
}

/// Hinge `max(0, τ₂ - I·T^neg + I·T⁻)` over every (synthetic, standard)
/// pair of every image.
pub fn margin_synthetic_vs_standard(
    batch: &ContrastiveBatch,
    config: &LossConfig,
) -> Result<LossValueAndGrads<BatchGrads>> {
    config.validate()?;
    let n = batch.len();
    let mut grads = BatchGrads::zeros_like(batch);
    let mut total = 0.0;
    for k in 0..n {
        let sims = anchor_sims(batch, k, config.normalize)?;
        if sims.synthetic.is_empty() || sims.standard.is_empty() {
            return Err(LabError::invalid(format!(
                "image {k} needs both synthetic ({}) and standard ({}) negatives",
                sims.synthetic.len(),
                sims.standard.len()
            )));
        }
        let pairs = sims.synthetic.len() * sims.standard.len();
        let weight = 1.0 / (n as f64 * pairs as f64);
        let mut anchor_total = 0.0;
        for (a, syn) in sims.synthetic.iter().enumerate() {
            for (b, std) in sims.standard.iter().enumerate() {
                let arg = config.tau2 - syn.value + std.value;
                if arg > 0.0 {
                    anchor_total += arg;
                    accumulate(&mut grads, Slot::Image(k), &syn.d_a, -weight);
                    accumulate(&mut grads, Slot::Synthetic(k, a), &syn.d_b, -weight);
                    accumulate(&mut grads, Slot::Image(k), &std.d_a, weight);
                    accumulate(&mut grads, Slot::Standard(k, b), &std.d_b, weight);
                }
            }
        }
        total += anchor_total / pairs as f64;
    }
    Ok(LossValueAndGrads {
        value: total / n as f64,
        grads,
        degenerate: false,
    })
}

/// `L_itc (with synthetic negatives) + λ₁ L₁ + λ₂ L₂`. A margin term whose
/// weight is exactly zero is not evaluated.
pub fn total_finegrained_loss(
    batch: &ContrastiveBatch,
    config: &LossConfig,
) -> Result<LossValueAndGrads<BatchGrads>> {
    let mut out = contrastive_itc(batch, config, true)?;
    if config.lambda1 != 0.0 {
        let l1 = margin_positive_vs_all(batch, config)?;
        out.value += config.lambda1 * l1.value;
        out.grads.combine(1.0, &l1.grads, config.lambda1);
    }
    if config.lambda2 != 0.0 {
        let l2 = margin_synthetic_vs_standard(batch, config)?;
        out.value += config.lambda2 * l2.value;
        out.grads.combine(1.0, &l2.grads, config.lambda2);
    }
    Ok(out)
}

/// Linear softmax decoder standing in for the language model in the
/// generation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    /// d × n_classes
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearDecoder {
    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(dim, n_classes),
            bias: vec![0.0; n_classes],
        }
    }

    /// Gaussian weights scaled by `1/sqrt(dim)`, zero bias.
    pub fn init<R: Rng + ?Sized>(dim: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            weight: DenseMatrix::gaussian(dim, n_classes, 1.0 / (dim as f64).sqrt(), rng),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = x.matmul(&self.weight)?;
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let w = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&flat[..w]);
        self.bias.copy_from_slice(&flat[w..]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub projected: DenseMatrix,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl DecoderGrads {
    /// Decoder parameter gradients in [`LinearDecoder::to_flat`] layout.
    pub fn decoder_flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }
}

/// Mean softmax cross-entropy of `decoder` over projected image features.
pub fn generation_surrogate_loss(
    projected: &DenseMatrix,
    targets: &[usize],
    decoder: &LinearDecoder,
) -> Result<LossValueAndGrads<DecoderGrads>> {
    let n = projected.rows();
    if n == 0 {
        return Err(LabError::EmptyInput("no projected features"));
    }
    if targets.len() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            actual: targets.len(),
        });
    }
    let c = decoder.n_classes();
    if let Some(&label) = targets.iter().find(|&&t| t >= c) {
        return Err(LabError::LabelOutOfRange { label, n_classes: c });
    }
    let logits = decoder.logits(projected)?;
    let mut d_logits = DenseMatrix::zeros(n, c);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = logsumexp(row)?;
        total += lse - row[t];
        let d = d_logits.row_mut(i);
        for (j, (dst, z)) in d.iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            *dst = (p - if j == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let weight = projected.transpose().matmul(&d_logits)?;
    let mut bias = vec![0.0; c];
    for row in d_logits.row_iter() {
        bias.iter_mut().zip(row).for_each(|(b, v)| *b += v);
    }
    let projected_grad = d_logits.matmul(&decoder.weight.transpose())?;
    Ok(LossValueAndGrads {
        value: total / n as f64,
        grads: DecoderGrads {
            projected: projected_grad,
            weight,
            bias,
        },
        degenerate: false,
    })
}
