//! Projector alignment schedules.
//!
//! * `Separate`: a contrastive-only stage over the projector, then a
//!   generation-surrogate stage over projector and decoder.
//! * `IntegratedLearnable` / `IntegratedFrozen`: one stage minimising
//!   `L_itg + λ L_itc`, with λ trained (and clamped) or held fixed.
//!
//! Training is single-threaded and fully determined by the seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::PairedMatrices;
use crate::error::{LabError, Result};
use crate::losses::{contrastive_itc, generation_surrogate_loss, ContrastiveBatch, LinearDecoder, LossConfig};
use crate::numerics::{cosine_similarity, DenseMatrix};
use crate::projector::ProjectorParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Separate,
    #[serde(alias = "integrated-learnable")]
    IntegratedLearnable,
    #[serde(rename = "integrated-fixed", alias = "integrated-frozen")]
    IntegratedFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub schedule: Schedule,
    /// Initial contrastive weight λ for the integrated schedules.
    pub lambda_init: f64,
    pub lambda_clamp: (f64, f64),
    /// Contrastive-only stage of the separate schedule.
    pub contrastive_epochs: usize,
    /// Generation stage of the separate schedule.
    pub generation_epochs: usize,
    /// Projector learning-rate multiplier during the separate generation stage.
    pub generation_lr_scale: f64,
    /// Single stage of the integrated schedules.
    pub integrated_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::Separate,
            lambda_init: 5.0,
            lambda_clamp: (0.1, 10.0),
            contrastive_epochs: 50,
            generation_epochs: 5,
            generation_lr_scale: 0.02,
            integrated_epochs: 20,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lambda_clamp;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(LabError::invalid(format!("invalid lambda clamp [{lo}, {hi}]")));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err(LabError::invalid(format!("lambda_init must be >= 0, got {}", self.lambda_init)));
        }
        if self.schedule == Schedule::IntegratedLearnable && !(lo..=hi).contains(&self.lambda_init) {
            return Err(LabError::invalid(format!(
                "lambda_init {} outside clamp [{lo}, {hi}]",
                self.lambda_init
            )));
        }
        if self.batch_size < 2 {
            return Err(LabError::invalid("batch_size must be at least 2 for in-batch negatives"));
        }
        let lr = self.optimizer.lr;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(LabError::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        let scale = self.generation_lr_scale;
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(LabError::invalid(format!("generation_lr_scale must be >= 0, got {scale}")));
        }
        Ok(())
    }
}

/// Paired image/caption embeddings plus class targets for the surrogate decoder.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub images: DenseMatrix,
    pub texts: DenseMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl TrainingData {
    pub fn new(images: DenseMatrix, texts: DenseMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.rows() != texts.rows() || images.rows() != labels.len() {
            return Err(LabError::invalid(format!(
                "unpaired training data: {} images, {} captions, {} labels",
                images.rows(),
                texts.rows(),
                labels.len()
            )));
        }
        if images.rows() < 2 {
            return Err(LabError::invalid("need at least two pairs"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(LabError::LabelOutOfRange { label, n_classes });
        }
        Ok(Self {
            images,
            texts,
            labels,
            n_classes,
        })
    }

    pub fn from_pairs(pairs: PairedMatrices, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(pairs.images, pairs.texts, labels, n_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Contrastive,
    Generation,
    Integrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub itc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub itg: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Mean cosine between projected images and their captions in the batch.
    pub mean_pair_cosine: f64,
}

/// Full-dataset diagnostic taken at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_pair_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainLog {
    /// One JSON object per line; step records, then epoch records.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut out, &LogLine::Step(s))?;
            out.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(&mut out, &LogLine::Epoch(e))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.lambda).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub projector: ProjectorParams,
    pub decoder: LinearDecoder,
    pub lambda: f64,
    pub log: TrainLog,
}

/// Mean cosine between `projector(images[k])` and `texts[k]`.
pub fn mean_pair_cosine(projector: &ProjectorParams, images: &DenseMatrix, texts: &DenseMatrix) -> Result<f64> {
    let projected = projector.forward(images)?;
    paired_cosine_mean(&projected, texts)
}

fn paired_cosine_mean(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.rows() == 0 {
        return Err(LabError::EmptyInput("no pairs"));
    }
    let mut sum = 0.0;
    for (x, y) in a.row_iter().zip(b.row_iter()) {
        sum += cosine_similarity(x, y)?;
    }
    Ok(sum / a.rows() as f64)
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Contrastive,
    Generation,
    Integrated { learnable: bool },
}

struct Trainer<'a> {
    data: &'a TrainingData,
    loss: &'a LossConfig,
    schedule: &'a ScheduleConfig,
    rng: ChaCha8Rng,
    projector: ProjectorParams,
    decoder: LinearDecoder,
    lambda: f64,
    step: usize,
    epoch: usize,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    fn new(
        data: &'a TrainingData,
        projector: ProjectorParams,
        loss: &'a LossConfig,
        schedule: &'a ScheduleConfig,
    ) -> Result<Self> {
        loss.validate()?;
        schedule.validate()?;
        if projector.in_dim() != data.images.cols() {
            return Err(LabError::DimensionMismatch {
                expected: projector.in_dim(),
                actual: data.images.cols(),
            });
        }
        if projector.out_dim() != data.texts.cols() {
            return Err(LabError::DimensionMismatch {
                expected: projector.out_dim(),
                actual: data.texts.cols(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let decoder = LinearDecoder::init(projector.out_dim(), data.n_classes, &mut rng);
        Ok(Self {
            data,
            loss,
            schedule,
            rng,
            projector,
            decoder,
            lambda: schedule.lambda_init,
            step: 0,
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    fn run_stage(&mut self, objective: Objective, epochs: usize, projector_lr_scale: f64) -> Result<()> {
        let stage = match objective {
            Objective::Contrastive => Stage::Contrastive,
            Objective::Generation => Stage::Generation,
            Objective::Integrated { .. } => Stage::Integrated,
        };
        let opt = self.schedule.optimizer;
        let projector_cfg = AdamConfig { lr: opt.lr * projector_lr_scale, ..opt };
        let mut projector_opt = Adam::new(projector_cfg, self.projector.n_params());
        let mut decoder_opt = Adam::new(opt, self.decoder.to_flat().len());
        let mut lambda_opt = Adam::new(opt, 1);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.schedule.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                self.train_step(objective, stage, chunk, &mut projector_opt, &mut decoder_opt, &mut lambda_opt)?;
            }
            self.log.epochs.push(EpochRecord {
                epoch: self.epoch,
                stage,
                mean_pair_cosine: mean_pair_cosine(&self.projector, &self.data.images, &self.data.texts)?,
            });
            self.epoch += 1;
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        objective: Objective,
        stage: Stage,
        rows: &[usize],
        projector_opt: &mut Adam,
        decoder_opt: &mut Adam,
        lambda_opt: &mut Adam,
    ) -> Result<()> {
        let x = self.data.images.select_rows(rows);
        let texts = self.data.texts.select_rows(rows);
        let projected = self.projector.forward(&x)?;
        let mean_cos = paired_cosine_mean(&projected, &texts)?;

        let needs_itc = !matches!(objective, Objective::Generation);
        let needs_itg = !matches!(objective, Objective::Contrastive);
        let itc = if needs_itc {
            let batch = ContrastiveBatch::in_batch(projected.clone(), texts)?;
            Some(contrastive_itc(&batch, self.loss, false)?)
        } else {
            None
        };
        let itg = if needs_itg {
            let targets: Vec<usize> = rows.iter().map(|&i| self.data.labels[i]).collect();
            Some(generation_surrogate_loss(&projected, &targets, &self.decoder)?)
        } else {
            None
        };

        let lambda_used = self.lambda;
        let (total, d_projected) = match (&itc, &itg) {
            (Some(c), None) => (c.value, c.grads.images.clone()),
            (None, Some(g)) => (g.value, g.grads.projected.clone()),
            (Some(c), Some(g)) => {
                let mut d = g.grads.projected.clone();
                d.add_scaled(&c.grads.images, lambda_used)?;
                (g.value + lambda_used * c.value, d)
            }
            (None, None) => unreachable!("every objective has at least one term"),
        };
        if !total.is_finite() {
            return Err(LabError::NonFiniteLoss { step: self.step });
        }

        let grads = self.projector.backward(&x, &d_projected)?;
        let mut flat = self.projector.to_flat();
        projector_opt.step(&mut flat, &grads.params_flat());
        self.projector.set_flat(&flat);

        if let Some(g) = &itg {
            let mut flat = self.decoder.to_flat();
            decoder_opt.step(&mut flat, &g.grads.decoder_flat());
            self.decoder.set_flat(&flat);
        }
        if let (Objective::Integrated { learnable: true }, Some(c)) = (objective, &itc) {
            // ∂(L_itg + λ L_itc)/∂λ = L_itc
            let mut lambda = [self.lambda];
            lambda_opt.step(&mut lambda, &[c.value]);
            let (lo, hi) = self.schedule.lambda_clamp;
            self.lambda = lambda[0].clamp(lo, hi);
        }

        self.log.steps.push(StepRecord {
            step: self.step,
            stage,
            itc: itc.as_ref().map(|c| c.value),
            itg: itg.as_ref().map(|g| g.value),
            total,
            lambda: matches!(objective, Objective::Integrated { .. }).then_some(lambda_used),
            mean_pair_cosine: mean_cos,
        });
        self.step += 1;
        Ok(())
    }

    fn finish(self) -> Result<TrainOutcome> {
        if !self.projector.is_finite() {
            return Err(LabError::NonFiniteLoss { step: self.step });
        }
        Ok(TrainOutcome {
            projector: self.projector,
            decoder: self.decoder,
            lambda: self.lambda,
            log: self.log,
        })
    }
}

/// Contrastive-only stage over the projector, then the generation stage.
pub fn train_separate(
    data: &TrainingData,
    projector: ProjectorParams,
    loss: &LossConfig,
    schedule: &ScheduleConfig,
) -> Result<TrainOutcome> {
    if schedule.schedule != Schedule::Separate {
        return Err(LabError::invalid("train_separate requires the separate schedule"));
    }
    let mut t = Trainer::new(data, projector, loss, schedule)?;
    t.run_stage(Objective::Contrastive, schedule.contrastive_epochs, 1.0)?;
    t.run_stage(Objective::Generation, schedule.generation_epochs, schedule.generation_lr_scale)?;
    t.finish()
}

/// Single stage minimising `L_itg + λ L_itc`.
pub fn train_integrated(
    data: &TrainingData,
    projector: ProjectorParams,
    loss: &LossConfig,
    schedule: &ScheduleConfig,
) -> Result<TrainOutcome> {
    let learnable = match schedule.schedule {
        Schedule::IntegratedLearnable => true,
        Schedule::IntegratedFrozen => false,
        Schedule::Separate => {
            return Err(LabError::invalid("train_integrated requires an integrated schedule"))
        }
    };
    let mut t = Trainer::new(data, projector, loss, schedule)?;
    t.run_stage(Objective::Integrated { learnable }, schedule.integrated_epochs, 1.0)?;
    t.finish()
}

/// Generation surrogate alone for `integrated_epochs`; the λ = 0 baseline.
pub fn train_generation_only(
    data: &TrainingData,
    projector: ProjectorParams,
    loss: &LossConfig,
    schedule: &ScheduleConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, projector, loss, schedule)?;
    t.run_stage(Objective::Generation, schedule.integrated_epochs, 1.0)?;
    t.finish()
}

/// Dispatches on `schedule.schedule`.
pub fn train(
    data: &TrainingData,
    projector: ProjectorParams,
    loss: &LossConfig,
    schedule: &ScheduleConfig,
) -> Result<TrainOutcome> {
    match schedule.schedule {
        Schedule::Separate => train_separate(data, projector, loss, schedule),
        _ => train_integrated(data, projector, loss, schedule),
    }
}
