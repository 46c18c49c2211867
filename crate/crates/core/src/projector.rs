//! The vision-to-language projector: one affine map, or two with a GELU in
//! between. Rows are examples, so a layer computes `x W + b`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::datastore::{binary_path, manifest_path, read_f32_le, write_f32_le};
use crate::error::{LabError, Result};
use crate::losses::LinearDecoder;
use crate::numerics::DenseMatrix;

/// Hidden width of the default projector, as a multiple of its input width.
pub const DEFAULT_HIDDEN_FACTOR: usize = 8;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// in × out
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(LabError::DimensionMismatch {
                expected: weight.cols(),
                actual: bias.len(),
            });
        }
        if let Some(coordinate) = bias.iter().position(|b| !b.is_finite()) {
            return Err(LabError::NonFinite { coordinate });
        }
        Ok(Self { weight, bias })
    }

    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: DenseMatrix::gaussian(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = x.matmul(&self.weight)?;
        for i in 0..out.rows() {
            out.row_mut(i)
                .iter_mut()
                .zip(&self.bias)
                .for_each(|(v, b)| *v += b);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    layers: Vec<AffineLayer>,
}

/// Gradients with respect to every layer and to the projector input.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub layers: Vec<AffineLayer>,
    pub input: DenseMatrix,
}

impl ProjectorGrads {
    /// Parameter gradients in [`ProjectorParams::to_flat`] layout.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[AffineLayer]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(l.weight.as_slice());
        v.extend_from_slice(&l.bias);
    }
    v
}

impl ProjectorParams {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(LabError::invalid(format!(
                "projector needs 1 or 2 layers, got {}",
                layers.len()
            )));
        }
        if layers.len() == 2 && layers[0].weight.cols() != layers[1].weight.rows() {
            return Err(LabError::DimensionMismatch {
                expected: layers[0].weight.cols(),
                actual: layers[1].weight.rows(),
            });
        }
        for l in &layers {
            if l.bias.len() != l.weight.cols() {
                return Err(LabError::DimensionMismatch {
                    expected: l.weight.cols(),
                    actual: l.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Two-layer GELU MLP with `1/sqrt(fan_in)` Gaussian weights and zero biases.
    pub fn init_mlp<R: Rng + ?Sized>(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                AffineLayer::init(in_dim, hidden_dim, rng),
                AffineLayer::init(hidden_dim, out_dim, rng),
            ],
        }
    }

    /// Default two-layer projector with hidden width [`DEFAULT_HIDDEN_FACTOR`] times the input width.
    pub fn init_default<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::init_mlp(in_dim, DEFAULT_HIDDEN_FACTOR * in_dim, out_dim, rng)
    }

    pub fn init_linear<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![AffineLayer::init(in_dim, out_dim, rng)],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![AffineLayer {
                weight: DenseMatrix::identity(dim),
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        (self.layers.len() == 2).then(|| self.layers[0].weight.cols())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.as_slice().len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.in_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let first = self.layers[0].apply(x)?;
        match self.layers.get(1) {
            None => Ok(first),
            Some(second) => second.apply(&map(&first, gelu)),
        }
    }

    /// Reverse-mode gradients given `upstream = ∂L/∂output`.
    pub fn backward(&self, x: &DenseMatrix, upstream: &DenseMatrix) -> Result<ProjectorGrads> {
        self.check_input(x)?;
        if upstream.shape() != (x.rows(), self.out_dim()) {
            return Err(LabError::DimensionMismatch {
                expected: x.rows() * self.out_dim(),
                actual: upstream.rows() * upstream.cols(),
            });
        }
        let first = &self.layers[0];
        match self.layers.get(1) {
            None => {
                let (layer, input) = affine_backward(first, x, upstream)?;
                Ok(ProjectorGrads {
                    layers: vec![layer],
                    input,
                })
            }
            Some(second) => {
                let pre = first.apply(x)?;
                let hidden = map(&pre, gelu);
                let (second_grad, d_hidden) = affine_backward(second, &hidden, upstream)?;
                let mut d_pre = d_hidden;
                for (g, z) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= gelu_derivative(*z);
                }
                let (first_grad, input) = affine_backward(first, x, &d_pre)?;
                Ok(ProjectorGrads {
                    layers: vec![first_grad, second_grad],
                    input,
                })
            }
        }
    }

    pub fn zero_grads(&self, rows: usize) -> ProjectorGrads {
        ProjectorGrads {
            layers: self.layers.iter().map(AffineLayer::zeros_like).collect(),
            input: DenseMatrix::zeros(rows, self.in_dim()),
        }
    }
}

fn map(m: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn affine_backward(
    layer: &AffineLayer,
    input: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(AffineLayer, DenseMatrix)> {
    let weight = input.transpose().matmul(upstream)?;
    let mut bias = vec![0.0; layer.bias.len()];
    for row in upstream.row_iter() {
        bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    let d_input = upstream.matmul(&layer.weight.transpose())?;
    Ok((AffineLayer { weight, bias }, d_input))
}

pub fn projector_forward(params: &ProjectorParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    params.forward(x)
}

pub fn projector_backward(
    params: &ProjectorParams,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<ProjectorGrads> {
    params.backward(x, upstream)
}

/// Projector, surrogate decoder and contrastive weight, stored as
/// `<stem>.manifest` + `<stem>.f32bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub projector: ProjectorParams,
    pub decoder: Option<LinearDecoder>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    activation: String,
    lambda: f64,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "hallulab-checkpoint";

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.projector.layers.iter().enumerate() {
            let (r, c) = l.weight.shape();
            out.push((format!("projector.{i}.weight"), r, c, l.weight.as_slice().to_vec()));
            out.push((format!("projector.{i}.bias"), 1, c, l.bias.clone()));
        }
        if let Some(d) = &self.decoder {
            let (r, c) = d.weight.shape();
            out.push(("decoder.weight".into(), r, c, d.weight.as_slice().to_vec()));
            out.push(("decoder.bias".into(), 1, c, d.bias.clone()));
        }
        out
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let tensors = self.tensors();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            activation: "gelu".into(),
            lambda: self.lambda,
            tensors: tensors
                .iter()
                .map(|(name, rows, cols, _)| TensorEntry {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
        };
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(manifest_path(stem), serde_json::to_string_pretty(&manifest)? + "\n")?;
        write_f32_le(
            &binary_path(stem),
            tensors.into_iter().flat_map(|(_, _, _, v)| v.into_iter()),
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(manifest_path(stem))?)
                .map_err(|e| LabError::InvalidManifest(e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(LabError::InvalidManifest(format!(
                "not a checkpoint: format {}",
                manifest.format
            )));
        }
        let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        let values = read_f32_le(&binary_path(stem), total)?;
        let mut offset = 0;
        let mut take = |t: &TensorEntry| {
            let v = values[offset..offset + t.rows * t.cols].to_vec();
            offset += t.rows * t.cols;
            v
        };
        let mut layers = Vec::new();
        let mut decoder = None;
        let mut it = manifest.tensors.iter();
        while let Some(w) = it.next() {
            let b = it
                .next()
                .ok_or_else(|| LabError::InvalidManifest(format!("{} has no bias", w.name)))?;
            let weight = DenseMatrix::new(w.rows, w.cols, take(w))?;
            let bias = take(b);
            if w.name.starts_with("projector.") {
                layers.push(AffineLayer::new(weight, bias)?);
            } else if w.name == "decoder.weight" {
                decoder = Some(LinearDecoder { weight, bias });
            } else {
                return Err(LabError::InvalidManifest(format!("unknown tensor {}", w.name)));
            }
        }
        Ok(Self {
            projector: ProjectorParams::new(layers)?,
            decoder,
            lambda: manifest.lambda,
        })
    }
}
