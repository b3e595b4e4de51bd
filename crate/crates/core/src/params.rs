//! Named parameter tensors, checkpoints and the Adam optimizer.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    Kind { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor {name}: {message}")]
    Shape { name: String, message: String },
}

/// Dense row-major tensor with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(name: &str, dims: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: vec![S::zero(); dims.iter().product()],
        }
    }

    /// Gaussian init scaled by `scale`.
    pub fn randn(name: &str, dims: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(name, dims);
        for x in t.data.iter_mut() {
            *x = S::of(rng.sample::<f64, _>(StandardNormal) * scale);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.name, &self.dims)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            name: self.name.clone(),
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| T::of(x.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON of named numeric arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_tensors<S: Scalar>(kind: &str, meta: serde_json::Value, tensors: &[Tensor<S>]) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors: tensors
                .iter()
                .map(|t| TensorRecord {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|x| x.to_f64_lossy()).collect(),
                })
                .collect(),
        }
    }

    /// Tensors in the order of `expected`, each checked against its declared dims.
    pub fn tensors_as<S: Scalar>(&self, kind: &str, expected: &[(&str, Vec<usize>)]) -> Result<Vec<Tensor<S>>, CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.version));
        }
        expected
            .iter()
            .map(|(name, dims)| {
                let rec = self.tensors.iter().find(|t| t.name == *name).ok_or_else(|| CheckpointError::Shape {
                    name: name.to_string(),
                    message: "missing".into(),
                })?;
                if &rec.dims != dims || rec.data.len() != dims.iter().product::<usize>() {
                    return Err(CheckpointError::Shape {
                        name: name.to_string(),
                        message: format!("dims {:?} with {} values, expected {:?}", rec.dims, rec.data.len(), dims),
                    });
                }
                Ok(Tensor {
                    name: rec.name.clone(),
                    dims: rec.dims.clone(),
                    data: rec.data.iter().map(|&x| S::of(x)).collect(),
                })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|source| CheckpointError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<S>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|t| vec![S::zero(); t.len()]).collect(),
            v: params.iter().map(|t| vec![S::zero(); t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) {
        self.step += 1;
        let (b1, b2) = (S::of(self.cfg.beta1), S::of(self.cfg.beta2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let (lr, eps) = (S::of(self.cfg.lr), S::of(self.cfg.eps));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (x, &gi)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = b1 * *m + (S::one() - b1) * gi;
                *v = b2 * *v + (S::one() - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Accumulate `src` into `dst` elementwise.
pub(crate) fn add_into<S: Scalar>(dst: &mut [Tensor<S>], src: &[Tensor<S>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.data.iter_mut().zip(&s.data) {
            *a += *b;
        }
    }
}

pub(crate) fn scale<S: Scalar>(ts: &mut [Tensor<S>], k: S) {
    for t in ts {
        for x in t.data.iter_mut() {
            *x *= k;
        }
    }
}
