//! Trainable models and the local training loop.
//!
//! Models expose their objective over flat `f64` vectors laid out in tensor
//! name order (trainable entries and buffers separately). Training runs in
//! `f64` and rounds to `f32` once when the update is packaged.

mod convex;
mod segnet;

pub use convex::{solve_convex, ConvexProblem, LeastSquares, LinearSample, LogisticRegression};
pub use segnet::{focal_loss, ModelSpec, Normalization, SegNet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::metrics::{MetricReport, MetricsError};
use crate::params::{ModelDelta, ParameterSet, ParamsError};
use crate::seed::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },
    #[error("client dataset is empty")]
    EmptyDataset,
    #[error("proximal term requested without a global reference model")]
    MissingReference,
    #[error("invalid model or training configuration: {0}")]
    InvalidConfig(String),
    #[error("linear system is singular")]
    SingularSystem,
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    #[serde(default = "default_alpha")]
    pub focal_alpha: f64,
    #[serde(default = "default_gamma")]
    pub focal_gamma: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.25
}

fn default_gamma() -> f64 {
    2.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            focal_alpha: default_alpha(),
            focal_gamma: default_gamma(),
            prox_mu: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal_alpha must lie in (0, 1)");
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad("focal_gamma must be nonnegative");
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("prox_mu must be nonnegative");
        }
        Ok(())
    }
}

/// Loss of a model on held-out samples, plus segmentation scores when the
/// model produces masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub samples: usize,
    pub report: Option<MetricReport>,
}

pub trait Model: Send + Sync {
    type Sample: Clone + Send + Sync;

    /// Initial parameters; also fixes the tensor layout.
    fn init_params(&self, seed: u64) -> ParameterSet;

    /// Mean training loss on `batch` and its gradient w.r.t. the flat
    /// trainable vector. Running statistics in `buffers` are updated in place.
    fn loss_grad(
        &self,
        trainable: &[f64],
        buffers: &mut [f64],
        batch: &[&Self::Sample],
        cfg: &TrainConfig,
    ) -> Result<(f64, Vec<f64>)>;

    fn evaluate(&self, params: &ParameterSet, samples: &[Self::Sample], cfg: &TrainConfig) -> Result<Evaluation>;
}

/// Training objective plus the proximal term `mu/2 * ||w - reference||^2`.
pub fn local_objective<M: Model + ?Sized>(
    model: &M,
    trainable: &[f64],
    buffers: &mut [f64],
    batch: &[&M::Sample],
    cfg: &TrainConfig,
    prox_reference: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut grad) = model.loss_grad(trainable, buffers, batch, cfg)?;
    if cfg.prox_mu > 0.0 {
        let reference = prox_reference.ok_or(ModelError::MissingReference)?;
        for ((g, &w), &r) in grad.iter_mut().zip(trainable).zip(reference) {
            let d = w - r;
            loss += 0.5 * cfg.prox_mu * d * d;
            *g += cfg.prox_mu * d;
        }
    }
    Ok((loss, grad))
}

/// A client's training result for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: String,
    pub round: u32,
    pub num_samples: u64,
    /// Post-training weights and buffers.
    pub weights: ParameterSet,
    /// Refreshed Scaffold client variate, when variates were supplied.
    pub variate: Option<ParameterSet>,
    pub train_loss: f64,
    pub steps: u64,
}

impl ClientUpdate {
    pub fn delta(&self, global: &ParameterSet) -> Result<ModelDelta> {
        Ok(ModelDelta::between(&self.weights, global, self.client.clone(), self.num_samples, self.round)?)
    }
}

/// Scaffold inputs for one client: its own variate and the global one.
#[derive(Debug, Clone, Copy)]
pub struct VariateInputs<'a> {
    pub client: &'a ParameterSet,
    pub global: &'a ParameterSet,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalContext<'a> {
    pub client: &'a str,
    pub round: u32,
    pub global_ref: Option<&'a ParameterSet>,
    pub variates: Option<VariateInputs<'a>>,
}

impl<'a> LocalContext<'a> {
    pub fn new(client: &'a str, round: u32) -> Self {
        Self { client, round, global_ref: None, variates: None }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Runs `cfg.local_epochs` epochs of shuffled minibatch optimization from `start`.
///
/// With variates present every step adds `c - c_i` to the gradient and the
/// update is plain gradient descent; the refreshed client variate is
/// `c_i - c + (start - final) / (K * lr)` with `K` the number of steps taken.
pub fn train_local<M: Model + ?Sized>(
    model: &M,
    start: &ParameterSet,
    data: &[M::Sample],
    cfg: &TrainConfig,
    ctx: LocalContext<'_>,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let trainable_layout = start.trainable();
    let buffer_layout = start.buffers();
    let mut theta = trainable_layout.to_flat_f64();
    let mut buffers = buffer_layout.to_flat_f64();
    let theta0 = theta.clone();

    let prox_reference = if cfg.prox_mu > 0.0 {
        let reference = ctx.global_ref.ok_or(ModelError::MissingReference)?.trainable();
        reference.check_structure(&trainable_layout)?;
        Some(reference.to_flat_f64())
    } else {
        None
    };

    let correction = match ctx.variates {
        Some(v) => {
            v.client.check_structure(&trainable_layout)?;
            v.global.check_structure(&trainable_layout)?;
            if cfg.optimizer == Optimizer::Adam {
                static ONCE: std::sync::Once = std::sync::Once::new();
                ONCE.call_once(|| warn!("Scaffold local steps use plain gradient descent; ignoring Adam"));
            }
            let c = v.global.to_flat_f64();
            let ci = v.client.to_flat_f64();
            Some(c.iter().zip(&ci).map(|(a, b)| a - b).collect::<Vec<f64>>())
        }
        None => None,
    };
    let optimizer = if correction.is_some() { Optimizer::Sgd } else { cfg.optimizer };
    let mut adam = (optimizer == Optimizer::Adam).then(|| Adam::new(theta.len()));

    let mut rng = rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps: u64 = 0;
    let mut last_epoch_loss = 0.0;

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grad) =
                local_objective(model, &theta, &mut buffers, &batch, cfg, prox_reference.as_deref())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss { epoch, batch: batch_index });
            }
            if let Some(corr) = &correction {
                for (g, c) in grad.iter_mut().zip(corr) {
                    *g += c;
                }
            }
            match adam.as_mut() {
                Some(adam) => adam.step(&mut theta, &grad, cfg.learning_rate),
                None => {
                    for (w, g) in theta.iter_mut().zip(&grad) {
                        *w -= cfg.learning_rate * g;
                    }
                }
            }
            steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
    }

    let weights = trainable_layout.with_flat_f64(&theta)?.merged(&buffer_layout.with_flat_f64(&buffers)?)?;

    let variate = match ctx.variates {
        Some(v) if steps > 0 => {
            let scale = 1.0 / (steps as f64 * cfg.learning_rate);
            let c = v.global.to_flat_f64();
            let ci = v.client.to_flat_f64();
            let refreshed: Vec<f64> = (0..theta.len()).map(|i| ci[i] - c[i] + (theta0[i] - theta[i]) * scale).collect();
            Some(v.client.with_flat_f64(&refreshed)?)
        }
        Some(v) => Some(v.client.clone()),
        None => None,
    };

    Ok(ClientUpdate {
        client: ctx.client.to_owned(),
        round: ctx.round,
        num_samples: data.len() as u64,
        weights,
        variate,
        train_loss: last_epoch_loss,
        steps,
    })
}
