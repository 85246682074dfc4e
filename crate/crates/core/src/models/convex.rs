use nalgebra::{DMatrix, DVector};

use super::{Evaluation, Model, ModelError, Result, TrainConfig};
use crate::params::{ParameterSet, TensorKind};

/// One row of a design matrix and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSample {
    pub x: Vec<f64>,
    pub y: f64,
}

fn linear_params(dim: usize, values: Vec<f32>) -> ParameterSet {
    ParameterSet::new().with("w", vec![dim], values, TensorKind::Trainable)
}

fn check_dims(dim: usize, trainable: &[f64], batch: &[&LinearSample]) -> Result<()> {
    if trainable.len() != dim {
        return Err(ModelError::ShapeMismatch(format!("expected {dim} weights, got {}", trainable.len())));
    }
    if let Some(s) = batch.iter().find(|s| s.x.len() != dim) {
        return Err(ModelError::ShapeMismatch(format!("sample has {} features, model {dim}", s.x.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `mean(0.5 * (x.w - y)^2) + lambda/2 * ||w||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub dim: usize,
    pub lambda: f64,
}

impl LeastSquares {
    pub fn new(dim: usize, lambda: f64) -> Self {
        Self { dim, lambda }
    }

    pub fn objective(&self, w: &[f64], samples: &[LinearSample]) -> f64 {
        let data: f64 =
            samples.iter().map(|s| 0.5 * (dot(&s.x, w) - s.y).powi(2)).sum::<f64>() / samples.len().max(1) as f64;
        data + 0.5 * self.lambda * dot(w, w)
    }
}

impl Model for LeastSquares {
    type Sample = LinearSample;

    fn init_params(&self, _seed: u64) -> ParameterSet {
        linear_params(self.dim, vec![0.0; self.dim])
    }

    fn loss_grad(
        &self,
        trainable: &[f64],
        _buffers: &mut [f64],
        batch: &[&LinearSample],
        _cfg: &TrainConfig,
    ) -> Result<(f64, Vec<f64>)> {
        check_dims(self.dim, trainable, batch)?;
        let n = batch.len().max(1) as f64;
        let mut grad: Vec<f64> = trainable.iter().map(|w| self.lambda * w).collect();
        let mut loss = 0.5 * self.lambda * dot(trainable, trainable);
        for s in batch {
            let r = dot(&s.x, trainable) - s.y;
            loss += 0.5 * r * r / n;
            for (g, x) in grad.iter_mut().zip(&s.x) {
                *g += r * x / n;
            }
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, params: &ParameterSet, samples: &[LinearSample], _cfg: &TrainConfig) -> Result<Evaluation> {
        let w = params.trainable().to_flat_f64();
        let refs: Vec<&LinearSample> = samples.iter().collect();
        check_dims(self.dim, &w, &refs)?;
        Ok(Evaluation { loss: self.objective(&w, samples), samples: samples.len(), report: None })
    }
}

/// Binary logistic regression, targets in {0, 1}, with an L2 penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub dim: usize,
    pub lambda: f64,
}

impl LogisticRegression {
    pub fn new(dim: usize, lambda: f64) -> Self {
        Self { dim, lambda }
    }

    pub fn objective(&self, w: &[f64], samples: &[LinearSample]) -> f64 {
        let refs: Vec<&LinearSample> = samples.iter().collect();
        self.loss_grad(w, &mut [], &refs, &TrainConfig::default()).map_or(f64::NAN, |(l, _)| l)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Model for LogisticRegression {
    type Sample = LinearSample;

    fn init_params(&self, _seed: u64) -> ParameterSet {
        linear_params(self.dim, vec![0.0; self.dim])
    }

    fn loss_grad(
        &self,
        trainable: &[f64],
        _buffers: &mut [f64],
        batch: &[&LinearSample],
        _cfg: &TrainConfig,
    ) -> Result<(f64, Vec<f64>)> {
        check_dims(self.dim, trainable, batch)?;
        let n = batch.len().max(1) as f64;
        let mut grad: Vec<f64> = trainable.iter().map(|w| self.lambda * w).collect();
        let mut loss = 0.5 * self.lambda * dot(trainable, trainable);
        for s in batch {
            let z = dot(&s.x, trainable);
            // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
            loss += (softplus(z) - s.y * z) / n;
            let r = sigmoid(z) - s.y;
            for (g, x) in grad.iter_mut().zip(&s.x) {
                *g += r * x / n;
            }
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, params: &ParameterSet, samples: &[LinearSample], cfg: &TrainConfig) -> Result<Evaluation> {
        let w = params.trainable().to_flat_f64();
        let refs: Vec<&LinearSample> = samples.iter().collect();
        let (loss, _) = self.loss_grad(&w, &mut [], &refs, cfg)?;
        Ok(Evaluation { loss, samples: samples.len(), report: None })
    }
}

/// Per-client least-squares data with a shared ridge penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProblem {
    pub clients: Vec<Vec<LinearSample>>,
    pub lambda: f64,
}

impl ConvexProblem {
    pub fn dim(&self) -> usize {
        self.clients.iter().flatten().next().map_or(0, |s| s.x.len())
    }

    pub fn pooled(&self) -> Vec<LinearSample> {
        self.clients.iter().flatten().cloned().collect()
    }

    pub fn model(&self) -> LeastSquares {
        LeastSquares::new(self.dim(), self.lambda)
    }

    /// Pooled objective at `w`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        self.model().objective(w, &self.pooled())
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(ModelError::InvalidConfig("problem has no samples".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(ModelError::InvalidConfig("lambda must be nonnegative".into()));
        }
        for s in self.clients.iter().flatten() {
            if s.x.len() != dim {
                return Err(ModelError::ShapeMismatch(format!("row with {} features, expected {dim}", s.x.len())));
            }
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidConfig("non-finite design entry".into()));
            }
        }
        Ok(())
    }
}

/// Exact minimizer of the pooled ridge objective via the normal equations
/// `(X'X/n + lambda I) w = X'y/n`.
pub fn solve_convex(problem: &ConvexProblem) -> Result<Vec<f64>> {
    problem.validate()?;
    let rows = problem.pooled();
    let (n, d) = (rows.len(), problem.dim());
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].x[j]);
    let y = DVector::from_iterator(n, rows.iter().map(|s| s.y));

    if problem.lambda == 0.0 {
        let sv = x.clone().svd(false, false).singular_values;
        let max = sv.max();
        let rank = sv.iter().filter(|&&s| s > max * 1e-12 * n.max(d) as f64).count();
        if rank < d || max == 0.0 {
            return Err(ModelError::SingularSystem);
        }
    }

    let a = x.transpose() * &x / n as f64 + DMatrix::identity(d, d) * problem.lambda;
    let b = x.transpose() * &y / n as f64;
    let mut w = a.clone().cholesky().ok_or(ModelError::SingularSystem)?.solve(&b);
    // One step of iterative refinement tightens the residual.
    let residual = &b - &a * &w;
    if let Some(chol) = a.clone().cholesky() {
        w += chol.solve(&residual);
    }
    let residual = (&b - &a * &w).norm();
    if residual.is_nan() || residual > 1e-10 * b.norm().max(1.0) {
        return Err(ModelError::SingularSystem);
    }
    Ok(w.iter().copied().collect())
}
