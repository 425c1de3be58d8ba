//! Task-vector transport over a noisy link and merging by task arithmetic.
//!
//! A received task vector is `tau + eps` with per-element variance
//! `kappa * mu_q * ||tau||^2 / d`. All users are decoded from the same
//! received block, so part of the error is shared: a fraction
//! `noise_correlation` of the variance comes from one standard-normal stream
//! common to every user and the rest from the user's own stream.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{self, ParameterSet, ParamsError, TaskVector};
use crate::seeds;
use crate::taskbench::Dataset;
use crate::tinyvit::{self, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("mmse {0} outside (0, 1]")]
    Mmse(f64),
    #[error("kappa must be finite and nonnegative, got {0}")]
    Kappa(f64),
    #[error("noise correlation {0} outside [0, 1]")]
    Correlation(f64),
    #[error("no lambda configured for {0} tasks")]
    MissingLambda(usize),
    #[error("lambda {lambda} for {n} tasks outside [0, 1]")]
    Lambda { n: usize, lambda: f64 },
    #[error("reference accuracy of task `{0}` is zero, normalisation undefined")]
    ZeroReference(String),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kappa: f64,
    /// `lambda_N` keyed by the number of merged tasks.
    pub lambda_table: BTreeMap<usize, f64>,
    pub seed: u64,
    pub noise_correlation: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { kappa: 300.0, lambda_table: default_lambda_table(), seed: 0, noise_correlation: 0.6 }
    }
}

/// Scaling coefficients picked by [`lambda_sweep`] on the default task suite.
pub fn default_lambda_table() -> BTreeMap<usize, f64> {
    [(1, 1.0), (2, 0.8), (3, 0.8), (4, 0.7), (5, 0.6), (6, 0.6), (7, 0.6), (8, 0.5)].into_iter().collect()
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(FusionError::Kappa(self.kappa));
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return Err(FusionError::Correlation(self.noise_correlation));
        }
        for (&n, &lambda) in &self.lambda_table {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(FusionError::Lambda { n, lambda });
            }
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> Result<f64, FusionError> {
        let lambda = *self.lambda_table.get(&n).ok_or(FusionError::MissingLambda(n))?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(FusionError::Lambda { n, lambda });
        }
        Ok(lambda)
    }
}

/// Per-element noise variance for one task vector.
pub fn noise_variance(tau: &TaskVector, mu_q: f64, kappa: f64) -> f64 {
    kappa * mu_q * tau.delta.squared_norm() / tau.delta.total_dim() as f64
}

/// The task vector as received by the server.
///
/// With `kappa = 0` the output equals the input bit for bit (apart from the
/// `is_perturbed` flag).
pub fn transmit_task_vector(tau: &TaskVector, mu_q: f64, tcfg: &TransportConfig) -> Result<TaskVector, FusionError> {
    if !(mu_q > 0.0 && mu_q <= 1.0) {
        return Err(FusionError::Mmse(mu_q));
    }
    tcfg.validate()?;
    let var = noise_variance(tau, mu_q, tcfg.kappa);
    let mut out = tau.clone();
    out.is_perturbed = true;
    out.noise_variance_used = var;
    if var == 0.0 {
        return Ok(out);
    }
    let sd = var.sqrt();
    let (a, b) = (tcfg.noise_correlation.sqrt(), (1.0 - tcfg.noise_correlation).sqrt());
    let mut common = seeds::rng_for(tcfg.seed, &["transport", "common"]);
    let mut own = seeds::rng_for(tcfg.seed, &["transport", "task", &tau.task_id]);
    for g in out.delta.groups_mut() {
        for x in &mut g.values {
            let c: f64 = StandardNormal.sample(&mut common);
            let o: f64 = StandardNormal.sample(&mut own);
            *x += sd * (a * c + b * o);
        }
    }
    Ok(out)
}

/// `base + lambda_N * sum(vectors)`.
pub fn fuse(base: &ParameterSet, vectors: &[TaskVector], tcfg: &TransportConfig) -> Result<ParameterSet, FusionError> {
    let lambda = tcfg.lambda(vectors.len())?;
    Ok(params::add_scaled(base, vectors, lambda)?)
}

/// What is needed to score one task on a merged backbone.
#[derive(Debug, Clone, Copy)]
pub struct TaskEval<'a> {
    pub task_id: &'a str,
    pub head: &'a [f64],
    pub data: &'a Dataset,
    /// Accuracy of the task's own fine-tuned model on `data`.
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAccuracy {
    pub raw: Vec<f64>,
    /// `raw / reference`; may exceed 1.
    pub normalized: Vec<f64>,
    pub mean: f64,
}

/// Accuracy of `merged` on each task, through that task's head, relative to
/// the task's fine-tuned reference.
pub fn normalized_accuracy(
    merged: &ParameterSet,
    cfg: &ModelConfig,
    tasks: &[TaskEval<'_>],
) -> Result<NormalizedAccuracy, FusionError> {
    let mut raw = Vec::with_capacity(tasks.len());
    let mut normalized = Vec::with_capacity(tasks.len());
    for t in tasks {
        if !(t.reference_accuracy > 0.0) {
            return Err(FusionError::ZeroReference(t.task_id.to_string()));
        }
        let acc = tinyvit::evaluate(&tinyvit::with_head(merged, t.head)?, cfg, t.data)?;
        raw.push(acc);
        normalized.push(acc / t.reference_accuracy);
    }
    let mean = if normalized.is_empty() { 0.0 } else { normalized.iter().sum::<f64>() / normalized.len() as f64 };
    Ok(NormalizedAccuracy { raw, normalized, mean })
}

/// The grid `{0.1, 0.2, ..., 1.0}`.
pub fn lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    /// `(lambda, mean normalized accuracy)` for every grid point.
    pub scores: Vec<(f64, f64)>,
    /// First grid point reaching the maximum score.
    pub best: f64,
}

/// Clean merges of `vectors` at each `lambda` in `grid`, scored on
/// held-out data.
pub fn lambda_sweep(
    base: &ParameterSet,
    vectors: &[TaskVector],
    cfg: &ModelConfig,
    tasks: &[TaskEval<'_>],
    grid: &[f64],
) -> Result<LambdaSweep, FusionError> {
    if grid.is_empty() {
        return Err(FusionError::EmptyGrid);
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let merged = params::add_scaled(base, vectors, lambda)?;
        scores.push((lambda, normalized_accuracy(&merged, cfg, tasks)?.mean));
    }
    let best = scores.iter().fold(scores[0], |acc, &s| if s.1 > acc.1 { s } else { acc }).0;
    Ok(LambdaSweep { scores, best })
}
