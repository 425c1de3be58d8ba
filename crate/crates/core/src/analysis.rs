//! Interference analytics for merged models.
//!
//! * weight disentanglement error: how often the merged model's prediction on
//!   a task differs from that task's own scaled task vector applied alone;
//! * the logit-ratio test: `R(x) = z_u(x) / z_d(x)` at the undisturbed
//!   model's predicted class, rejected when `|R - 1| > T`;
//! * first-order (Taylor) checks of the logit shift along a parameter
//!   direction;
//! * cosine-similarity matrices of task vectors;
//! * paired one-sided tests used by the acceptance protocol.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::params::{self, GroupTag, ParameterSet, ParamsError, TaskVector};
use crate::seeds;
use crate::tinyvit::{self, ModelConfig, ModelError, TaskView};

/// Disturbed logits closer to zero than this make the ratio undefined.
pub const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{vectors} task vectors but {datasets} datasets")]
    CountMismatch { vectors: usize, datasets: usize },
    #[error("disturbed logit {0} too close to zero for a ratio")]
    NearZeroDenominator(f64),
    #[error("non-finite logits")]
    NonFinite,
    #[error("beta {0} outside (0, 1)")]
    Beta(f64),
    #[error("variance must be finite and nonnegative, got {0}")]
    Variance(f64),
    #[error("no ratio samples")]
    EmptySamples,
    #[error("need at least two task vectors, got {0}")]
    TooFewVectors(usize),
    #[error("paired samples differ in length or have fewer than two pairs ({0} and {1})")]
    Pairing(usize, usize),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdeReport {
    /// Sum over tasks of the disagreement rates.
    pub xi: f64,
    pub per_task_disagreement: Vec<f64>,
    pub lambda_used: f64,
    pub sample_counts: Vec<usize>,
}

/// Weight disentanglement error of the merge `base + lambda_joint * sum(tau)`
/// against each `base + lambda_single[i] * tau_i`, scored on `tasks[i]`.
pub fn wde(
    base: &ParameterSet,
    vectors: &[TaskVector],
    lambda_single: &[f64],
    lambda_joint: f64,
    tasks: &[TaskView<'_>],
    cfg: &ModelConfig,
) -> Result<WdeReport, AnalysisError> {
    if vectors.len() != tasks.len() || lambda_single.len() != tasks.len() {
        return Err(AnalysisError::CountMismatch { vectors: vectors.len(), datasets: tasks.len() });
    }
    let joint = params::add_scaled(base, vectors, lambda_joint)?;
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut counts = Vec::with_capacity(tasks.len());
    for ((v, &lambda), t) in vectors.iter().zip(lambda_single).zip(tasks) {
        let single = params::add_scaled(base, std::slice::from_ref(v), lambda)?;
        let a = tinyvit::predict(&tinyvit::with_head(&single, t.head)?, cfg, t.data)?;
        let b = tinyvit::predict(&tinyvit::with_head(&joint, t.head)?, cfg, t.data)?;
        let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        per_task.push(if a.is_empty() { 0.0 } else { differ as f64 / a.len() as f64 });
        counts.push(a.len());
    }
    Ok(WdeReport { xi: per_task.iter().sum(), per_task_disagreement: per_task, lambda_used: lambda_joint, sample_counts: counts })
}

fn logits_one(theta: &ParameterSet, cfg: &ModelConfig, x: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    let z = tinyvit::forward(theta, cfg, x, 1)?;
    let z: Vec<f64> = z.row(0).to_vec();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(z)
}

fn ratio_at(zu: &[f64], zd: &[f64]) -> Result<f64, AnalysisError> {
    let c = tinyvit::argmax(ndarray::ArrayView1::from(zu));
    if zd[c].abs() <= RATIO_EPS {
        return Err(AnalysisError::NearZeroDenominator(zd[c]));
    }
    Ok(zu[c] / zd[c])
}

/// `R(x)` for one image.
pub fn logit_ratio(cfg: &ModelConfig, theta_u: &ParameterSet, theta_d: &ParameterSet, x: &[f64]) -> Result<f64, AnalysisError> {
    let zu = logits_one(theta_u, cfg, x)?;
    let zd = logits_one(theta_d, cfg, x)?;
    ratio_at(&zu, &zd)
}

/// Per-class ratios `z_u / z_d`, for diagnostics. Classes with a near-zero
/// disturbed logit give NaN.
pub fn logit_ratio_vector(
    cfg: &ModelConfig,
    theta_u: &ParameterSet,
    theta_d: &ParameterSet,
    x: &[f64],
) -> Result<Vec<f64>, AnalysisError> {
    let zu = logits_one(theta_u, cfg, x)?;
    let zd = logits_one(theta_d, cfg, x)?;
    Ok(zu.iter().zip(&zd).map(|(u, d)| if d.abs() <= RATIO_EPS { f64::NAN } else { u / d }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSamples {
    pub ratios: Vec<f64>,
    /// Images dropped because the disturbed logit was near zero.
    pub skipped: usize,
}

/// `R(x)` for every image of every task, each through its own head, in
/// task then sample order.
pub fn ratio_samples(
    cfg: &ModelConfig,
    theta_u: &ParameterSet,
    theta_d: &ParameterSet,
    tasks: &[TaskView<'_>],
) -> Result<RatioSamples, AnalysisError> {
    let mut out = RatioSamples { ratios: Vec::new(), skipped: 0 };
    for t in tasks {
        let zu = tinyvit::forward(&tinyvit::with_head(theta_u, t.head)?, cfg, &t.data.images, t.data.len())?;
        let zd = tinyvit::forward(&tinyvit::with_head(theta_d, t.head)?, cfg, &t.data.images, t.data.len())?;
        if zu.iter().chain(zd.iter()).any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        for (u, d) in zu.rows().into_iter().zip(zd.rows()) {
            match ratio_at(u.as_slice().unwrap(), d.as_slice().unwrap()) {
                Ok(r) => out.ratios.push(r),
                Err(AnalysisError::NearZeroDenominator(_)) => out.skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// `z(theta + delta) - z(theta)`.
    pub exact: Vec<f64>,
    /// `J delta`, by a central difference with step `h` along `delta`.
    pub linear: Vec<f64>,
}

impl TaylorCheck {
    /// Euclidean norm of `exact - linear`.
    pub fn error(&self) -> f64 {
        self.exact.iter().zip(&self.linear).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

fn shifted(theta: &ParameterSet, delta: &ParameterSet, scale: f64) -> ParameterSet {
    let mut out = theta.clone();
    for (g, d) in out.groups_mut().iter_mut().zip(delta.groups()) {
        for (x, y) in g.values.iter_mut().zip(&d.values) {
            *x += scale * y;
        }
    }
    out
}

pub fn taylor_check(
    cfg: &ModelConfig,
    theta_u: &ParameterSet,
    delta_theta: &ParameterSet,
    x: &[f64],
    h: f64,
) -> Result<TaylorCheck, AnalysisError> {
    theta_u.check_compatible(delta_theta)?;
    let z0 = logits_one(theta_u, cfg, x)?;
    let z1 = logits_one(&shifted(theta_u, delta_theta, 1.0), cfg, x)?;
    let zp = logits_one(&shifted(theta_u, delta_theta, h), cfg, x)?;
    let zm = logits_one(&shifted(theta_u, delta_theta, -h), cfg, x)?;
    Ok(TaylorCheck {
        exact: z1.iter().zip(&z0).map(|(a, b)| a - b).collect(),
        linear: zp.iter().zip(&zm).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
    })
}

/// Mean of `((J u)_c / z_u,c)^2` over images and `directions` standard-normal
/// directions `u`, where `c` is the undisturbed prediction.
///
/// This is the squared Jacobian factor per unit of per-element parameter
/// variance. The `head` group is not perturbed since heads are swapped in per
/// task after fusion.
pub fn ratio_sensitivity(
    cfg: &ModelConfig,
    theta_u: &ParameterSet,
    tasks: &[TaskView<'_>],
    directions: usize,
    h: f64,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let mut rng = seeds::rng_for(seed, &["sensitivity"]);
    let mut acc = 0.0;
    let mut count = 0usize;
    for _ in 0..directions {
        let mut u = theta_u.zeros_like();
        for g in u.groups_mut() {
            if g.tag == GroupTag::Head {
                continue;
            }
            for x in &mut g.values {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        let plus = shifted(theta_u, &u, h);
        let minus = shifted(theta_u, &u, -h);
        for t in tasks {
            let n = t.data.len();
            let logits = |p: &ParameterSet| -> Result<Array2<f64>, AnalysisError> {
                Ok(tinyvit::forward(&tinyvit::with_head(p, t.head)?, cfg, &t.data.images, n)?)
            };
            let (z0, zp, zm) = (logits(theta_u)?, logits(&plus)?, logits(&minus)?);
            for i in 0..n {
                let c = tinyvit::argmax(z0.row(i));
                if z0[[i, c]].abs() <= RATIO_EPS {
                    continue;
                }
                let jd = (zp[[i, c]] - zm[[i, c]]) / (2.0 * h);
                acc += (jd / z0[[i, c]]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(AnalysisError::EmptySamples);
    }
    Ok(acc / count as f64)
}

/// `(J / z_u)^2 * sum_q mu_q`.
pub fn variance_of_ratio(jacobian_row_norm_sq_over_zu_sq: f64, sum_mse: f64) -> f64 {
    jacobian_row_norm_sq_over_zu_sq * sum_mse
}

/// Upper-`beta` quantile of the standard normal.
pub fn z_score(beta: f64) -> Result<f64, AnalysisError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(AnalysisError::Beta(beta));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t: f64,
    pub z_beta: f64,
    pub beta: f64,
    pub variance_estimate: f64,
}

/// `T = z_beta * sqrt(variance)`.
pub fn threshold(beta: f64, variance_estimate: f64) -> Result<Threshold, AnalysisError> {
    if !(variance_estimate >= 0.0 && variance_estimate.is_finite()) {
        return Err(AnalysisError::Variance(variance_estimate));
    }
    let z_beta = z_score(beta)?;
    Ok(Threshold { t: z_beta * variance_estimate.sqrt(), z_beta, beta, variance_estimate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub ratio_samples: Vec<f64>,
    pub threshold: f64,
    pub z_beta: f64,
    pub beta: f64,
    pub reject_rate: f64,
    pub variance_estimate: f64,
}

/// Rejects a sample when `|R - 1| > T`.
pub fn run_hypothesis_test(ratio_samples: Vec<f64>, t: &Threshold) -> Result<HypothesisResult, AnalysisError> {
    if ratio_samples.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let rejected = ratio_samples.iter().filter(|r| (*r - 1.0).abs() > t.t).count();
    Ok(HypothesisResult {
        reject_rate: rejected as f64 / ratio_samples.len() as f64,
        ratio_samples,
        threshold: t.t,
        z_beta: t.z_beta,
        beta: t.beta,
        variance_estimate: t.variance_estimate,
    })
}

/// Pairwise cosine similarities, row-major; the diagonal is exactly 1.
pub fn cosine_matrix(vectors: &[TaskVector]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n = vectors.len();
    if n < 2 {
        return Err(AnalysisError::TooFewVectors(n));
    }
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = params::cosine_similarity(&vectors[i], &vectors[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Mean and maximum of the strictly upper triangle.
pub fn offdiag_stats(m: &[Vec<f64>]) -> (f64, f64) {
    let vals: Vec<f64> = (0..m.len()).flat_map(|i| (i + 1..m.len()).map(move |j| m[i][j])).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (vals.iter().sum::<f64>() / vals.len() as f64, vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a - factor * b) > 0`.
    pub p_value: f64,
}

impl PairedTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Paired one-sided t-test of `a_i - factor * b_i > 0`.
pub fn paired_test(a: &[f64], b: &[f64], factor: f64) -> Result<PairedTest, AnalysisError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(AnalysisError::Pairing(a.len(), b.len()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - factor * y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (t, p) = if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        (mean.signum() * f64::INFINITY, p)
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest { n, mean_diff: mean, t, p_value: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::tests::tiny_task;
    use crate::params::tests::set;
    use crate::tinyvit::tests::small_cfg;
    use approx::assert_relative_eq;

    fn tv(values: &[&[f64]], id: &str, user: usize) -> TaskVector {
        TaskVector::clean(set(values), id, user).unwrap()
    }

    fn scaled(p: &ParameterSet, s: f64) -> ParameterSet {
        let mut out = p.clone();
        for g in out.groups_mut() {
            for x in &mut g.values {
                *x *= s;
            }
        }
        out
    }

    fn direction(p: &ParameterSet, seed: u64) -> ParameterSet {
        let mut rng = seeds::rng(seed);
        let mut out = p.zeros_like();
        for g in out.groups_mut() {
            for x in &mut g.values {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        out
    }

    #[test]
    fn wde_trivial_cases() {
        let cfg = small_cfg();
        let base = tinyvit::init_model(&cfg).unwrap();
        let data = tiny_task(&cfg);
        let head = tinyvit::task_head(&cfg, "t");
        let view = TaskView { data: &data.test, head: &head };
        let d = direction(&base, 1);
        let v = TaskVector::clean(scaled(&d, 0.05), "t", 1).unwrap();
        let one = wde(&base, &[v.clone()], &[0.7], 0.7, &[view], &cfg).unwrap();
        assert_eq!(one.xi, 0.0);
        assert_eq!(one.sample_counts, vec![data.test.len()]);
        let zero = TaskVector::clean(base.zeros_like(), "z", 2).unwrap();
        let two = wde(&base, &[zero.clone(), zero], &[1.0, 1.0], 0.5, &[view, view], &cfg).unwrap();
        assert_eq!(two.xi, 0.0);
        assert!(matches!(wde(&base, &[v], &[1.0, 1.0], 0.5, &[view, view], &cfg), Err(AnalysisError::CountMismatch { .. })));
    }

    #[test]
    fn wde_is_sum_of_disagreements() {
        let cfg = small_cfg();
        let base = tinyvit::init_model(&cfg).unwrap();
        let data = tiny_task(&cfg);
        let head = tinyvit::task_head(&cfg, "t");
        let view = TaskView { data: &data.test, head: &head };
        let a = TaskVector::clean(scaled(&direction(&base, 2), 0.5), "a", 1).unwrap();
        let b = TaskVector::clean(scaled(&direction(&base, 3), 0.5), "b", 2).unwrap();
        let r = wde(&base, &[a, b], &[1.0, 1.0], 0.5, &[view, view], &cfg).unwrap();
        assert!(r.xi > 0.0);
        assert_relative_eq!(r.xi, r.per_task_disagreement.iter().sum::<f64>());
        assert!(r.per_task_disagreement.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn ratio_identities() {
        let cfg = small_cfg();
        let theta = tinyvit::with_head(&tinyvit::init_model(&cfg).unwrap(), &tinyvit::task_head(&cfg, "t")).unwrap();
        let data = tiny_task(&cfg);
        let x = data.test.image(0);
        assert_eq!(logit_ratio(&cfg, &theta, &theta, x).unwrap(), 1.0);
        // Doubling the head doubles every logit.
        let mut doubled = theta.clone();
        let last = doubled.groups().len() - 1;
        doubled.groups_mut()[last].values.iter_mut().for_each(|v| *v *= 2.0);
        assert_relative_eq!(logit_ratio(&cfg, &theta, &doubled, x).unwrap(), 0.5, epsilon = 1e-12);
        let per_class = logit_ratio_vector(&cfg, &theta, &doubled, x).unwrap();
        assert!(per_class.iter().all(|r| (r - 0.5).abs() < 1e-12));
        let mut dead = theta.clone();
        dead.groups_mut()[last].values.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(logit_ratio(&cfg, &theta, &dead, x), Err(AnalysisError::NearZeroDenominator(_))));
        let view = TaskView { data: &data.test, head: &tinyvit::task_head(&cfg, "t") };
        let s = ratio_samples(&cfg, &theta, &theta, &[view]).unwrap();
        assert!(s.ratios.iter().all(|&r| r == 1.0));
        assert_eq!(s.ratios.len() + s.skipped, data.test.len());
    }

    #[test]
    fn small_perturbation_matches_first_order() {
        let cfg = small_cfg();
        let theta = tinyvit::with_head(&tinyvit::init_model(&cfg).unwrap(), &tinyvit::task_head(&cfg, "t")).unwrap();
        let data = tiny_task(&cfg);
        let d = scaled(&direction(&theta, 9), 1e-4);
        let disturbed = shifted(&theta, &d, 1.0);
        for i in 0..5 {
            let x = data.test.image(i);
            let r = logit_ratio(&cfg, &theta, &disturbed, x).unwrap();
            let zu = logits_one(&theta, &cfg, x).unwrap();
            let c = tinyvit::argmax(ndarray::ArrayView1::from(&zu[..]));
            let lin = taylor_check(&cfg, &theta, &d, x, 1e-2).unwrap().linear[c];
            // R - 1 = -(z_d - z_u) / z_d to first order.
            let predicted = -lin / (zu[c] + lin);
            assert!(((r - 1.0) - predicted).abs() <= 0.1 * predicted.abs(), "{r} vs {predicted}");
        }
    }

    #[test]
    fn taylor_error_is_second_order() {
        let cfg = small_cfg();
        let theta = tinyvit::with_head(&tinyvit::init_model(&cfg).unwrap(), &tinyvit::task_head(&cfg, "t")).unwrap();
        let data = tiny_task(&cfg);
        let x = data.test.image(3);
        let zero = taylor_check(&cfg, &theta, &theta.zeros_like(), x, 1e-3).unwrap();
        assert!(zero.exact.iter().chain(&zero.linear).all(|&v| v == 0.0));
        let d = direction(&theta, 4);
        let e1 = taylor_check(&cfg, &theta, &scaled(&d, 2e-3), x, 1e-3).unwrap().error();
        let e2 = taylor_check(&cfg, &theta, &scaled(&d, 1e-3), x, 1e-3).unwrap().error();
        let ratio = e1 / e2;
        assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn taylor_is_exact_for_linear_models() {
        // Logits are affine in the head weights.
        let cfg = small_cfg();
        let theta = tinyvit::init_model(&cfg).unwrap();
        let mut d = theta.zeros_like();
        let last = d.groups().len() - 1;
        for (k, v) in d.groups_mut()[last].values.iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin();
        }
        let data = tiny_task(&cfg);
        let c = taylor_check(&cfg, &theta, &d, data.test.image(0), 0.5).unwrap();
        for (a, b) in c.exact.iter().zip(&c.linear) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn threshold_and_test() {
        assert_eq!(threshold(0.5, 3.0).unwrap().t, 0.0);
        assert_relative_eq!(z_score(0.025).unwrap(), 1.959_963_984_540_054, epsilon = 1e-9);
        let t1 = threshold(0.05, 1.0).unwrap();
        let t4 = threshold(0.05, 4.0).unwrap();
        assert_relative_eq!(t4.t, 2.0 * t1.t, epsilon = 1e-12);
        for b in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(threshold(b, 1.0), Err(AnalysisError::Beta(_))));
        }
        assert!(matches!(threshold(0.1, -1.0), Err(AnalysisError::Variance(_))));
        let ones = run_hypothesis_test(vec![1.0; 10], &t1).unwrap();
        assert_eq!(ones.reject_rate, 0.0);
        let zero_t = Threshold { t: 0.0, ..t1 };
        assert_eq!(run_hypothesis_test(vec![1.0, 1.0 + 1e-15, 1.0], &zero_t).unwrap().reject_rate, 1.0 / 3.0);
        assert!(matches!(run_hypothesis_test(vec![], &t1), Err(AnalysisError::EmptySamples)));
        assert_eq!(variance_of_ratio(2.0, 0.0), 0.0);
        assert_eq!(variance_of_ratio(2.0, 0.6), 2.0 * variance_of_ratio(2.0, 0.3));
    }

    #[test]
    fn cosine_matrix_cases() {
        let a = tv(&[&[1.0, 0.0], &[0.0]], "a", 1);
        let b = tv(&[&[0.0, 2.0], &[0.0]], "b", 2);
        let m = cosine_matrix(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(m.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        let m = cosine_matrix(&[a.clone(), b]).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(cosine_matrix(&[a.clone()]), Err(AnalysisError::TooFewVectors(1))));
        let z = tv(&[&[0.0, 0.0], &[0.0]], "z", 3);
        assert!(cosine_matrix(&[a, z]).is_err());
        let (mean, max) = offdiag_stats(&[vec![1.0, 0.2, 0.4], vec![0.2, 1.0, -0.3], vec![0.4, -0.3, 1.0]]);
        assert!((mean - 0.1).abs() < 1e-12);
        assert_eq!(max, 0.4);
    }

    #[test]
    fn paired_test_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 1.0, 2.5, 2.0];
        let r = paired_test(&a, &b, 1.0).unwrap();
        // d = [0.5, 1, 0.5, 2]: mean 1, sd sqrt(0.5), t = 1 / (sqrt(0.5)/2).
        assert_relative_eq!(r.mean_diff, 1.0);
        assert_relative_eq!(r.t, 2.0 / 0.5_f64.sqrt(), epsilon = 1e-12);
        // One-sided p for t = 2.828 with 3 degrees of freedom.
        assert!((r.p_value - 0.033).abs() < 1e-3, "{}", r.p_value);
        assert!(paired_test(&a, &b, 3.0).unwrap().p_value > 0.5);
        assert!(matches!(paired_test(&a, &b[..3], 1.0), Err(AnalysisError::Pairing(4, 3))));
        let same = paired_test(&[2.0, 2.0], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(same.p_value, 0.0);
    }

    #[test]
    fn sensitivity_is_positive_and_seeded() {
        let cfg = small_cfg();
        let theta = tinyvit::init_model(&cfg).unwrap();
        let data = tiny_task(&cfg);
        let head = tinyvit::task_head(&cfg, "t");
        let view = TaskView { data: &data.test, head: &head };
        let a = ratio_sensitivity(&cfg, &theta, &[view], 2, 1e-4, 1).unwrap();
        assert!(a > 0.0 && a.is_finite());
        assert_eq!(a, ratio_sensitivity(&cfg, &theta, &[view], 2, 1e-4, 1).unwrap());
    }
}
