//! Worst-case noise covariance design.
//!
//! Users transmit at full power, so the adversary picks `C_z` in
//! `{C = C^H, C >= 0, tr C <= P_N}` to minimise either
//!
//! * the sum rate `ln det(I + S C^{-1})` with `S = H P H^H` (P1), or
//! * the rate of the strongest user, decoded last under SIC (P2).
//!
//! P1 is solved in the eigenbasis of `S`: with `S = U diag(u) U^H`, the noise
//! is `C = U diag(s) U^H` where each `s_i` minimises
//! `ln(1 + u_i / s_i) + nu * s_i`, i.e.
//!
//! ```text
//! s_i(nu) = (u_i / 2) * (sqrt(1 + 4 / (u_i nu)) - 1)      (u_i > 0)
//! s_i     = 0                                             (u_i = 0)
//! ```
//!
//! and `nu` is found by bisection so that `sum_i s_i = P_N`.
//!
//! P2 aligns the noise with the strongest user's channel. The exact optimum
//! is rank one, so it is mixed with a small isotropic part to stay invertible.
//!
//! [`oracle_min_covariance`] is an independent projected-gradient solver used
//! to certify both closed forms on small instances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{column, sic_order};
use crate::linalg::{self, cholesky, eigh, from_eig, hermitian_part, identity, logdet_chol, outer, quad_inv, CMat, CVec};

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("bisection interval [{lo}, {hi}] does not bracket a root (f(lo)={flo}, f(hi)={fhi})")]
    NotBracketing { lo: f64, hi: f64, flo: f64, fhi: f64 },
    #[error("channel matrix is all zero")]
    ZeroChannel,
    #[error("noise power must be positive, got {0}")]
    NoisePower(f64),
    #[error("regularisation weight {0} outside (0, 0.1]")]
    DeltaOutOfRange(f64),
    #[error("objective became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Ideal,
    WorstSumRate,
    WorstStrongestUser,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Ideal, NoiseKind::WorstSumRate, NoiseKind::WorstStrongestUser];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Ideal => "ideal",
            NoiseKind::WorstSumRate => "worst_sum_rate",
            NoiseKind::WorstStrongestUser => "worst_strongest_user",
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown regime `{s}` (expected ideal, worst_sum_rate or worst_strongest_user)"))
    }
}

/// A noise covariance chosen by (or standing in for) the adversary.
#[derive(Debug, Clone)]
pub struct NoiseDesign {
    pub kind: NoiseKind,
    pub cov: CMat,
    /// Bisection multiplier, P1 only (0 otherwise).
    pub nu: f64,
    /// Isotropic mixing weight, P2 only (0 otherwise).
    pub delta_reg: f64,
    /// Sum rate (ideal, P1) or strongest-user rate (P2) at this design.
    pub achieved_objective: f64,
}

/// Serialisable summary of a [`NoiseDesign`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDesignRecord {
    pub kind: NoiseKind,
    pub nu: f64,
    pub delta_reg: f64,
    pub eigenvalues: Vec<f64>,
    pub achieved_objective: f64,
}

impl NoiseDesign {
    pub fn record(&self) -> NoiseDesignRecord {
        NoiseDesignRecord {
            kind: self.kind,
            nu: self.nu,
            delta_reg: self.delta_reg,
            eigenvalues: eigh(&self.cov).0,
            achieved_objective: self.achieved_objective,
        }
    }
}

/// `(P_N / N_R) I`.
pub fn ideal_covariance(noise_power: f64, n_rx: usize) -> CMat {
    identity(n_rx).scale(noise_power / n_rx as f64)
}

/// `H diag(p) H^H`.
pub fn signal_covariance(h: &CMat, powers: &[f64]) -> CMat {
    let mut s = CMat::zeros(h.nrows(), h.nrows());
    for (q, &p) in powers.iter().enumerate() {
        s += outer(&column(h, q)).scale(p);
    }
    linalg::hermitian_part(&s)
}

/// `ln det(I + S C^{-1})` for positive definite `C`.
pub fn sum_rate_objective(signal: &CMat, cov: &CMat) -> Option<f64> {
    let ch_c = cholesky(cov)?;
    let ch_t = cholesky(&(signal + cov))?;
    Some(logdet_chol(&ch_t) - logdet_chol(&ch_c))
}

/// `ln(1 + p h^H C^{-1} h)` for positive definite `C`.
pub fn single_user_objective(h: &CVec, power: f64, cov: &CMat) -> Option<f64> {
    let ch = cholesky(cov)?;
    Some((power * quad_inv(&ch, h)).ln_1p())
}

/// Bisection for a root of a monotone function on `[lo, hi]`.
///
/// Stops once the bracket is narrower than `tol` and returns its midpoint.
pub fn bisect<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, AdversaryError> {
    let (mut lo, mut hi) = (lo.min(hi), lo.max(hi));
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if !(flo.signum() != fhi.signum()) || flo.is_nan() || fhi.is_nan() {
        return Err(AdversaryError::NotBracketing { lo, hi, flo, fhi });
    }
    let lo_sign = flo.signum();
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Noise eigenvalues `s_i(nu)` for signal eigenvalues `u_i`.
pub fn noise_eigenvalues(upsilon: &[f64], nu: f64) -> Vec<f64> {
    upsilon
        .iter()
        .map(|&u| if u > 0.0 { 0.5 * u * ((1.0 + 4.0 / (u * nu)).sqrt() - 1.0) } else { 0.0 })
        .collect()
}

/// Eigenvalues below this fraction of the largest are treated as zero.
const NULL_SPACE_RTOL: f64 = 1e-10;

/// Closed-form worst-case covariance for the sum rate.
///
/// `tol` bounds the relative error of the trace before the final rescaling
/// to exactly `noise_power`.
pub fn solve_p1(h: &CMat, power_caps: &[f64], noise_power: f64, tol: f64) -> Result<NoiseDesign, AdversaryError> {
    check_inputs(h, power_caps, noise_power)?;
    let s = signal_covariance(h, power_caps);
    let (mut ups, vecs) = eigh(&s);
    let top = ups.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(AdversaryError::ZeroChannel);
    }
    for u in &mut ups {
        if *u <= NULL_SPACE_RTOL * top {
            *u = 0.0;
        }
    }
    // Normalised units: signal / P_N, so the target trace is 1.
    let ups_n: Vec<f64> = ups.iter().map(|u| u / noise_power).collect();
    let excess = |log_nu: f64| noise_eigenvalues(&ups_n, log_nu.exp()).iter().sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while excess(lo) <= 0.0 {
        lo -= 8.0;
        if lo < -700.0 {
            return Err(AdversaryError::NotBracketing { lo, hi, flo: excess(lo), fhi: excess(hi) });
        }
    }
    while excess(hi) >= 0.0 {
        hi += 8.0;
        if hi > 700.0 {
            return Err(AdversaryError::NotBracketing { lo, hi, flo: excess(lo), fhi: excess(hi) });
        }
    }
    let log_nu = bisect(excess, lo, hi, tol.max(1e-15))?;
    let mut sig = noise_eigenvalues(&ups_n, log_nu.exp());
    let total: f64 = sig.iter().sum();
    for x in &mut sig {
        *x *= noise_power / total;
    }
    let achieved: f64 = ups.iter().zip(&sig).filter(|(u, _)| **u > 0.0).map(|(u, s)| (u / s).ln_1p()).sum();
    Ok(NoiseDesign {
        kind: NoiseKind::WorstSumRate,
        cov: from_eig(&sig, &vecs),
        nu: log_nu.exp() / noise_power,
        delta_reg: 0.0,
        achieved_objective: achieved,
    })
}

/// Index of the user decoded last (largest `p_q ||h_q||^2`).
pub fn strongest_user(h: &CMat, power_caps: &[f64]) -> usize {
    *sic_order(h, power_caps).last().expect("at least one user")
}

/// Noise aligned with the strongest user's channel, mixed with isotropic noise:
/// `(1 - delta) P_N h h^H / ||h||^2 + delta (P_N / N_R) I`.
pub fn solve_p2(h: &CMat, power_caps: &[f64], noise_power: f64, delta_reg: f64) -> Result<NoiseDesign, AdversaryError> {
    check_inputs(h, power_caps, noise_power)?;
    if !(delta_reg > 0.0 && delta_reg <= 0.1) {
        return Err(AdversaryError::DeltaOutOfRange(delta_reg));
    }
    let q = strongest_user(h, power_caps);
    let hq = column(h, q);
    let energy = hq.norm_squared();
    if energy == 0.0 {
        return Err(AdversaryError::ZeroChannel);
    }
    let aligned = outer(&hq).scale((1.0 - delta_reg) * noise_power / energy);
    let cov = linalg::hermitian_part(&(aligned + ideal_covariance(delta_reg * noise_power, h.nrows())));
    let achieved = single_user_objective(&hq, power_caps[q], &cov).ok_or(AdversaryError::NonFinite(0))?;
    Ok(NoiseDesign { kind: NoiseKind::WorstStrongestUser, cov, nu: 0.0, delta_reg, achieved_objective: achieved })
}

/// The isotropic benchmark, with its sum rate as the objective.
pub fn ideal_design(h: &CMat, power_caps: &[f64], noise_power: f64) -> Result<NoiseDesign, AdversaryError> {
    check_inputs(h, power_caps, noise_power)?;
    let cov = ideal_covariance(noise_power, h.nrows());
    let achieved = sum_rate_objective(&signal_covariance(h, power_caps), &cov).ok_or(AdversaryError::NonFinite(0))?;
    Ok(NoiseDesign { kind: NoiseKind::Ideal, cov, nu: 0.0, delta_reg: 0.0, achieved_objective: achieved })
}

/// Noise seen by the receiver in one regime.
///
/// Every regime shares the isotropic thermal floor. The worst-case regimes add
/// an adversarial jammer of power `jammer_power` shaped by P1 or P2; the ideal
/// regime has no jammer. `noise_power` of the returned design is the total
/// trace budget `floor_power + jammer_power` for the worst cases.
pub fn regime_design(
    kind: NoiseKind,
    h: &CMat,
    power_caps: &[f64],
    floor_power: f64,
    jammer_power: f64,
    delta_reg: f64,
    tol: f64,
) -> Result<NoiseDesign, AdversaryError> {
    check_inputs(h, power_caps, floor_power)?;
    let floor = ideal_covariance(floor_power, h.nrows());
    let jammer = match kind {
        NoiseKind::Ideal => return ideal_design(h, power_caps, floor_power),
        NoiseKind::WorstSumRate => solve_p1(h, power_caps, jammer_power, tol)?,
        NoiseKind::WorstStrongestUser => solve_p2(h, power_caps, jammer_power, delta_reg)?,
    };
    let cov = linalg::hermitian_part(&(&jammer.cov + floor));
    let signal = signal_covariance(h, power_caps);
    let achieved = match kind {
        NoiseKind::WorstStrongestUser => {
            let q = strongest_user(h, power_caps);
            single_user_objective(&column(h, q), power_caps[q], &cov)
        }
        _ => sum_rate_objective(&signal, &cov),
    }
    .ok_or(AdversaryError::NonFinite(0))?;
    Ok(NoiseDesign { cov, achieved_objective: achieved, ..jammer })
}

fn check_inputs(h: &CMat, power_caps: &[f64], noise_power: f64) -> Result<(), AdversaryError> {
    if !(noise_power > 0.0) {
        return Err(AdversaryError::NoisePower(noise_power));
    }
    if power_caps.len() != h.ncols() || h.ncols() == 0 {
        return Err(AdversaryError::Dimensions(format!("{} power caps for {} users", power_caps.len(), h.ncols())));
    }
    if h.iter().all(|z| z.norm_sqr() == 0.0) {
        return Err(AdversaryError::ZeroChannel);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleObjective {
    SumRate,
    StrongestUser,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub design: NoiseDesign,
    /// Best objective seen after each iteration (non-increasing).
    pub best_trace: Vec<f64>,
}

/// Eigenvalue floor of the oracle iterates, relative to the trace budget.
/// Keeps `C^{-1}` finite; the optimum itself may be singular.
pub const ORACLE_EIG_FLOOR: f64 = 1e-9;

/// Gradient minimisation of the chosen objective over the noise set.
///
/// Steps are taken in whitened coordinates: with `W = C^{1/2} G C^{1/2}`
/// projected orthogonally to the trace constraint, the update is
/// `C^{1/2} exp(-eta W / |W|) C^{1/2}` followed by a trace rescale. Iterates
/// stay positive definite and may approach a singular optimum geometrically.
/// The objective is monotone decreasing in `C`, so the optimum uses the whole
/// budget. The step grows after improving iterations and shrinks otherwise.
/// `init` is projected onto the budget set (eigenvalues shifted and clipped at
/// [`ORACLE_EIG_FLOOR`]) and defaults to the isotropic covariance.
pub fn oracle_min_covariance(
    h: &CMat,
    power_caps: &[f64],
    noise_power: f64,
    objective: OracleObjective,
    iters: usize,
    step: f64,
    init: Option<&CMat>,
) -> Result<OracleResult, AdversaryError> {
    check_inputs(h, power_caps, noise_power)?;
    let n = h.nrows();
    // Normalised problem: trace budget 1.
    let signal = signal_covariance(h, power_caps).unscale(noise_power);
    let strongest = strongest_user(h, power_caps);
    let hq = column(h, strongest).unscale(noise_power.sqrt());
    let pq = power_caps[strongest];

    let eval = |c: &CMat| -> Option<f64> {
        match objective {
            OracleObjective::SumRate => sum_rate_objective(&signal, c),
            OracleObjective::StrongestUser => single_user_objective(&hq, pq, c),
        }
    };
    let grad = |c: &CMat| -> Option<CMat> {
        let ch = cholesky(c)?;
        let c_inv = linalg::inverse_hpd(&ch);
        Some(match objective {
            OracleObjective::SumRate => {
                let ch_t = cholesky(&(&signal + c))?;
                linalg::inverse_hpd(&ch_t) - c_inv
            }
            OracleObjective::StrongestUser => {
                let y = &c_inv * &hq;
                let denom = 1.0 + pq * hq.dotc(&y).re;
                outer(&y).scale(-pq / denom)
            }
        })
    };
    let project = |c: &CMat| -> CMat {
        let (vals, vecs) = eigh(c);
        from_eig(&project_spectrum(&vals, ORACLE_EIG_FLOOR, 1.0), &vecs)
    };

    let mut current = match init {
        Some(c0) => project(&c0.unscale(noise_power)),
        None => ideal_covariance(1.0, n),
    };
    let mut f_cur = eval(&current).ok_or(AdversaryError::NonFinite(0))?;
    let mut best = (current.clone(), f_cur);
    let mut eta = step;
    let mut best_trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let g = grad(&current).ok_or(AdversaryError::NonFinite(it))?;
        let (cv, cu) = eigh(&current);
        let root = from_eig(&cv.iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<_>>(), &cu);
        let white = hermitian_part(&(&root * &g * &root));
        // Drop the component that changes the trace (normal `C` in whitened
        // coordinates) so the step is a descent direction on the budget set.
        let normal = (&current * &white).trace().re / (&current * &current).trace().re;
        let white = &white - current.scale(normal);
        let wn = linalg::frobenius(&white);
        if wn == 0.0 || !wn.is_finite() {
            best_trace.push(best.1);
            continue;
        }
        let (wv, wu) = eigh(&white);
        let expo = from_eig(&wv.iter().map(|v| (-eta * v / wn).exp()).collect::<Vec<_>>(), &wu);
        let moved = hermitian_part(&(&root * expo * &root));
        let candidate = moved.unscale(linalg::trace_re(&moved));
        match eval(&candidate) {
            Some(f) if f.is_finite() && f < f_cur => {
                current = candidate;
                f_cur = f;
                eta = (eta * 1.2).min(1.0);
                if f < best.1 {
                    best = (current.clone(), f);
                }
            }
            Some(f) if !f.is_finite() => return Err(AdversaryError::NonFinite(it)),
            _ => eta *= 0.5,
        }
        best_trace.push(best.1);
        if eta < 1e-16 {
            best_trace.resize(iters, best.1);
            break;
        }
    }
    let kind = match objective {
        OracleObjective::SumRate => NoiseKind::WorstSumRate,
        OracleObjective::StrongestUser => NoiseKind::WorstStrongestUser,
    };
    Ok(OracleResult {
        design: NoiseDesign { kind, cov: best.0.scale(noise_power), nu: 0.0, delta_reg: 0.0, achieved_objective: best.1 },
        best_trace,
    })
}

/// Euclidean projection of a spectrum onto `{x >= floor, sum x = budget}`:
/// shift every eigenvalue by a common offset, then clip at the floor.
pub fn project_spectrum(values: &[f64], floor: f64, budget: f64) -> Vec<f64> {
    let clip = |theta: f64| values.iter().map(move |v| (v - theta).max(floor));
    let excess = |theta: f64| clip(theta).sum::<f64>() - budget;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - budget;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let theta = bisect(excess, lo, hi, 1e-15 * budget.max(hi.abs())).unwrap_or(0.0);
    let out: Vec<f64> = clip(theta).collect();
    let total: f64 = out.iter().sum();
    out.into_iter().map(|x| x * budget / total).collect()
}

/// Outcome of checking a closed-form P1 design against the oracle.
#[derive(Debug, Clone)]
pub struct Certification {
    pub design: NoiseDesign,
    pub closed_form_objective: f64,
    pub oracle_objective: f64,
    /// True when the oracle beat the closed form by more than 1e-2 relative
    /// and its design was returned instead.
    pub replaced: bool,
}

pub const CERTIFY_RTOL: f64 = 1e-2;

/// Runs the oracle from the isotropic start and keeps whichever design has
/// the lower sum rate (the oracle only if better by more than [`CERTIFY_RTOL`]).
pub fn certify_p1(
    h: &CMat,
    power_caps: &[f64],
    noise_power: f64,
    iters: usize,
) -> Result<Certification, AdversaryError> {
    let closed = solve_p1(h, power_caps, noise_power, 1e-13)?;
    let oracle = oracle_min_covariance(h, power_caps, noise_power, OracleObjective::SumRate, iters, 0.05, None)?;
    let (c, o) = (closed.achieved_objective, oracle.design.achieved_objective);
    let replaced = o < c && (c - o) / o.abs().max(f64::MIN_POSITIVE) > CERTIFY_RTOL;
    if replaced {
        log::warn!("oracle sum rate {o} beats closed-form P1 {c} by more than {CERTIFY_RTOL}; using oracle design");
    }
    Ok(Certification {
        design: if replaced { oracle.design } else { closed },
        closed_form_objective: c,
        oracle_objective: o,
        replaced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, C64};
    use crate::seeds;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn instance(n: usize, q: usize, seed: u64) -> (CMat, Vec<f64>) {
        let mut rng = seeds::rng(seed);
        let h = CMat::from_fn(n, q, |_, _| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)));
        let p = (0..q).map(|_| rng.random_range(0.5..2.0)).collect();
        (h, p)
    }

    #[test]
    fn ideal_covariance_examples() {
        let c1 = ideal_covariance(2.5, 1);
        assert_eq!(c1[(0, 0)], c(2.5));
        let c4 = ideal_covariance(3.0, 4);
        assert!((linalg::trace_re(&c4) - 3.0).abs() < 1e-15);
        let (vals, _) = eigh(&c4);
        assert!(vals.iter().all(|v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn bisect_examples() {
        assert!((bisect(|x| x - 1.0, 0.0, 2.0, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert!((bisect(|x| 3.0 - 2.0 * x, -10.0, 10.0, 1e-10).unwrap() - 1.5).abs() < 1e-10);
        assert!(matches!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-9), Err(AdversaryError::NotBracketing { .. })));
    }

    #[test]
    fn bisection_matches_grid_search() {
        let (h, p) = instance(4, 3, 11);
        let (ups, _) = eigh(&signal_covariance(&h, &p));
        let ups: Vec<f64> = ups.into_iter().map(|u| if u > 1e-9 { u } else { 0.0 }).collect();
        let budget = 2.0;
        let f = |log_nu: f64| noise_eigenvalues(&ups, log_nu.exp()).iter().sum::<f64>() - budget;
        let root = bisect(f, -20.0, 20.0, 1e-9).unwrap();
        // Grid oracle over log nu.
        let grid_best = (0..=400_000)
            .map(|i| -20.0 + 40.0 * i as f64 / 400_000.0)
            .min_by(|a, b| f(*a).abs().total_cmp(&f(*b).abs()))
            .unwrap();
        assert!((root - grid_best).abs() <= 1e-4 + 1e-9, "{root} vs {grid_best}");
    }

    #[test]
    fn noise_eigenvalues_decrease_in_nu() {
        let ups = [0.0, 0.3, 2.0, 40.0];
        let mut prev = noise_eigenvalues(&ups, 1e-3);
        for k in 1..40 {
            let cur = noise_eigenvalues(&ups, 1e-3 * 1.5f64.powi(k));
            for (a, b) in cur.iter().zip(&prev) {
                assert!(a <= b);
            }
            prev = cur;
        }
        assert_eq!(prev[0], 0.0);
    }

    #[test]
    fn p1_scalar_case_uses_whole_budget() {
        let h = CMat::from_row_slice(1, 1, &[c(0.7)]);
        let d = solve_p1(&h, &[1.0], 3.0, 1e-12).unwrap();
        assert!((d.cov[(0, 0)].re - 3.0).abs() < 1e-12);
        assert!((d.achieved_objective - (0.49f64 / 3.0).ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn p1_properties_on_random_instances() {
        for seed in 0..15 {
            let (h, p) = instance(4, 3, seed);
            let d = solve_p1(&h, &p, 1.7, 1e-12).unwrap();
            let s = signal_covariance(&h, &p);
            assert!(linalg::hermitian_defect(&d.cov) < 1e-12);
            assert!(linalg::trace_re(&d.cov) <= 1.7 * (1.0 + 1e-9));
            assert!(linalg::min_eigenvalue(&d.cov) >= -1e-12);
            let comm = &d.cov * &s - &s * &d.cov;
            assert!(linalg::frobenius(&comm) <= 1e-9 * linalg::frobenius(&s).max(1.0));
            let ideal = ideal_design(&h, &p, 1.7).unwrap();
            assert!(d.achieved_objective < ideal.achieved_objective);
            // Objective consistent with the generic logdet once the null space is padded.
            let padded = &d.cov + identity(4).scale(1e-8);
            let direct = sum_rate_objective(&s, &padded).unwrap();
            assert!((direct - d.achieved_objective).abs() < 1e-6 * d.achieved_objective);
        }
    }

    #[test]
    fn p1_matches_oracle() {
        for seed in 0..6 {
            let (h, p) = instance(4, 3, 100 + seed);
            let closed = solve_p1(&h, &p, 1.0, 1e-12).unwrap();
            let oracle = oracle_min_covariance(&h, &p, 1.0, OracleObjective::SumRate, 3000, 0.05, None).unwrap();
            let rel = (closed.achieved_objective - oracle.design.achieved_objective).abs() / oracle.design.achieved_objective;
            assert!(rel < 1e-3, "seed {seed}: closed {} oracle {}", closed.achieved_objective, oracle.design.achieved_objective);
        }
    }

    #[test]
    fn oracle_started_at_closed_form_cannot_improve() {
        let (h, p) = instance(5, 2, 7);
        let closed = solve_p1(&h, &p, 1.0, 1e-12).unwrap();
        let init = &closed.cov + identity(5).scale(1e-9);
        let oracle = oracle_min_covariance(&h, &p, 1.0, OracleObjective::SumRate, 300, 0.01, Some(&init)).unwrap();
        let gain = (closed.achieved_objective - oracle.design.achieved_objective) / closed.achieved_objective;
        assert!(gain <= 1e-3, "{gain}");
        assert!(oracle.best_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn oracle_scalar_case() {
        let h = CMat::from_row_slice(1, 1, &[c(1.0)]);
        let r = oracle_min_covariance(&h, &[1.0], 2.0, OracleObjective::SumRate, 50, 0.1, None).unwrap();
        assert!((r.design.cov[(0, 0)].re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn p2_properties() {
        let h = CMat::from_row_slice(1, 2, &[c(1.0), c(2.0)]);
        let d = solve_p2(&h, &[1.0, 1.0], 2.0, 1e-3).unwrap();
        assert!((d.cov[(0, 0)].re - 2.0).abs() < 1e-12);

        for seed in 0..10 {
            let (h, p) = instance(4, 3, 40 + seed);
            let q = strongest_user(&h, &p);
            let d = solve_p2(&h, &p, 1.0, 1e-3).unwrap();
            assert!(linalg::trace_re(&d.cov) <= 1.0 + 1e-9);
            let ideal = single_user_objective(&column(&h, q), p[q], &ideal_covariance(1.0, 4)).unwrap();
            assert!(d.achieved_objective <= ideal);
            let oracle = oracle_min_covariance(&h, &p, 1.0, OracleObjective::StrongestUser, 2000, 0.05, None).unwrap();
            let rel = (d.achieved_objective - oracle.design.achieved_objective).abs() / oracle.design.achieved_objective;
            assert!(rel < 1e-2, "{rel}");
        }
    }

    #[test]
    fn p2_aligns_with_strongest_channel_as_delta_vanishes() {
        let (h, p) = instance(4, 3, 3);
        let q = strongest_user(&h, &p);
        let hq = column(&h, q).normalize();
        let d = solve_p2(&h, &p, 1.0, 1e-9).unwrap();
        let (_, vecs) = eigh(&d.cov);
        let top = vecs.column(3).into_owned();
        assert!((top.dotc(&hq).norm() - 1.0).abs() < 1e-6);
        assert_eq!(solve_p2(&h, &p, 1.0, 0.0).unwrap_err(), AdversaryError::DeltaOutOfRange(0.0));
        assert_eq!(solve_p2(&h, &p, 1.0, 0.2).unwrap_err(), AdversaryError::DeltaOutOfRange(0.2));
    }

    #[test]
    fn zero_channel_rejected() {
        let h = CMat::zeros(2, 2);
        assert_eq!(solve_p1(&h, &[1.0, 1.0], 1.0, 1e-9).unwrap_err(), AdversaryError::ZeroChannel);
        assert_eq!(solve_p2(&h, &[1.0, 1.0], 1.0, 1e-3).unwrap_err(), AdversaryError::ZeroChannel);
    }
}
