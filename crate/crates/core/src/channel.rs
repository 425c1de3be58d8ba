//! MIMO multiple-access channel with SIC decoding.
//!
//! `Q` single-antenna users transmit to an `N_R`-antenna receiver. The
//! receiver decodes users in ascending order of received power
//! `p_q ||h_q||^2`; user `q` sees the users decoded after it as interference:
//!
//! ```text
//! X_q = sum_{q' after q} p_q' h_q' h_q'^H + C_z
//! R_q = ln(1 + p_q h_q^H X_q^{-1} h_q)          (nats)
//! mu_q = (1 + p_q h_q^H X_q^{-1} h_q)^{-1} = exp(-R_q)
//! ```
//!
//! Rates telescope: `sum_q R_q = ln det(I + H P H^H C_z^{-1})`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cholesky, logdet_chol, quad_inv, CMat, CVec, C64};
use crate::seeds;

pub const REFERENCE_DISTANCE_M: f64 = 100.0;
pub const PATH_LOSS_EXPONENT: f64 = 3.5;
pub const MIN_DISTANCE_M: f64 = 100.0;
pub const MAX_DISTANCE_M: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("distance {0} m must be positive")]
    NonPositiveDistance(f64),
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("invalid channel state: {0}")]
    InvalidState(String),
    #[error("interference-plus-noise matrix is singular for user {0}")]
    Singular(usize),
    #[error("noise covariance has zero trace")]
    ZeroNoise,
}

/// `(d / 100 m)^-3.5`, so the reference distance has unit gain.
pub fn path_loss(distance_m: f64) -> Result<f64, ChannelError> {
    if !(distance_m > 0.0) {
        return Err(ChannelError::NonPositiveDistance(distance_m));
    }
    Ok((distance_m / REFERENCE_DISTANCE_M).powf(-PATH_LOSS_EXPONENT))
}

/// User distances drawn uniformly in [100, 1000] m.
pub fn sample_positions(q: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng_for(seed, &["positions"]);
    (0..q).map(|_| rng.random_range(MIN_DISTANCE_M..=MAX_DISTANCE_M)).collect()
}

/// Rayleigh channels `h_q = sqrt(PL(d_q)) g_q`, `g_q ~ CN(0, I)`; columns are users.
pub fn sample_channels(q: usize, n_rx: usize, positions: &[f64], seed: u64) -> Result<CMat, ChannelError> {
    if q == 0 || n_rx == 0 {
        return Err(ChannelError::Dimensions(format!("Q={q}, N_R={n_rx}")));
    }
    if positions.len() != q {
        return Err(ChannelError::Dimensions(format!("{} positions for {q} users", positions.len())));
    }
    let gains = positions.iter().map(|&d| path_loss(d)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = seeds::rng_for(seed, &["rayleigh"]);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = CMat::zeros(n_rx, q);
    for (col, g) in gains.iter().enumerate() {
        let amp = g.sqrt() * half;
        for row in 0..n_rx {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            h[(row, col)] = C64::new(amp * re, amp * im);
        }
    }
    Ok(h)
}

pub fn column(h: &CMat, q: usize) -> CVec {
    h.column(q).into_owned()
}

/// Users sorted by ascending `p_q ||h_q||^2`, ties by index.
pub fn sic_order(h: &CMat, powers: &[f64]) -> Vec<usize> {
    let strength: Vec<f64> = (0..h.ncols()).map(|q| powers[q] * h.column(q).norm_squared()).collect();
    let mut order: Vec<usize> = (0..h.ncols()).collect();
    order.sort_by(|&a, &b| strength[a].total_cmp(&strength[b]).then(a.cmp(&b)));
    order
}

/// One channel use: channels, powers and the noise covariance.
#[derive(Debug, Clone)]
pub struct ChannelState {
    /// `N_R x Q`, column `q` is user `q`'s channel.
    pub h: CMat,
    pub powers: Vec<f64>,
    pub power_caps: Vec<f64>,
    pub noise_cov: CMat,
    /// Upper bound on `trace(noise_cov)`.
    pub noise_power: f64,
    pub sic_order: Vec<usize>,
    pub distances: Vec<f64>,
}

impl ChannelState {
    pub fn new(
        h: CMat,
        powers: Vec<f64>,
        power_caps: Vec<f64>,
        noise_cov: CMat,
        noise_power: f64,
        distances: Vec<f64>,
    ) -> Result<Self, ChannelError> {
        let order = sic_order(&h, &powers);
        let state = Self { h, powers, power_caps, noise_cov, noise_power, sic_order: order, distances };
        state.validate()?;
        Ok(state)
    }

    pub fn n_rx(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.h.ncols()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let (n, q) = (self.n_rx(), self.n_users());
        if self.powers.len() != q || self.power_caps.len() != q {
            return Err(ChannelError::Dimensions(format!("powers/caps length vs Q={q}")));
        }
        if self.noise_cov.nrows() != n || self.noise_cov.ncols() != n {
            return Err(ChannelError::Dimensions("noise covariance must be N_R x N_R".into()));
        }
        for (i, (&p, &cap)) in self.powers.iter().zip(&self.power_caps).enumerate() {
            if !(p >= 0.0 && p <= cap) {
                return Err(ChannelError::InvalidState(format!("power {p} of user {i} outside [0, {cap}]")));
            }
        }
        if linalg::hermitian_defect(&self.noise_cov) > 1e-12 {
            return Err(ChannelError::InvalidState("noise covariance is not Hermitian".into()));
        }
        let tr = linalg::trace_re(&self.noise_cov);
        if tr > self.noise_power * (1.0 + 1e-9) {
            return Err(ChannelError::InvalidState(format!("trace {tr} exceeds noise power {}", self.noise_power)));
        }
        let scale = linalg::frobenius(&self.noise_cov).max(f64::MIN_POSITIVE);
        if linalg::min_eigenvalue(&self.noise_cov) < -1e-12 * scale {
            return Err(ChannelError::InvalidState("noise covariance is not PSD".into()));
        }
        let mut sorted = self.sic_order.clone();
        sorted.sort_unstable();
        if sorted != (0..q).collect::<Vec<_>>() {
            return Err(ChannelError::InvalidState("SIC order is not a permutation".into()));
        }
        Ok(())
    }

    /// Position of each user in the decoding order.
    fn rank_of(&self, q: usize) -> usize {
        self.sic_order.iter().position(|&u| u == q).expect("user present in SIC order")
    }

    /// `X_q`: interference from users decoded after `q`, plus noise.
    pub fn interference_plus_noise(&self, q: usize) -> CMat {
        let mut x = self.noise_cov.clone();
        for &later in &self.sic_order[self.rank_of(q) + 1..] {
            let hl = column(&self.h, later);
            x += linalg::outer(&hl).scale(self.powers[later]);
        }
        x
    }

    /// `p_q h_q^H X_q^{-1} h_q`, the post-SIC MMSE SINR of user `q`.
    pub fn sinr(&self, q: usize) -> Result<f64, ChannelError> {
        if q >= self.n_users() {
            return Err(ChannelError::Dimensions(format!("user {q} out of range")));
        }
        if self.powers[q] == 0.0 {
            return Ok(0.0);
        }
        let x = self.interference_plus_noise(q);
        let ch = cholesky(&x).ok_or(ChannelError::Singular(q))?;
        Ok(self.powers[q] * quad_inv(&ch, &column(&self.h, q)))
    }
}

pub fn user_rate(q: usize, state: &ChannelState) -> Result<f64, ChannelError> {
    Ok(state.sinr(q)?.ln_1p())
}

pub fn mmse(q: usize, state: &ChannelState) -> Result<f64, ChannelError> {
    Ok(1.0 / (1.0 + state.sinr(q)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumRate {
    /// `ln det(I + H P H^H C_z^{-1})`, equal to the SIC rate sum.
    pub logdet: f64,
    /// `ln(1 + sum_q p_q h_q^H C_z^{-1} h_q)`, kept as a diagnostic.
    pub single_stream: f64,
}

pub fn sum_rate(state: &ChannelState) -> Result<SumRate, ChannelError> {
    let ch_noise = cholesky(&state.noise_cov).ok_or(ChannelError::Singular(usize::MAX))?;
    let mut total = state.noise_cov.clone();
    let mut acc = 0.0;
    for q in 0..state.n_users() {
        let h = column(&state.h, q);
        total += linalg::outer(&h).scale(state.powers[q]);
        acc += state.powers[q] * quad_inv(&ch_noise, &h);
    }
    let ch_total = cholesky(&total).ok_or(ChannelError::Singular(usize::MAX))?;
    Ok(SumRate { logdet: logdet_chol(&ch_total) - logdet_chol(&ch_noise), single_stream: acc.ln_1p() })
}

/// `10 log10(sum_q p_q ||h_q||^2 / trace(C_z))`.
pub fn report_snr(state: &ChannelState) -> Result<f64, ChannelError> {
    let tr = linalg::trace_re(&state.noise_cov);
    if tr <= 0.0 {
        return Err(ChannelError::ZeroNoise);
    }
    let signal: f64 = (0..state.n_users()).map(|q| state.powers[q] * state.h.column(q).norm_squared()).sum();
    Ok(10.0 * (signal / tr).log10())
}

/// Post-equalisation SNR implied by an average MSE: `10 log10((1 - mu) / mu)`.
pub fn effective_snr_db(mean_mse: f64) -> f64 {
    10.0 * ((1.0 - mean_mse) / mean_mse).log10()
}

/// Per-user and aggregate link quality of one channel state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub rates: Vec<f64>,
    pub sum_rate: f64,
    pub sum_rate_single_stream: f64,
    pub mse: Vec<f64>,
    pub snr_db: f64,
}

impl LinkMetrics {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    pub fn effective_snr_db(&self) -> f64 {
        effective_snr_db(self.mean_mse())
    }
}

pub fn link_metrics(state: &ChannelState) -> Result<LinkMetrics, ChannelError> {
    let sinr = (0..state.n_users()).map(|q| state.sinr(q)).collect::<Result<Vec<_>, _>>()?;
    let sr = sum_rate(state)?;
    Ok(LinkMetrics {
        rates: sinr.iter().map(|s| s.ln_1p()).collect(),
        mse: sinr.iter().map(|s| 1.0 / (1.0 + s)).collect(),
        sum_rate: sr.logdet,
        sum_rate_single_stream: sr.single_stream,
        snr_db: report_snr(state)?,
    })
}
