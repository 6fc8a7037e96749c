//! Spectral-efficiency evaluation from Monte Carlo channel moments.
//!
//! The achievable rate is the hardening (use-and-then-forget) bound: the
//! receiver treats the *average* effective gain `E{Σ_l v_klᴴ h_kl}` as the
//! known channel and everything else — gain fluctuation, interference,
//! noise — as uncorrelated additive distortion. For UE `k`,
//!
//! `SE_k = (1 − τ_p/τ_c) · log2(1 / mse_k)`,
//! `mse_k = 1 − |E{g_k}|² / E{D_k}`,
//!
//! where per-realization `g_k = Σ_l v_klᴴ h_kl` and
//! `D_k = Σ_i |Σ_l v_klᴴ h_il|² + (σ²/p) Σ_l ‖v_kl‖²`. `mse_k` is exactly
//! the minimum mean-square error of scaling the combined output by the
//! optimal scalar `α_k* = E{g_k}* / E{D_k}`.
//!
//! Moments are accumulated per trial into [`MomentAccumulator`] (mergeable
//! across batches), and standard errors for `mse`/`SE` follow from the
//! delta method on the trial-level moment vector `(Re g, Im g, D)`.

use crate::channel::ChannelRealization;
use crate::combining::{local_base, CombinerSet};
use crate::error::Error;
use crate::geometry::SystemConfig;
use crate::linalg::{CMat, CVec};
use crate::pilot::{EstimateSet, EstimateStatistics};
use crate::Result;
use num_complex::Complex64;

/// Lower clamp for the reported MMSE; reaching it flags a degenerate
/// (numerically perfect) link rather than a real operating point.
pub const MSE_FLOOR: f64 = 1e-12;

/// Running Monte Carlo moments for every UE.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    trials: usize,
    // First moments: effective gain (split re/im) and distortion power.
    sum_a: Vec<f64>,
    sum_b: Vec<f64>,
    sum_d: Vec<f64>,
    // Second moments for delta-method standard errors.
    sum_aa: Vec<f64>,
    sum_ab: Vec<f64>,
    sum_bb: Vec<f64>,
    sum_ad: Vec<f64>,
    sum_bd: Vec<f64>,
    sum_dd: Vec<f64>,
}

impl MomentAccumulator {
    /// Fresh accumulator for `num_ues` UEs.
    pub fn new(num_ues: usize) -> Self {
        MomentAccumulator {
            trials: 0,
            sum_a: vec![0.0; num_ues],
            sum_b: vec![0.0; num_ues],
            sum_d: vec![0.0; num_ues],
            sum_aa: vec![0.0; num_ues],
            sum_ab: vec![0.0; num_ues],
            sum_bb: vec![0.0; num_ues],
            sum_ad: vec![0.0; num_ues],
            sum_bd: vec![0.0; num_ues],
            sum_dd: vec![0.0; num_ues],
        }
    }

    /// Number of accumulated trials.
    pub fn trials(&self) -> usize {
        self.trials
    }

    fn push_moment(&mut self, ue: usize, gain: Complex64, distortion: f64) {
        let (a, b, d) = (gain.re, gain.im, distortion);
        self.sum_a[ue] += a;
        self.sum_b[ue] += b;
        self.sum_d[ue] += d;
        self.sum_aa[ue] += a * a;
        self.sum_ab[ue] += a * b;
        self.sum_bb[ue] += b * b;
        self.sum_ad[ue] += a * d;
        self.sum_bd[ue] += b * d;
        self.sum_dd[ue] += d * d;
    }

    /// Add one channel/combiner realization.
    ///
    /// Computes the effective-gain matrix `M = Σ_l V_lᴴ H_l` (entry `(k, i)`
    /// couples UE `i`'s signal into UE `k`'s output) and from it the
    /// per-trial gain `g_k = M_kk` and distortion
    /// `D_k = Σ_i |M_ki|² + (σ²/p) Σ_l ‖v_kl‖²`.
    pub fn accumulate(
        &mut self,
        combiners: &CombinerSet,
        channel: &ChannelRealization,
        config: &SystemConfig,
    ) {
        let k_total = self.sum_a.len();
        let mut m = CMat::zeros(k_total, k_total);
        let mut vnorm = vec![0.0f64; k_total];
        for (v_l, h_l) in combiners.per_ap.iter().zip(channel.per_ap.iter()) {
            m += v_l.adjoint() * h_l;
            for k in 0..k_total {
                vnorm[k] += v_l.column(k).norm_squared();
            }
        }
        let nop = config.noise_over_power();
        for k in 0..k_total {
            let gain = m[(k, k)];
            let interference: f64 = (0..k_total).map(|i| m[(k, i)].norm_sqr()).sum();
            self.push_moment(k, gain, interference + nop * vnorm[k]);
        }
        self.trials += 1;
    }

    /// Merge another accumulator (e.g. a different trial batch) into this
    /// one. Addition of partial sums, so the merge order is the only thing
    /// that affects the result bit pattern.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.sum_a.len(), other.sum_a.len(), "UE count mismatch");
        self.trials += other.trials;
        for k in 0..self.sum_a.len() {
            self.sum_a[k] += other.sum_a[k];
            self.sum_b[k] += other.sum_b[k];
            self.sum_d[k] += other.sum_d[k];
            self.sum_aa[k] += other.sum_aa[k];
            self.sum_ab[k] += other.sum_ab[k];
            self.sum_bb[k] += other.sum_bb[k];
            self.sum_ad[k] += other.sum_ad[k];
            self.sum_bd[k] += other.sum_bd[k];
            self.sum_dd[k] += other.sum_dd[k];
        }
    }

    /// Close the accumulation and compute per-UE spectral efficiencies.
    pub fn finalize(&self, config: &SystemConfig) -> Result<SeReport> {
        if self.trials == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let t = self.trials as f64;
        let prelog = config.prelog();
        let ln2 = std::f64::consts::LN_2;
        let per_ue = (0..self.sum_a.len())
            .map(|k| {
                let (a, b, d) = (self.sum_a[k] / t, self.sum_b[k] / t, self.sum_d[k] / t);
                if d <= 0.0 {
                    // All-zero combiner: no signal, no distortion; the bound
                    // degenerates to zero rate.
                    return UeSummary {
                        se: 0.0,
                        mse: 1.0,
                        clamped: false,
                        alpha: Complex64::new(0.0, 0.0),
                        se_std_err: 0.0,
                        mse_std_err: 0.0,
                    };
                }
                let gain2 = a * a + b * b;
                let mse_raw = 1.0 - gain2 / d;
                let clamped = mse_raw < MSE_FLOOR;
                let mse = mse_raw.clamp(MSE_FLOOR, 1.0);
                let se = -prelog * mse.log2();
                let alpha = Complex64::new(a, -b) / d;
                let mse_std_err = if self.trials < 2 {
                    f64::NAN
                } else {
                    // Delta method on f(ā, b̄, D̄) = 1 − (ā² + b̄²)/D̄ with
                    // the sample covariance of the trial means.
                    let cov = |sum_xy: f64, mean_x: f64, mean_y: f64| {
                        (sum_xy - t * mean_x * mean_y) / (t - 1.0) / t
                    };
                    let c_aa = cov(self.sum_aa[k], a, a);
                    let c_ab = cov(self.sum_ab[k], a, b);
                    let c_bb = cov(self.sum_bb[k], b, b);
                    let c_ad = cov(self.sum_ad[k], a, d);
                    let c_bd = cov(self.sum_bd[k], b, d);
                    let c_dd = cov(self.sum_dd[k], d, d);
                    let ga = -2.0 * a / d;
                    let gb = -2.0 * b / d;
                    let gd = gain2 / (d * d);
                    let var = ga * ga * c_aa
                        + gb * gb * c_bb
                        + gd * gd * c_dd
                        + 2.0 * (ga * gb * c_ab + ga * gd * c_ad + gb * gd * c_bd);
                    var.max(0.0).sqrt()
                };
                let se_std_err = prelog / (mse * ln2) * mse_std_err;
                UeSummary {
                    se,
                    mse,
                    clamped,
                    alpha,
                    se_std_err,
                    mse_std_err,
                }
            })
            .collect();
        Ok(SeReport {
            per_ue,
            trials: self.trials,
        })
    }
}

/// Finalized per-UE result.
#[derive(Debug, Clone)]
pub struct UeSummary {
    /// Spectral efficiency, bit/s/Hz.
    pub se: f64,
    /// Hardening-bound MMSE (clamped to [`MSE_FLOOR`], 1]).
    pub mse: f64,
    /// True when the raw MMSE fell below [`MSE_FLOOR`].
    pub clamped: bool,
    /// Optimal post-combining scalar `α* = E{g}* / E{D}`.
    pub alpha: Complex64,
    /// Delta-method standard error of `se` (NaN with fewer than 2 trials).
    pub se_std_err: f64,
    /// Delta-method standard error of `mse` (NaN with fewer than 2 trials).
    pub mse_std_err: f64,
}

/// Per-UE results for one (scheme, deployment) pair.
#[derive(Debug, Clone)]
pub struct SeReport {
    /// One summary per UE.
    pub per_ue: Vec<UeSummary>,
    /// Trials behind the estimates.
    pub trials: usize,
}

impl SeReport {
    /// Spectral efficiencies in UE order.
    pub fn se_values(&self) -> Vec<f64> {
        self.per_ue.iter().map(|u| u.se).collect()
    }
}

/// MSE of UE `k`'s combiner conditioned on the estimates (the quantity every
/// team combiner optimizes realization by realization):
///
/// `mse = 1 − 2 Re(Σ_l v_klᴴ ĥ_kl) + Σ_i |Σ_l v_klᴴ ĥ_il|²
///        + Σ_l v_klᴴ (Σ_i C_il + (σ²/p) I) v_kl`.
pub fn conditional_mse(
    combiners: &CombinerSet,
    est: &EstimateSet,
    stats: &EstimateStatistics,
    config: &SystemConfig,
    ue: usize,
) -> f64 {
    let k_total = config.num_ues;
    let mut cross = Complex64::new(0.0, 0.0);
    let mut coupling = vec![Complex64::new(0.0, 0.0); k_total];
    let mut residual = 0.0f64;
    for ap in 0..config.num_aps {
        let v = combiners.per_ap[ap].column(ue);
        let prods = est.per_ap[ap].adjoint() * v;
        for i in 0..k_total {
            coupling[i] += prods[i].conj();
        }
        cross += prods[ue].conj();
        let base = local_base(stats, config, ap);
        residual += (v.adjoint() * base * v)[(0, 0)].re;
    }
    1.0 - 2.0 * cross.re + coupling.iter().map(|c| c.norm_sqr()).sum::<f64>() + residual
}

/// Symbol-level receive combining for one realization:
/// `ŝ_k = (1/√p) Σ_l v_klᴴ y_l` with `y_l = √p Σ_i h_il s_i + n_l`.
///
/// `noise[l]` must be the raw `CN(0, σ² I_N)` noise at AP `l`. The `1/√p`
/// normalization puts the output in symbol units so that
/// `E{ŝ_k s_k*} = g_k` and `E{|ŝ_k|²} = D_k` match the accumulated moments.
pub fn receive_combine(
    combiners: &CombinerSet,
    channel: &ChannelRealization,
    symbols: &[Complex64],
    noise: &[CVec],
    config: &SystemConfig,
) -> Vec<Complex64> {
    let k_total = config.num_ues;
    let s = CVec::from_column_slice(symbols);
    let inv_sqrt_p = 1.0 / config.tx_power.sqrt();
    let mut out = CVec::zeros(k_total);
    for ap in 0..config.num_aps {
        let y = &channel.per_ap[ap] * &s + noise[ap].scale(inv_sqrt_p);
        out += combiners.per_ap[ap].adjoint() * y;
    }
    out.iter().copied().collect()
}

/// Empirical distribution summary of a sample of SE values.
#[derive(Debug, Clone)]
pub struct Cdf {
    /// Sample values, ascending.
    pub values: Vec<f64>,
    /// Cumulative probability for each value: `(i + 1) / n`.
    pub probabilities: Vec<f64>,
    /// Sample median (midpoint average for even sizes).
    pub median: f64,
    /// Sample mean.
    pub mean: f64,
}

/// Build the empirical CDF of a non-empty, finite sample.
pub fn empirical_cdf(values: &[f64]) -> Result<Cdf> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empty sample for CDF".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite value in CDF sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = sorted.len();
    let probabilities = (0..n).map(|i| (i + 1) as f64 / n as f64).collect();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    Ok(Cdf {
        values: sorted,
        probabilities,
        median,
        mean,
    })
}
