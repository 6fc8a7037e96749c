//! Small-scale fading: spatial correlation matrices and channel sampling.
//!
//! Each UE–AP pair `(k, l)` has an `N × N` spatial covariance `R_kl` with
//! `tr(R_kl) = N · β_kl`, and the channel vector is correlated Rayleigh,
//! `h_kl ~ CN(0, R_kl)`, independent across pairs. Covariance factors are
//! precomputed once per deployment so that per-trial sampling is a plain
//! matrix–vector product.

use crate::error::Error;
use crate::geometry::{CorrelationModel, Deployment, SystemConfig};
use crate::linalg::{psd_factor, CMat, CVec};
use crate::Result;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_1_SQRT_2;

/// Per-deployment channel statistics: covariances and their factors for
/// every UE–AP pair, stored row-major over `(k, l)` (index `k·L + l`).
#[derive(Debug, Clone)]
pub struct CorrelationSet {
    num_ues: usize,
    num_aps: usize,
    antennas: usize,
    covariances: Vec<CMat>,
    factors: Vec<CMat>,
}

impl CorrelationSet {
    /// Spatial covariance `R_kl`.
    pub fn covariance(&self, ue: usize, ap: usize) -> &CMat {
        &self.covariances[ue * self.num_aps + ap]
    }

    /// Factor `F_kl` with `F_kl · F_klᴴ = R_kl`, used for sampling.
    pub fn factor(&self, ue: usize, ap: usize) -> &CMat {
        &self.factors[ue * self.num_aps + ap]
    }

    /// Number of UEs `K`.
    pub fn num_ues(&self) -> usize {
        self.num_ues
    }

    /// Number of APs `L`.
    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    /// Antennas per AP `N`.
    pub fn antennas(&self) -> usize {
        self.antennas
    }
}

/// One small-scale fading realization.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Per-AP channel matrices, `N × K`; column `k` is `h_kl`.
    pub per_ap: Vec<CMat>,
}

impl ChannelRealization {
    /// Channel vector `h_kl` from UE `k` to AP `l`.
    pub fn vector(&self, ue: usize, ap: usize) -> CVec {
        self.per_ap[ap].column(ue).into_owned()
    }
}

/// Single-antenna correlation value for the given model (scale-free part).
fn correlation_entry(model: CorrelationModel, row: usize, col: usize) -> f64 {
    match model {
        CorrelationModel::Identity => {
            if row == col {
                1.0
            } else {
                0.0
            }
        }
        CorrelationModel::Exponential { coefficient } => {
            coefficient.powi((row as i32 - col as i32).abs())
        }
    }
}

/// Build the spatial covariances `R_kl` for one deployment.
///
/// `R_kl = β_kl · T` where `T` is the model's `N × N` correlation template
/// (identity, or exponential with entries `r^|m−n|`), so `tr(R_kl) = N·β_kl`
/// for every pair. Fails if the deployment dimensions do not match the
/// config or a `β` is non-finite or non-positive.
pub fn build_correlation(config: &SystemConfig, deployment: &Deployment) -> Result<CorrelationSet> {
    let (k, l, n) = (config.num_ues, config.num_aps, config.antennas_per_ap);
    if deployment.betas.nrows() != k || deployment.betas.ncols() != l {
        return Err(Error::InvalidConfig(format!(
            "deployment is {}x{} but config expects {}x{}",
            deployment.betas.nrows(),
            deployment.betas.ncols(),
            k,
            l
        )));
    }
    let template = CMat::from_fn(n, n, |i, j| {
        Complex64::new(correlation_entry(config.correlation, i, j), 0.0)
    });
    let mut covariances = Vec::with_capacity(k * l);
    let mut factors = Vec::with_capacity(k * l);
    for ue in 0..k {
        for ap in 0..l {
            let beta = deployment.betas[(ue, ap)];
            if !beta.is_finite() || beta <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "large-scale coefficient for UE {ue}, AP {ap} is {beta}"
                )));
            }
            let r = template.scale(beta);
            let (factor, _clipped) = psd_factor(&r, 1e-12);
            covariances.push(r);
            factors.push(factor);
        }
    }
    Ok(CorrelationSet {
        num_ues: k,
        num_aps: l,
        antennas: n,
        covariances,
        factors,
    })
}

/// Draw a standard circularly-symmetric complex Gaussian vector,
/// `CN(0, I_n)`: each entry `(x + iy)/√2` with independent standard normal
/// `x` drawn before `y`.
pub fn complex_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVec {
    CVec::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
    })
}

/// Sample one channel realization: `h_kl = F_kl · w` with `w ~ CN(0, I)`.
///
/// Draw order is AP-major, UE-minor (`l` outer, `k` inner), fixed as part of
/// the reproducibility contract.
pub fn sample_channel<R: Rng + ?Sized>(corr: &CorrelationSet, rng: &mut R) -> ChannelRealization {
    let n = corr.antennas;
    let mut per_ap = Vec::with_capacity(corr.num_aps);
    for ap in 0..corr.num_aps {
        let mut h = CMat::zeros(n, corr.num_ues);
        for ue in 0..corr.num_ues {
            let w = complex_gaussian(n, rng);
            h.set_column(ue, &(corr.factor(ue, ap) * w));
        }
        per_ap.push(h);
    }
    ChannelRealization { per_ap }
}
