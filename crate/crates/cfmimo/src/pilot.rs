//! Pilot transmission and per-AP linear MMSE channel estimation.
//!
//! UEs transmit `τ_p`-symbol orthogonal pilots; with `K > τ_p` several UEs
//! share a pilot and contaminate each other's estimates. After de-spreading,
//! AP `l` sees one observation vector per pilot, from which it forms MMSE
//! estimates `ĥ_kl` of its served channels. Estimation-error statistics
//! (`Q`, `C`) are deterministic per deployment and precomputed once.

use crate::channel::{complex_gaussian, ChannelRealization, CorrelationSet};
use crate::error::Error;
use crate::geometry::SystemConfig;
use crate::linalg::{ceye, hermitian_part, hpd_solve, CMat, CVec};
use crate::Result;
use rand::seq::SliceRandom;
use rand::Rng;

/// Pilot indices assigned to the UEs, plus the inverse (sharer) map.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotAssignment {
    /// Pilot index (0-based) per UE.
    pub pilot_of: Vec<usize>,
    /// UEs sharing each pilot, ascending; empty for unused pilots.
    by_pilot: Vec<Vec<usize>>,
}

impl PilotAssignment {
    /// Build the sharer map from a per-UE pilot vector.
    pub fn new(pilot_of: Vec<usize>, num_pilots: usize) -> Result<Self> {
        let mut by_pilot = vec![Vec::new(); num_pilots];
        for (ue, &t) in pilot_of.iter().enumerate() {
            if t >= num_pilots {
                return Err(Error::InvalidConfig(format!(
                    "UE {ue} assigned pilot {t} but only {num_pilots} pilots exist"
                )));
            }
            by_pilot[t].push(ue);
        }
        Ok(PilotAssignment { pilot_of, by_pilot })
    }

    /// UEs sharing pilot `t` (ascending UE index; includes the owner(s)).
    pub fn sharers(&self, pilot: usize) -> &[usize] {
        &self.by_pilot[pilot]
    }

    /// UEs sharing UE `k`'s pilot, including `k` itself.
    pub fn copilots(&self, ue: usize) -> &[usize] {
        &self.by_pilot[self.pilot_of[ue]]
    }

    /// Number of pilots `τ_p`.
    pub fn num_pilots(&self) -> usize {
        self.by_pilot.len()
    }
}

/// Randomly assign pilots to UEs.
///
/// With `τ_p ≥ K` each UE gets a distinct pilot (uniformly among distinct
/// assignments). With `K > τ_p` the assignment guarantees full pilot
/// coverage: one copy of every pilot plus `K − τ_p` uniform extra draws,
/// shuffled across UEs. Coverage keeps every de-spread observation
/// informative while remaining cheap for any `K/τ_p` ratio.
pub fn assign_pilots<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> PilotAssignment {
    let (k, tp) = (config.num_ues, config.pilot_length);
    let pilot_of = if tp >= k {
        let mut pilots: Vec<usize> = (0..tp).collect();
        pilots.shuffle(rng);
        pilots.truncate(k);
        pilots
    } else {
        let mut pilots: Vec<usize> = (0..tp).collect();
        for _ in 0..(k - tp) {
            pilots.push(rng.random_range(0..tp));
        }
        pilots.shuffle(rng);
        pilots
    };
    PilotAssignment::new(pilot_of, tp).expect("constructed pilots are in range")
}

/// De-spread pilot observations: one `N`-vector per (pilot, AP).
#[derive(Debug, Clone)]
pub struct PilotObservations {
    num_aps: usize,
    /// Row-major over `(pilot, ap)`: index `t·L + l`.
    z: Vec<CVec>,
}

impl PilotObservations {
    /// Observation `z_{t,l}` for pilot `t` at AP `l`.
    pub fn observation(&self, pilot: usize, ap: usize) -> &CVec {
        &self.z[pilot * self.num_aps + ap]
    }
}

/// Generate the de-spread pilot observations for one channel realization:
///
/// `z_{t,l} = √(p·τ_p) · Σ_{i ∈ sharers(t)} h_il + n_{t,l}`,
/// `n_{t,l} ~ CN(0, σ² I_N)`.
///
/// Noise is drawn for every pilot (used or not) so the stream consumption
/// per call is fixed; draw order is pilot-major, AP-minor.
pub fn pilot_observation<R: Rng + ?Sized>(
    channel: &ChannelRealization,
    assignment: &PilotAssignment,
    config: &SystemConfig,
    rng: &mut R,
) -> PilotObservations {
    let l_total = config.num_aps;
    let n = config.antennas_per_ap;
    let amp = (config.tx_power * config.pilot_length as f64).sqrt();
    let noise_std = config.noise_power.sqrt();
    let mut z = Vec::with_capacity(assignment.num_pilots() * l_total);
    for t in 0..assignment.num_pilots() {
        for l in 0..l_total {
            let mut obs = complex_gaussian(n, rng).scale(noise_std);
            for &i in assignment.sharers(t) {
                obs += channel.per_ap[l].column(i).scale(amp);
            }
            z.push(obs);
        }
    }
    PilotObservations { num_aps: l_total, z }
}

/// Deterministic per-deployment estimation statistics.
///
/// For each UE–AP pair: the estimate gain `G_kl = √(p·τ_p) R_kl Ψ_kl`
/// (so `ĥ_kl = G_kl z_{t_k,l}`), the estimate covariance
/// `Q_kl = p·τ_p·R_kl Ψ_kl R_kl`, and the error covariance
/// `C_kl = R_kl − Q_kl`, where
/// `Ψ_kl = (Σ_{i ∈ copilots(k)} p·τ_p·R_il + σ² I)⁻¹` depends only on the
/// pilot, not the UE.
#[derive(Debug, Clone)]
pub struct EstimateStatistics {
    num_aps: usize,
    gains: Vec<CMat>,
    estimate_cov: Vec<CMat>,
    error_cov: Vec<CMat>,
}

impl EstimateStatistics {
    /// Precompute gains and covariances for every UE–AP pair.
    pub fn new(
        corr: &CorrelationSet,
        assignment: &PilotAssignment,
        config: &SystemConfig,
    ) -> Result<Self> {
        let (k_total, l_total, n) = (corr.num_ues(), corr.num_aps(), corr.antennas());
        let ptau = config.tx_power * config.pilot_length as f64;
        // Ψ is shared by all UEs on the same pilot: compute per (pilot, AP).
        let mut psi: Vec<Option<CMat>> = vec![None; assignment.num_pilots() * l_total];
        for t in 0..assignment.num_pilots() {
            if assignment.sharers(t).is_empty() {
                continue;
            }
            for l in 0..l_total {
                let mut m = ceye(n).scale(config.noise_power);
                for &i in assignment.sharers(t) {
                    m += corr.covariance(i, l).scale(ptau);
                }
                let inv = hpd_solve(&m, &ceye(n)).ok_or(Error::SingularSystem {
                    context: "pilot observation covariance",
                })?;
                psi[t * l_total + l] = Some(inv);
            }
        }
        let mut gains = Vec::with_capacity(k_total * l_total);
        let mut estimate_cov = Vec::with_capacity(k_total * l_total);
        let mut error_cov = Vec::with_capacity(k_total * l_total);
        for k in 0..k_total {
            let t = assignment.pilot_of[k];
            for l in 0..l_total {
                let psi_tl = psi[t * l_total + l].as_ref().expect("assigned pilot has Ψ");
                let r = corr.covariance(k, l);
                let gain = (r * psi_tl).scale(ptau.sqrt());
                let q = hermitian_part(&(&gain * r).scale(ptau.sqrt()));
                let c = hermitian_part(&(r - &q));
                gains.push(gain);
                estimate_cov.push(q);
                error_cov.push(c);
            }
        }
        Ok(EstimateStatistics {
            num_aps: l_total,
            gains,
            estimate_cov,
            error_cov,
        })
    }

    /// Estimate gain `G_kl` with `ĥ_kl = G_kl z_{t_k,l}`.
    pub fn gain(&self, ue: usize, ap: usize) -> &CMat {
        &self.gains[ue * self.num_aps + ap]
    }

    /// Covariance of the estimate, `Q_kl = E{ĥ_kl ĥ_klᴴ}`.
    pub fn estimate_cov(&self, ue: usize, ap: usize) -> &CMat {
        &self.estimate_cov[ue * self.num_aps + ap]
    }

    /// Covariance of the estimation error, `C_kl = R_kl − Q_kl`.
    pub fn error_cov(&self, ue: usize, ap: usize) -> &CMat {
        &self.error_cov[ue * self.num_aps + ap]
    }
}

/// Per-AP MMSE channel estimates for one realization.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    /// Per-AP estimate matrices, `N × K`; column `k` is `ĥ_kl`.
    pub per_ap: Vec<CMat>,
}

impl EstimateSet {
    /// Estimate vector `ĥ_kl`.
    pub fn vector(&self, ue: usize, ap: usize) -> CVec {
        self.per_ap[ap].column(ue).into_owned()
    }
}

/// Apply the MMSE estimator to one set of pilot observations:
/// `ĥ_kl = G_kl · z_{t_k, l}`.
///
/// Co-pilot UEs are estimated from the same observation vector, which is
/// what makes pilot contamination structural rather than noise-like.
pub fn mmse_estimate(
    obs: &PilotObservations,
    stats: &EstimateStatistics,
    assignment: &PilotAssignment,
) -> EstimateSet {
    let l_total = obs.num_aps;
    let k_total = assignment.pilot_of.len();
    let n = stats.gain(0, 0).nrows();
    let mut per_ap = Vec::with_capacity(l_total);
    for l in 0..l_total {
        let mut h_hat = CMat::zeros(n, k_total);
        for k in 0..k_total {
            let z = obs.observation(assignment.pilot_of[k], l);
            h_hat.set_column(k, &(stats.gain(k, l) * z));
        }
        per_ap.push(h_hat);
    }
    EstimateSet { per_ap }
}
