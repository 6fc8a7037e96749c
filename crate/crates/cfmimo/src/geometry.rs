//! Network geometry and large-scale fading.
//!
//! APs and UEs are dropped uniformly at random on a square service area.
//! Each UE–AP link gets a large-scale fading coefficient `β` (linear power
//! gain) from a three-slope distance-based path loss plus spatially
//! correlated log-normal shadowing on the far-distance branch.
//!
//! Shadowing correlation follows a sum-of-exponentials kernel: the shadowing
//! values of two links are correlated both through UE proximity and through
//! AP proximity, with a half-power decorrelation distance. The joint
//! `(K·L)`-dimensional Gaussian is sampled through an exact factorization of
//! its covariance matrix (see [`sample_shadowing`]).

use crate::error::Error;
use crate::linalg::{psd_factor_real, RMat, RVec};
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Spatial correlation model for the small-scale fading covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationModel {
    /// Uncorrelated antennas: `R = β · I`.
    Identity,
    /// Exponential correlation: `R[m,n] = β · r^|m-n|` with `0 ≤ r < 1`.
    Exponential {
        /// Adjacent-antenna correlation coefficient.
        coefficient: f64,
    },
}

/// Static system parameters shared by every stage of the simulation.
///
/// Powers are linear watts; use the experiment-spec layer to convert from
/// dBm once at parse time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    /// Number of access points `L`.
    pub num_aps: usize,
    /// Number of user equipments `K`.
    pub num_ues: usize,
    /// Antennas per AP `N`.
    pub antennas_per_ap: usize,
    /// Pilot sequence length `τ_p` (symbols per coherence block).
    pub pilot_length: usize,
    /// Coherence block length `τ_c` (symbols).
    pub coherence_block: usize,
    /// Per-UE transmit power `p` (W), same for pilots and data.
    pub tx_power: f64,
    /// Noise power per antenna `σ²` (W).
    pub noise_power: f64,
    /// Side of the square service area (m).
    pub area_side: f64,
    /// Shadowing standard deviation (dB) on the far path-loss branch.
    pub shadowing_std_db: f64,
    /// Shadowing half-power decorrelation distance (m).
    pub shadowing_decorrelation: f64,
    /// Antenna correlation model.
    pub correlation: CorrelationModel,
}

impl Default for SystemConfig {
    /// Baseline network: 100 two-antenna APs, 10 UEs, 10 pilots, 200-symbol
    /// coherence blocks, 23 dBm UE power, −96 dBm noise, 500 m square area,
    /// 8 dB shadowing with 100 m decorrelation, uncorrelated antennas.
    fn default() -> Self {
        SystemConfig {
            num_aps: 100,
            num_ues: 10,
            antennas_per_ap: 2,
            pilot_length: 10,
            coherence_block: 200,
            tx_power: 0.199526231496888,   // 23 dBm
            noise_power: 2.51188643150958e-13, // -96 dBm
            area_side: 500.0,
            shadowing_std_db: 8.0,
            shadowing_decorrelation: 100.0,
            correlation: CorrelationModel::Identity,
        }
    }
}

impl SystemConfig {
    /// Check that every parameter is in its valid range.
    pub fn validate(&self) -> Result<()> {
        fn require(ok: bool, what: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(what.to_string()))
            }
        }
        require(self.num_aps >= 1, "num_aps must be >= 1")?;
        require(self.num_ues >= 1, "num_ues must be >= 1")?;
        require(self.antennas_per_ap >= 1, "antennas_per_ap must be >= 1")?;
        require(self.pilot_length >= 1, "pilot_length must be >= 1")?;
        require(
            self.coherence_block > self.pilot_length,
            "coherence_block must exceed pilot_length",
        )?;
        require(
            self.tx_power.is_finite() && self.tx_power > 0.0,
            "tx_power must be positive",
        )?;
        require(
            self.noise_power.is_finite() && self.noise_power > 0.0,
            "noise_power must be positive",
        )?;
        require(
            self.area_side.is_finite() && self.area_side > 0.0,
            "area_side must be positive",
        )?;
        require(
            self.shadowing_std_db.is_finite() && self.shadowing_std_db >= 0.0,
            "shadowing_std_db must be non-negative",
        )?;
        require(
            self.shadowing_decorrelation.is_finite() && self.shadowing_decorrelation > 0.0,
            "shadowing_decorrelation must be positive",
        )?;
        if let CorrelationModel::Exponential { coefficient } = self.correlation {
            require(
                (0.0..1.0).contains(&coefficient),
                "exponential correlation coefficient must lie in [0, 1)",
            )?;
        }
        Ok(())
    }

    /// Pre-log factor of the spectral efficiency: fraction of the coherence
    /// block left for data, `(τ_c − τ_p) / τ_c`.
    pub fn prelog(&self) -> f64 {
        (self.coherence_block - self.pilot_length) as f64 / self.coherence_block as f64
    }

    /// Noise-to-transmit-power ratio `σ² / p`, the regularizer appearing in
    /// every MMSE combiner.
    pub fn noise_over_power(&self) -> f64 {
        self.noise_power / self.tx_power
    }
}

/// A single network realization: positions and large-scale fading.
#[derive(Debug, Clone)]
pub struct Deployment {
    /// AP positions, `(x, y)` in meters.
    pub ap_positions: Vec<[f64; 2]>,
    /// UE positions, `(x, y)` in meters.
    pub ue_positions: Vec<[f64; 2]>,
    /// Shadowing values in dB, `K × L` (zero on near branches).
    pub shadowing_db: RMat,
    /// Large-scale fading coefficients `β` (linear), `K × L`.
    pub betas: RMat,
    /// Eigenvalue mass (dB² units) clipped while factorizing the shadowing
    /// covariance; non-zero values indicate round-off leakage only.
    pub clipped_shadowing_mass: f64,
}

impl Deployment {
    /// AP indices sorted by total large-scale gain `Σ_k β_kl`, descending.
    ///
    /// This is the recommended processing order for serial (unidirectional)
    /// CSI sharing: APs with the strongest aggregate channels act last and
    /// therefore benefit from the most side information.
    pub fn aps_by_total_gain_desc(&self) -> Vec<usize> {
        let l = self.betas.ncols();
        let mut totals: Vec<(usize, f64)> = (0..l)
            .map(|j| (j, self.betas.column(j).sum()))
            .collect();
        totals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        totals.into_iter().map(|(j, _)| j).collect()
    }
}

/// Three-slope path loss in dB as a function of distance in meters.
///
/// Flat within 10 m, 20 dB/decade between 10 m and 50 m, 35 dB/decade
/// beyond. The first two branches join continuously at 10 m; the 50 m
/// breakpoint has a sub-0.02 dB seam inherited from the model constants.
pub fn path_loss_db(distance: f64) -> f64 {
    if distance < 10.0 {
        -81.2
    } else if distance < 50.0 {
        -61.2 - 20.0 * distance.log10()
    } else {
        -35.7 - 35.0 * distance.log10()
    }
}

/// Euclidean distance between two points in the plane.
pub fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Shadowing correlation kernel between two points: `2^(−d / decorr)`.
fn shadowing_kernel(points: &[[f64; 2]], decorrelation: f64) -> RMat {
    let n = points.len();
    RMat::from_fn(n, n, |i, j| {
        let d = planar_distance(points[i], points[j]);
        (2.0f64).powf(-d / decorrelation)
    })
}

/// Full `(K·L) × (K·L)` shadowing covariance in dB², row-major over `(k, l)`
/// pairs (index `k·L + l`).
///
/// Entry `[(k,l), (i,j)]` is `(σ_sh²/2) · (2^(−δ_ki/d₀) + 2^(−υ_lj/d₀))`
/// with `δ` the UE–UE distance, `υ` the AP–AP distance, and `d₀` the
/// decorrelation distance. This is what [`sample_shadowing`] factorizes.
pub fn shadowing_covariance(
    ue_positions: &[[f64; 2]],
    ap_positions: &[[f64; 2]],
    std_db: f64,
    decorrelation: f64,
) -> RMat {
    let k = ue_positions.len();
    let l = ap_positions.len();
    let ue_kernel = shadowing_kernel(ue_positions, decorrelation);
    let ap_kernel = shadowing_kernel(ap_positions, decorrelation);
    let half_var = std_db * std_db / 2.0;
    RMat::from_fn(k * l, k * l, |row, col| {
        let (k1, l1) = (row / l, row % l);
        let (k2, l2) = (col / l, col % l);
        half_var * (ue_kernel[(k1, k2)] + ap_kernel[(l1, l2)])
    })
}

/// Sample one realization of the correlated shadowing field, `K × L` in dB.
///
/// The covariance returned by [`shadowing_covariance`] is a sum of two
/// Kronecker products, `(σ²/2)(A ⊗ 1_L·1_Lᵀ + 1_K·1_Kᵀ ⊗ B)`, so it admits
/// the exact factorization `F = √(σ²/2) [A^{1/2} ⊗ 1_L | 1_K ⊗ B^{1/2}]`
/// with `F·Fᵀ` equal to the full matrix. Sampling therefore draws one
/// correlated Gaussian per UE and one per AP and sums them, instead of
/// factorizing the dense `(K·L)²` matrix. The per-point kernels are PSD up
/// to round-off; negative eigenvalue leakage is clipped to zero and the
/// clipped mass reported (second return value, dB² units).
///
/// Draw order is fixed: `K` standard normals for the UE component, then `L`
/// for the AP component.
pub fn sample_shadowing<R: Rng + ?Sized>(
    ue_positions: &[[f64; 2]],
    ap_positions: &[[f64; 2]],
    std_db: f64,
    decorrelation: f64,
    rng: &mut R,
) -> (RMat, f64) {
    let k = ue_positions.len();
    let l = ap_positions.len();
    if std_db == 0.0 {
        return (RMat::zeros(k, l), 0.0);
    }
    let (ue_factor, ue_clip) = psd_factor_real(&shadowing_kernel(ue_positions, decorrelation), 1e-12);
    let (ap_factor, ap_clip) = psd_factor_real(&shadowing_kernel(ap_positions, decorrelation), 1e-12);
    let u = RVec::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = RVec::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = &ue_factor * u;
    let y = &ap_factor * v;
    let scale = std_db / (2.0f64).sqrt();
    let field = RMat::from_fn(k, l, |i, j| scale * (x[i] + y[j]));
    let half_var = std_db * std_db / 2.0;
    (field, half_var * (ue_clip + ap_clip))
}

/// Drop APs and UEs uniformly on the square and compute large-scale fading.
///
/// `β_kl = 10^((PL(d_kl) + F_kl)/10)` with shadowing `F` applied only on the
/// far (≥ 50 m) path-loss branch. Position draws come from `position_rng`
/// (AP x/y pairs first, then UE), shadowing from `shadowing_rng`, so the two
/// stages can be seeded independently.
pub fn deploy<R: Rng + ?Sized>(
    config: &SystemConfig,
    position_rng: &mut R,
    shadowing_rng: &mut R,
) -> Deployment {
    let side = config.area_side;
    let ap_positions: Vec<[f64; 2]> = (0..config.num_aps)
        .map(|_| [position_rng.random::<f64>() * side, position_rng.random::<f64>() * side])
        .collect();
    let ue_positions: Vec<[f64; 2]> = (0..config.num_ues)
        .map(|_| [position_rng.random::<f64>() * side, position_rng.random::<f64>() * side])
        .collect();
    let (shadowing, clipped) = sample_shadowing(
        &ue_positions,
        &ap_positions,
        config.shadowing_std_db,
        config.shadowing_decorrelation,
        shadowing_rng,
    );
    let mut shadowing_db = RMat::zeros(config.num_ues, config.num_aps);
    let betas = RMat::from_fn(config.num_ues, config.num_aps, |k, l| {
        let d = planar_distance(ue_positions[k], ap_positions[l]);
        let f = if d >= 50.0 { shadowing[(k, l)] } else { 0.0 };
        shadowing_db[(k, l)] = f;
        10.0f64.powf((path_loss_db(d) + f) / 10.0)
    });
    Deployment {
        ap_positions,
        ue_positions,
        shadowing_db,
        betas,
        clipped_shadowing_mass: clipped,
    }
}
