//! Receive combiners under different CSI-sharing patterns.
//!
//! Every combiner here factors through the same two-stage structure: a local
//! MMSE stage `A_l` that depends only on AP `l`'s own estimates, followed by
//! a `K × K` mixing matrix that encodes how much the AP knows about the rest
//! of the network:
//!
//! * **Local MMSE** — no sharing: `V_l = A_l`.
//! * **Centralized** — full instantaneous CSI at a central point: the mixing
//!   matrices solve a coupled block system in the per-AP statistics
//!   `Λ_l = Ĥ_lᴴ A_l`, and the result coincides with the centralized MMSE
//!   combiner computed on the stacked `L·N`-dimensional channel.
//! * **Unidirectional (serial)** — AP `l` knows the estimates of APs
//!   processed before it; the optimal combiner follows a backward recursion
//!   in deterministic statistics `Π` and a forward sweep over realizations.
//! * **Statistical** — only long-term statistics are shared: the same block
//!   system as the centralized case, but driven by `E{Λ_l}`.
//!
//! The per-realization matrices `Λ_l` are Hermitian with eigenvalues in
//! `[0, 1)` (strictly below one thanks to the noise floor), which makes all
//! linear systems below Hermitian positive-definite except the serial-sweep
//! resolvent, which is solved by LU.

use crate::channel::{complex_gaussian, CorrelationSet};
use crate::error::Error;
use crate::geometry::SystemConfig;
use crate::linalg::{ceye, cr, hermitian_part, hpd_cholesky, CMat};
use crate::pilot::{EstimateSet, EstimateStatistics, PilotAssignment};
use crate::Result;
use nalgebra::LU;
use rand::Rng;
use serde::Serialize;

/// Combining scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Per-AP MMSE with no CSI sharing.
    LocalMmse,
    /// Team-optimal combiner for serial (unidirectional) CSI sharing.
    UniTmmse,
    /// Team-optimal combiner with full CSI at a central unit.
    CentTmmse,
    /// Team-optimal combiner sharing only channel statistics.
    StatTmmse,
    /// Centralized MMSE on the stacked channel (benchmark; equals
    /// [`Scheme::CentTmmse`] realization by realization).
    CentMmse,
}

impl Scheme {
    /// All schemes in canonical order.
    pub const ALL: [Scheme; 5] = [
        Scheme::CentTmmse,
        Scheme::CentMmse,
        Scheme::UniTmmse,
        Scheme::StatTmmse,
        Scheme::LocalMmse,
    ];

    /// Stable label used in CSV output and config files.
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::LocalMmse => "local_mmse",
            Scheme::UniTmmse => "uni_tmmse",
            Scheme::CentTmmse => "cent_tmmse",
            Scheme::StatTmmse => "stat_tmmse",
            Scheme::CentMmse => "cent_mmse",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .iter()
            .copied()
            .find(|scheme| scheme.label() == s)
            .ok_or_else(|| Error::SpecParse(format!("unknown scheme '{s}'")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One combiner per AP for every UE.
#[derive(Debug, Clone)]
pub struct CombinerSet {
    /// Per-AP combiner matrices, `N × K`; column `k` is `v_kl`.
    pub per_ap: Vec<CMat>,
}

/// Local MMSE stage shared by every scheme.
#[derive(Debug, Clone)]
pub struct LocalStage {
    /// `A_l = B_l⁻¹ Ĥ_l` with
    /// `B_l = Ĥ_l Ĥ_lᴴ + Σ_i C_il + (σ²/p) I_N`; `N × K`.
    pub a: Vec<CMat>,
    /// `Λ_l = Ĥ_lᴴ A_l`; Hermitian `K × K`, eigenvalues in `[0, 1)`.
    pub lambda: Vec<CMat>,
}

/// Deterministic part of `B_l`: `Σ_i C_il + (σ²/p) I_N`.
pub(crate) fn local_base(stats: &EstimateStatistics, config: &SystemConfig, ap: usize) -> CMat {
    let n = config.antennas_per_ap;
    let mut base = ceye(n).scale(config.noise_over_power());
    for ue in 0..config.num_ues {
        base += stats.error_cov(ue, ap);
    }
    base
}

/// Local stage from one AP's estimates and its deterministic base matrix.
fn local_stage_at(h_hat: &CMat, base: &CMat) -> Result<(CMat, CMat)> {
    let b = h_hat * h_hat.adjoint() + base;
    let chol = hpd_cholesky(&b).ok_or(Error::SingularSystem {
        context: "local MMSE stage",
    })?;
    let a = chol.solve(h_hat);
    let lambda = hermitian_part(&(h_hat.adjoint() * &a));
    Ok((a, lambda))
}

/// Compute the local stage `(A_l, Λ_l)` for every AP.
pub fn local_stage(
    est: &EstimateSet,
    stats: &EstimateStatistics,
    config: &SystemConfig,
) -> Result<LocalStage> {
    let mut a = Vec::with_capacity(config.num_aps);
    let mut lambda = Vec::with_capacity(config.num_aps);
    for ap in 0..config.num_aps {
        let base = local_base(stats, config, ap);
        let (a_l, lambda_l) = local_stage_at(&est.per_ap[ap], &base)?;
        a.push(a_l);
        lambda.push(lambda_l);
    }
    Ok(LocalStage { a, lambda })
}

/// Local MMSE combiner: each AP uses its local stage directly.
pub fn local_mmse(local: &LocalStage) -> CombinerSet {
    CombinerSet {
        per_ap: local.a.clone(),
    }
}

/// Serial-sweep resolvent: `S = (I − ΠΛ)⁻¹(I − Π)` and `S̄ = I − ΛS`.
///
/// For any contraction pair these satisfy `S + Π S̄ = I`, the identity that
/// lets the serial sweep telescope. Returns `None` when `(I − ΠΛ)` is
/// numerically singular.
pub fn serial_resolvent(pi: &CMat, lambda: &CMat) -> Option<(CMat, CMat)> {
    let k = pi.nrows();
    let id = ceye(k);
    let lu = LU::new(&id - pi * lambda);
    let s = lu.solve(&(&id - pi))?;
    let s_bar = &id - lambda * &s;
    Some((s, s_bar))
}

/// Deterministic statistics driving the serial (unidirectional) combiner.
///
/// `ap_order[s]` is the AP processed at position `s`; all matrices are
/// indexed by position, not by AP. `pi[s]` summarizes the expected effect of
/// every AP downstream of position `s` and obeys the backward recursion
/// `pi[s−1] = E{Λ S}[s] + pi[s] · E{S̄}[s]` with `pi[last] = 0`.
#[derive(Debug, Clone)]
pub struct TeamStatistics {
    /// Processing order (position → AP index).
    pub ap_order: Vec<usize>,
    /// `Π` per position.
    pub pi: Vec<CMat>,
    /// `E{Λ S}` per position.
    pub mean_lambda_s: Vec<CMat>,
    /// `E{S̄}` per position.
    pub mean_s_bar: Vec<CMat>,
    /// `E{Λ}` per position (drives the statistical combiner).
    pub mean_lambda: Vec<CMat>,
    /// Monte Carlo samples requested per AP.
    pub samples: usize,
    /// Samples discarded because a resolvent was singular (counted over all
    /// positions; exceptional).
    pub discarded: usize,
}

impl TeamStatistics {
    /// Assemble statistics from externally computed per-position means,
    /// applying the backward `Π` recursion.
    ///
    /// The means at position `s` must already be computed with the `Π` that
    /// this recursion produces at `s`; this holds automatically when they
    /// come from [`estimate_team_statistics`], and the last position is
    /// unconstrained because `Π` vanishes there.
    pub fn from_means(
        ap_order: Vec<usize>,
        mean_lambda_s: Vec<CMat>,
        mean_s_bar: Vec<CMat>,
        mean_lambda: Vec<CMat>,
        samples: usize,
        discarded: usize,
    ) -> Self {
        let l = ap_order.len();
        let k = mean_lambda_s[0].nrows();
        let mut pi = vec![CMat::zeros(k, k); l];
        for s in (1..l).rev() {
            pi[s - 1] = &mean_lambda_s[s] + &pi[s] * &mean_s_bar[s];
        }
        TeamStatistics {
            ap_order,
            pi,
            mean_lambda_s,
            mean_s_bar,
            mean_lambda,
            samples,
            discarded,
        }
    }
}

/// Draw one realization of AP `ap`'s local estimates `Ĥ_l` (`N × K`).
///
/// Channels are drawn UE-by-UE, then pilot noise for every pilot; the same
/// order as the full-network samplers restricted to one AP.
fn sample_local_estimates<R: Rng + ?Sized>(
    corr: &CorrelationSet,
    stats: &EstimateStatistics,
    assignment: &PilotAssignment,
    config: &SystemConfig,
    ap: usize,
    rng: &mut R,
) -> CMat {
    let n = config.antennas_per_ap;
    let k_total = config.num_ues;
    let amp = (config.tx_power * config.pilot_length as f64).sqrt();
    let noise_std = config.noise_power.sqrt();
    let mut h = CMat::zeros(n, k_total);
    for ue in 0..k_total {
        h.set_column(ue, &(corr.factor(ue, ap) * complex_gaussian(n, rng)));
    }
    let mut z = Vec::with_capacity(assignment.num_pilots());
    for t in 0..assignment.num_pilots() {
        let mut obs = complex_gaussian(n, rng).scale(noise_std);
        for &i in assignment.sharers(t) {
            obs += h.column(i).scale(amp);
        }
        z.push(obs);
    }
    let mut h_hat = CMat::zeros(n, k_total);
    for ue in 0..k_total {
        h_hat.set_column(ue, &(stats.gain(ue, ap) * &z[assignment.pilot_of[ue]]));
    }
    h_hat
}

/// Estimate the serial-combiner statistics by Monte Carlo.
///
/// Walks the processing order backwards; at each position it draws `samples`
/// fresh realizations of that AP's local estimates (independent across
/// positions), forms `Λ`, and averages `Λ S`, `S̄`, and `Λ` under the `Π`
/// already computed for that position. Samples whose resolvent is singular
/// are discarded and counted.
pub fn estimate_team_statistics<R: Rng + ?Sized>(
    corr: &CorrelationSet,
    stats: &EstimateStatistics,
    assignment: &PilotAssignment,
    config: &SystemConfig,
    ap_order: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<TeamStatistics> {
    let l_total = ap_order.len();
    let k_total = config.num_ues;
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "team statistics need at least one sample".into(),
        ));
    }
    if l_total != config.num_aps {
        return Err(Error::InvalidConfig(format!(
            "ap_order has {} entries for {} APs",
            l_total, config.num_aps
        )));
    }
    let zeros = CMat::zeros(k_total, k_total);
    let mut pi = vec![zeros.clone(); l_total];
    let mut mean_lambda_s = vec![zeros.clone(); l_total];
    let mut mean_s_bar = vec![zeros.clone(); l_total];
    let mut mean_lambda = vec![zeros.clone(); l_total];
    let mut discarded = 0usize;
    for s in (0..l_total).rev() {
        let ap = ap_order[s];
        let base = local_base(stats, config, ap);
        let mut acc_ls = zeros.clone();
        let mut acc_sbar = zeros.clone();
        let mut acc_l = zeros.clone();
        let mut kept = 0usize;
        for _ in 0..samples {
            let h_hat = sample_local_estimates(corr, stats, assignment, config, ap, rng);
            let (_, lambda) = local_stage_at(&h_hat, &base)?;
            match serial_resolvent(&pi[s], &lambda) {
                Some((s_mat, s_bar)) => {
                    acc_ls += &lambda * &s_mat;
                    acc_sbar += s_bar;
                    acc_l += lambda;
                    kept += 1;
                }
                None => discarded += 1,
            }
        }
        if kept == 0 {
            return Err(Error::SingularSystem {
                context: "team statistics estimation",
            });
        }
        let w = cr(1.0 / kept as f64);
        mean_lambda_s[s] = acc_ls * w;
        mean_s_bar[s] = acc_sbar * w;
        mean_lambda[s] = hermitian_part(&(acc_l * w));
        if s > 0 {
            pi[s - 1] = &mean_lambda_s[s] + &pi[s] * &mean_s_bar[s];
        }
    }
    Ok(TeamStatistics {
        ap_order: ap_order.to_vec(),
        pi,
        mean_lambda_s,
        mean_s_bar,
        mean_lambda,
        samples,
        discarded,
    })
}

/// Team-optimal combiner for serial (unidirectional) CSI sharing.
///
/// Forward sweep in processing order: at position `s` with AP `l`,
/// `V_l = A_l · S_s · P_s` where `P_s = S̄ · … · S̄` accumulates the
/// upstream residual transforms (`P_0 = I`), `S_s` is the resolvent built
/// from this realization's `Λ_l` and the deterministic `Π` at `s`.
pub fn unidirectional_tmmse(local: &LocalStage, stats: &TeamStatistics) -> Result<CombinerSet> {
    let l_total = local.a.len();
    let k_total = local.lambda[0].nrows();
    let mut per_ap = vec![CMat::zeros(0, 0); l_total];
    let mut prefix = ceye(k_total);
    for s in 0..l_total {
        let ap = stats.ap_order[s];
        let lambda = &local.lambda[ap];
        let (s_mat, s_bar) = serial_resolvent(&stats.pi[s], lambda).ok_or(Error::SingularSystem {
            context: "serial combiner resolvent",
        })?;
        per_ap[ap] = &local.a[ap] * (&s_mat * &prefix);
        prefix = &s_bar * prefix;
    }
    Ok(CombinerSet { per_ap })
}

/// Solve the coupled mixing system `T_l + Σ_{j≠l} Λ_j T_j = I_K`.
///
/// Eliminating the shared sum `W = Σ_j Λ_j T_j` gives
/// `W = (I + Φ)⁻¹ Φ` with `Φ = Σ_l Λ_l (I − Λ_l)⁻¹` and then
/// `T_l = (I − Λ_l)⁻¹ (I − W)`; every factor is Hermitian positive-definite
/// because the `Λ_l` are Hermitian contractions. Cost is `O(L·K³)` instead
/// of the `O((L·K)³)` of the naive stacked solve.
pub fn solve_coupling(lambdas: &[CMat]) -> Result<Vec<CMat>> {
    let k = lambdas[0].nrows();
    let id = ceye(k);
    let mut chols = Vec::with_capacity(lambdas.len());
    let mut phi = CMat::zeros(k, k);
    for lambda in lambdas {
        let chol = hpd_cholesky(&(&id - lambda)).ok_or(Error::SingularSystem {
            context: "mixing system: I - Λ",
        })?;
        phi += chol.solve(lambda);
        chols.push(chol);
    }
    let w_chol = hpd_cholesky(&(&id + hermitian_part(&phi))).ok_or(Error::SingularSystem {
        context: "mixing system: I + Φ",
    })?;
    let w = w_chol.solve(&hermitian_part(&phi));
    let rhs = &id - w;
    Ok(chols.into_iter().map(|ch| ch.solve(&rhs)).collect())
}

/// Team-optimal combiner with full CSI sharing: `V_l = A_l T_l` where the
/// `T_l` solve the realization's mixing system.
pub fn centralized_tmmse(local: &LocalStage) -> Result<CombinerSet> {
    let t = solve_coupling(&local.lambda)?;
    let per_ap = local
        .a
        .iter()
        .zip(t.iter())
        .map(|(a, t_l)| a * t_l)
        .collect();
    Ok(CombinerSet { per_ap })
}

/// Deterministic mixing matrices for the statistical combiner, indexed by
/// AP. Solved once per deployment from `E{Λ_l}`.
#[derive(Debug, Clone)]
pub struct StatCoefficients {
    /// Mixing matrix `T_l` per AP.
    pub t: Vec<CMat>,
}

/// Solve the statistical mixing system from estimated mean statistics.
pub fn statistical_coefficients(stats: &TeamStatistics) -> Result<StatCoefficients> {
    let l_total = stats.ap_order.len();
    let k = stats.mean_lambda[0].nrows();
    let mut by_ap = vec![CMat::zeros(k, k); l_total];
    for (s, &ap) in stats.ap_order.iter().enumerate() {
        by_ap[ap] = stats.mean_lambda[s].clone();
    }
    Ok(StatCoefficients {
        t: solve_coupling(&by_ap)?,
    })
}

/// Team-optimal combiner under statistics-only sharing: `V_l = A_l T_l`
/// with deterministic `T_l`.
pub fn statistical_tmmse(local: &LocalStage, coeffs: &StatCoefficients) -> CombinerSet {
    let per_ap = local
        .a
        .iter()
        .zip(coeffs.t.iter())
        .map(|(a, t_l)| a * t_l)
        .collect();
    CombinerSet { per_ap }
}

/// Centralized MMSE combiner on the stacked `L·N`-dimensional channel:
/// `v_k = M⁻¹ ĥ_k` with
/// `M = Ĥ Ĥᴴ + blockdiag(Σ_i C_il) + (σ²/p) I_{L·N}`.
///
/// Benchmark implementation; mathematically identical (realization by
/// realization) to [`centralized_tmmse`], which computes the same combiner
/// in `O(L·K³ + L·N³)` instead of `O((L·N)³)`.
pub fn centralized_mmse(
    est: &EstimateSet,
    stats: &EstimateStatistics,
    config: &SystemConfig,
) -> Result<CombinerSet> {
    let (l_total, n, k_total) = (config.num_aps, config.antennas_per_ap, config.num_ues);
    let dim = l_total * n;
    let mut stacked = CMat::zeros(dim, k_total);
    for ap in 0..l_total {
        stacked.view_mut((ap * n, 0), (n, k_total)).copy_from(&est.per_ap[ap]);
    }
    let mut m = &stacked * stacked.adjoint();
    for ap in 0..l_total {
        let mut block = m.view_mut((ap * n, ap * n), (n, n));
        let base = local_base(stats, config, ap);
        block += base;
    }
    let chol = hpd_cholesky(&m).ok_or(Error::SingularSystem {
        context: "stacked centralized MMSE",
    })?;
    let v = chol.solve(&stacked);
    let per_ap = (0..l_total)
        .map(|ap| v.view((ap * n, 0), (n, k_total)).into_owned())
        .collect();
    Ok(CombinerSet { per_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_correlation, sample_channel};
    use crate::geometry::Deployment;
    use crate::linalg::{max_abs, RMat};
    use crate::pilot::{assign_pilots, mmse_estimate, pilot_observation};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn config(k: usize, l: usize, n: usize, tp: usize) -> SystemConfig {
        SystemConfig {
            num_ues: k,
            num_aps: l,
            antennas_per_ap: n,
            pilot_length: tp,
            ..SystemConfig::default()
        }
    }

    fn deployment(k: usize, l: usize, seed: u64) -> Deployment {
        // Spread of large-scale coefficients around 1e-9, deterministic.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let betas = RMat::from_fn(k, l, |_, _| 1e-9 * (0.2 + 1.8 * rng.random::<f64>()));
        Deployment {
            ap_positions: vec![[0.0, 0.0]; l],
            ue_positions: vec![[0.0, 0.0]; k],
            shadowing_db: RMat::zeros(k, l),
            betas,
            clipped_shadowing_mass: 0.0,
        }
    }

    struct Scenario {
        cfg: SystemConfig,
        corr: crate::channel::CorrelationSet,
        assignment: PilotAssignment,
        stats: EstimateStatistics,
    }

    fn scenario(k: usize, l: usize, n: usize, tp: usize, seed: u64) -> Scenario {
        let cfg = config(k, l, n, tp);
        let corr = build_correlation(&cfg, &deployment(k, l, seed)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xA5A5);
        let assignment = assign_pilots(&cfg, &mut rng);
        let stats = EstimateStatistics::new(&corr, &assignment, &cfg).unwrap();
        Scenario {
            cfg,
            corr,
            assignment,
            stats,
        }
    }

    fn draw_local(sc: &Scenario, seed: u64) -> (LocalStage, EstimateSet) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let channel = sample_channel(&sc.corr, &mut rng);
        let obs = pilot_observation(&channel, &sc.assignment, &sc.cfg, &mut rng);
        let est = mmse_estimate(&obs, &sc.stats, &sc.assignment);
        let local = local_stage(&est, &sc.stats, &sc.cfg).unwrap();
        (local, est)
    }

    #[test]
    fn scalar_local_stage_closed_form() {
        // N = K = 1 with error-free estimation base: A = ĥ / (|ĥ|² + σ²/p)
        // and Λ = |ĥ|² / (|ĥ|² + σ²/p).
        let h = CMat::from_element(1, 1, Complex64::new(2.0, 0.0));
        let noise_over_power = 0.5;
        let base = CMat::from_element(1, 1, cr(noise_over_power));
        let (a, lambda) = local_stage_at(&h, &base).unwrap();
        assert_relative_eq!(a[(0, 0)].re, 2.0 / 4.5, max_relative = 1e-12);
        assert_relative_eq!(a[(0, 0)].im, 0.0);
        assert_relative_eq!(lambda[(0, 0)].re, 4.0 / 4.5, max_relative = 1e-12);
        // Complex estimate: A keeps the phase of ĥ (no conjugation).
        let h = CMat::from_element(1, 1, Complex64::new(0.0, 2.0));
        let (a, _) = local_stage_at(&h, &base).unwrap();
        assert_relative_eq!(a[(0, 0)].im, 2.0 / 4.5, max_relative = 1e-12);
        assert_relative_eq!(a[(0, 0)].re, 0.0);
    }

    #[test]
    fn lambda_is_hermitian_contraction() {
        let sc = scenario(4, 3, 2, 4, 77);
        let (local, _) = draw_local(&sc, 1);
        for lambda in &local.lambda {
            assert!(max_abs(&(lambda - lambda.adjoint())) < 1e-14);
            let eig = lambda.clone().symmetric_eigen();
            for &v in eig.eigenvalues.iter() {
                assert!(v >= -1e-14, "negative eigenvalue {v}");
                assert!(v < 1.0, "eigenvalue {v} not strictly below one");
            }
        }
    }

    #[test]
    fn single_ap_schemes_collapse_to_local() {
        // With L = 1 there is nothing to share: every scheme returns A_1.
        let sc = scenario(3, 1, 2, 3, 5);
        let (local, est) = draw_local(&sc, 2);
        let scale = max_abs(&local.a[0]);
        let cent = centralized_tmmse(&local).unwrap();
        assert!(max_abs(&(&cent.per_ap[0] - &local.a[0])) / scale < 1e-12);
        let mmse = centralized_mmse(&est, &sc.stats, &sc.cfg).unwrap();
        assert!(max_abs(&(&mmse.per_ap[0] - &local.a[0])) / scale < 1e-12);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let stats = estimate_team_statistics(
            &sc.corr,
            &sc.stats,
            &sc.assignment,
            &sc.cfg,
            &[0],
            50,
            &mut rng,
        )
        .unwrap();
        let uni = unidirectional_tmmse(&local, &stats).unwrap();
        assert!(max_abs(&(&uni.per_ap[0] - &local.a[0])) / scale < 1e-12);
    }

    #[test]
    fn coupling_solver_matches_dense_block_lu() {
        let sc = scenario(3, 4, 2, 3, 9);
        let (local, _) = draw_local(&sc, 11);
        let fast = solve_coupling(&local.lambda).unwrap();
        // Dense oracle: assemble the (L·K)×(L·K) block system directly.
        let (l_total, k) = (4usize, 3usize);
        let dim = l_total * k;
        let mut big = CMat::zeros(dim, dim);
        let mut rhs = CMat::zeros(dim, k);
        for l in 0..l_total {
            rhs.view_mut((l * k, 0), (k, k)).copy_from(&ceye(k));
            for j in 0..l_total {
                // Row l of the stationarity system reads
                // T_l + Σ_{j≠l} Λ_j T_j = I: the coupling carries the
                // *column* AP's statistics.
                let block = if j == l {
                    ceye(k)
                } else {
                    local.lambda[j].clone()
                };
                big.view_mut((l * k, j * k), (k, k)).copy_from(&block);
            }
        }
        let dense = LU::new(big).solve(&rhs).expect("dense system is regular");
        for l in 0..l_total {
            let block = dense.view((l * k, 0), (k, k)).into_owned();
            assert!(
                max_abs(&(&block - &fast[l])) < 1e-10,
                "block {l} deviates by {}",
                max_abs(&(&block - &fast[l]))
            );
        }
    }

    #[test]
    fn centralized_tmmse_equals_stacked_mmse() {
        let sc = scenario(3, 5, 2, 3, 21);
        for trial in 0..5 {
            let (local, est) = draw_local(&sc, 100 + trial);
            let team = centralized_tmmse(&local).unwrap();
            let stacked = centralized_mmse(&est, &sc.stats, &sc.cfg).unwrap();
            let scale: f64 = stacked
                .per_ap
                .iter()
                .map(max_abs)
                .fold(0.0, f64::max);
            for ap in 0..5 {
                let dev = max_abs(&(&team.per_ap[ap] - &stacked.per_ap[ap]));
                assert!(
                    dev / scale < 1e-10,
                    "trial {trial}, AP {ap}: relative deviation {}",
                    dev / scale
                );
            }
        }
    }

    #[test]
    fn resolvent_identity_holds_for_estimated_statistics() {
        // S + Π S̄ = I for the (Π, Λ) pairs produced by the recursion.
        let sc = scenario(3, 4, 2, 3, 31);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let order: Vec<usize> = (0..4).collect();
        let stats = estimate_team_statistics(
            &sc.corr,
            &sc.stats,
            &sc.assignment,
            &sc.cfg,
            &order,
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(stats.discarded, 0);
        let (local, _) = draw_local(&sc, 77);
        for s in 0..4 {
            let lambda = &local.lambda[stats.ap_order[s]];
            let (s_mat, s_bar) = serial_resolvent(&stats.pi[s], lambda).unwrap();
            let residual = &s_mat + &stats.pi[s] * &s_bar - ceye(3);
            assert!(max_abs(&residual) < 1e-12);
        }
    }

    #[test]
    fn team_statistics_are_deterministic() {
        let sc = scenario(2, 3, 1, 2, 41);
        let order = [2usize, 0, 1];
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            estimate_team_statistics(
                &sc.corr,
                &sc.stats,
                &sc.assignment,
                &sc.cfg,
                &order,
                40,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(5);
        let b = run(5);
        for s in 0..3 {
            assert_eq!(a.pi[s], b.pi[s]);
            assert_eq!(a.mean_lambda[s], b.mean_lambda[s]);
        }
        let c = run(6);
        assert_ne!(a.pi[0], c.pi[0]);
    }

    #[test]
    fn serial_combiner_satisfies_stationarity_in_the_sample_limit() {
        // Fixed-point residual of the serial combiner: build the policy from
        // one statistics estimate and evaluate the stationarity condition
        // with an independent second estimate. The residual is pure
        // statistical noise and must shrink as the training size grows.
        let sc = scenario(2, 3, 1, 2, 51);
        let order: Vec<usize> = (0..3).collect();
        let residual_at = |t: usize| -> f64 {
            let mut rng_a = ChaCha12Rng::seed_from_u64(1000 + t as u64);
            let mut rng_b = ChaCha12Rng::seed_from_u64(2000 + t as u64);
            let stats_a = estimate_team_statistics(
                &sc.corr, &sc.stats, &sc.assignment, &sc.cfg, &order, t, &mut rng_a,
            )
            .unwrap();
            let stats_b = estimate_team_statistics(
                &sc.corr, &sc.stats, &sc.assignment, &sc.cfg, &order, t, &mut rng_b,
            )
            .unwrap();
            let mut total = 0.0;
            let mut count = 0usize;
            for trial in 0..50 {
                let (local, _) = draw_local(&sc, 9000 + trial);
                let comb = unidirectional_tmmse(&local, &stats_a).unwrap();
                // Forward replay: position s sees the realized upstream
                // residual prefix and the downstream summary Π from the
                // independent batch.
                let mut prefix = ceye(2);
                for s in 0..3 {
                    let ap = order[s];
                    let lambda = &local.lambda[ap];
                    let (_, s_bar) = serial_resolvent(&stats_a.pi[s], lambda).unwrap();
                    // Stationarity target: the upstream contributions are
                    // known exactly (they sum to I − prefix) and the
                    // downstream reaction is Π S̄ prefix, evaluated here with
                    // the independent statistics batch.
                    let downstream = &stats_b.pi[s] * (&s_bar * &prefix);
                    let ideal = &local.a[ap] * &(&prefix - &downstream);
                    let dev = max_abs(&(&comb.per_ap[ap] - &ideal));
                    let scale = max_abs(&ideal).max(1e-30);
                    total += dev / scale;
                    count += 1;
                    prefix = &s_bar * prefix;
                }
            }
            total / count as f64
        };
        let coarse = residual_at(100);
        let fine = residual_at(10_000);
        assert!(
            fine < coarse,
            "residual must shrink with training size: {coarse} -> {fine}"
        );
        assert!(fine < 1e-2, "residual at T=10⁴ is {fine}");
    }

    #[test]
    fn statistical_coefficients_are_order_invariant() {
        let sc = scenario(2, 3, 2, 2, 61);
        let run = |order: Vec<usize>| {
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let stats = estimate_team_statistics(
                &sc.corr, &sc.stats, &sc.assignment, &sc.cfg, &order, 4000, &mut rng,
            )
            .unwrap();
            statistical_coefficients(&stats).unwrap()
        };
        let a = run(vec![0, 1, 2]);
        let b = run(vec![2, 1, 0]);
        // Same distribution of Λ per AP, so the coefficients agree up to
        // Monte Carlo noise.
        for ap in 0..3 {
            let dev = max_abs(&(&a.t[ap] - &b.t[ap]));
            assert!(dev < 0.1, "AP {ap}: coefficients deviate by {dev}");
        }
    }
}
