//! Deterministic Monte Carlo experiment orchestration.
//!
//! An [`ExperimentSpec`] names a base [`SystemConfig`], the combining schemes
//! to compare, the Monte Carlo budget (deployment drops × evaluation trials ×
//! statistics-training samples), an optional single-parameter sweep, and a
//! root seed. [`run`] executes it and returns one [`RunRecord`] per
//! (sweep value, scheme, AP order, drop, UE).
//!
//! Reproducibility contract:
//!
//! * Every random draw comes from a named [`StreamKind`] stream derived from
//!   `(seed, kind, sweep point, drop, slot)` by hashing, so streams are
//!   independent and stable: adding schemes, reordering sweep values, or
//!   changing the worker count never perturbs the draws of existing streams.
//! * Within a drop, all schemes are evaluated on identical channel and noise
//!   realizations (paired comparison).
//! * Drops run in parallel but results are merged by index, so the CSV output
//!   is byte-identical for a fixed spec and seed regardless of worker count.
//!   Wall time appears only in the metadata sidecar, which is the single
//!   field excluded from the determinism contract.

use crate::channel::{build_correlation, sample_channel, CorrelationSet};
use crate::combining::{
    centralized_mmse, centralized_tmmse, estimate_team_statistics, local_mmse, local_stage,
    statistical_coefficients, statistical_tmmse, unidirectional_tmmse, Scheme, StatCoefficients,
    TeamStatistics,
};
use crate::error::Error;
use crate::evaluation::{empirical_cdf, MomentAccumulator};
use crate::geometry::{deploy, CorrelationModel, Deployment, SystemConfig};
use crate::pilot::{assign_pilots, mmse_estimate, pilot_observation, EstimateStatistics};
use crate::Result;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

/// Environment variable read for the worker count when no explicit value is
/// given (CLI flag > env var > one worker per available core).
pub const WORKERS_ENV: &str = "CFMIMO_THREADS";

// ---------------------------------------------------------------------------
// Named RNG streams
// ---------------------------------------------------------------------------

/// The independent random streams consumed by a run.
///
/// `Deployment`, `Shadowing`, and `PilotAssignment` are drawn once per drop;
/// `TeamTraining` once per drop and AP-order slot; the `Trial*` streams once
/// per evaluation trial. `TrialSymbols` and `TrialDataNoise` are reserved for
/// symbol-level simulation ([`crate::evaluation::receive_combine`]), which
/// the moment-based runner does not need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// AP and UE positions.
    Deployment = 1,
    /// Correlated shadow fading.
    Shadowing = 2,
    /// Pilot assignment shuffle.
    PilotAssignment = 3,
    /// Serial-statistics training draws (slot = AP-order variant).
    TeamTraining = 4,
    /// Per-trial channel realization (slot = trial).
    TrialChannel = 5,
    /// Per-trial pilot noise (slot = trial).
    TrialPilotNoise = 6,
    /// Per-trial data symbols (slot = trial).
    TrialSymbols = 7,
    /// Per-trial receiver noise (slot = trial).
    TrialDataNoise = 8,
}

/// Derive the RNG for one named stream.
///
/// The ChaCha12 seed is `SHA-256(tag ‖ seed ‖ kind ‖ sweep ‖ drop ‖ slot)`,
/// so distinct coordinates give independent streams and no stream depends on
/// scheduling, scheme selection, or the position of a value inside a sweep
/// list. `sweep` identifies the sweep *point* (see [`sweep_stream_tag`]),
/// `drop` the deployment, and `slot` disambiguates draws within a drop
/// (trial index or training variant); unused coordinates are zero.
pub fn stream_rng(seed: u64, kind: StreamKind, sweep: u64, drop: u64, slot: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"cfmimo-stream-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update([kind as u8]);
    hasher.update(sweep.to_le_bytes());
    hasher.update(drop.to_le_bytes());
    hasher.update(slot.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Stream coordinate of a sweep point: zero for an unswept run, otherwise
/// the swept parameter's tag and the value itself (not its list position).
pub fn sweep_stream_tag(point: Option<(SweepParameter, usize)>) -> u64 {
    match point {
        None => 0,
        Some((parameter, value)) => ((parameter.tag() as u64) << 32) | value as u64,
    }
}

/// Sweep coordinate for the deployment and shadowing streams. Sweeping the
/// antenna count or the pilot length leaves the deployment distribution
/// untouched, so those sweeps reuse one deployment per drop across all
/// values and cross-value comparisons are paired.
pub fn deployment_stream_tag(point: Option<(SweepParameter, usize)>) -> u64 {
    match point {
        Some((parameter, _)) if !parameter.affects_deployment() => 0,
        _ => sweep_stream_tag(point),
    }
}

/// Sweep coordinate for the pilot-assignment stream; shared across sweep
/// values whenever the swept parameter does not enter the assignment rule
/// (which depends only on the user count and the pilot length).
pub fn pilot_stream_tag(point: Option<(SweepParameter, usize)>) -> u64 {
    match point {
        Some((parameter, _)) if !parameter.affects_pilot_assignment() => 0,
        _ => sweep_stream_tag(point),
    }
}

// ---------------------------------------------------------------------------
// AP processing order
// ---------------------------------------------------------------------------

/// Concrete AP processing order used by one unidirectional-combiner series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OrderVariant {
    /// Natural AP indexing, `0..L`.
    Index,
    /// APs sorted by descending total channel gain `Σ_k β_kl`.
    DescendingGain,
}

impl OrderVariant {
    /// Stable label used in CSV output.
    pub fn label(&self) -> &'static str {
        match self {
            OrderVariant::Index => "index",
            OrderVariant::DescendingGain => "descending_gain",
        }
    }

    /// Training-stream slot: stable per variant so that enabling one variant
    /// never shifts the draws of the other.
    fn slot(&self) -> u64 {
        match self {
            OrderVariant::Index => 0,
            OrderVariant::DescendingGain => 1,
        }
    }

    fn order(&self, deployment: &Deployment) -> Vec<usize> {
        match self {
            OrderVariant::Index => (0..deployment.ap_positions.len()).collect(),
            OrderVariant::DescendingGain => deployment.aps_by_total_gain_desc(),
        }
    }
}

/// Which AP orders the serial (unidirectional) combiner is evaluated under.
///
/// Only the serial combiner is order-sensitive; every other scheme runs once
/// and is tagged with the `index` order. `Both` evaluates the serial combiner
/// under both orders on the same realizations, which is how the sorted-versus-
/// unsorted comparison is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApOrdering {
    /// Natural indexing only.
    #[default]
    Index,
    /// Descending-gain order only.
    DescendingGain,
    /// Both orders, as two separate series.
    Both,
}

impl ApOrdering {
    /// Stable label used in metadata.
    pub fn label(&self) -> &'static str {
        match self {
            ApOrdering::Index => "index",
            ApOrdering::DescendingGain => "descending_gain",
            ApOrdering::Both => "both",
        }
    }

    /// Order variants the serial combiner runs under.
    pub fn variants(&self) -> &'static [OrderVariant] {
        match self {
            ApOrdering::Index => &[OrderVariant::Index],
            ApOrdering::DescendingGain => &[OrderVariant::DescendingGain],
            ApOrdering::Both => &[OrderVariant::Index, OrderVariant::DescendingGain],
        }
    }
}

impl FromStr for ApOrdering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "false" | "index" => Ok(ApOrdering::Index),
            "true" | "sorted" | "descending_gain" => Ok(ApOrdering::DescendingGain),
            "both" => Ok(ApOrdering::Both),
            other => Err(Error::SpecParse(format!(
                "unknown AP ordering '{other}' (expected true/false/index/sorted/both)"
            ))),
        }
    }
}

impl Serialize for ApOrdering {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for ApOrdering {
    /// Accepts a boolean (`sorted_aps = true`) or a string (`"both"`).
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = ApOrdering;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a boolean or one of \"index\", \"sorted\", \"both\"")
            }

            fn visit_bool<E: serde::de::Error>(self, v: bool) -> std::result::Result<ApOrdering, E> {
                Ok(if v { ApOrdering::DescendingGain } else { ApOrdering::Index })
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<ApOrdering, E> {
                v.parse().map_err(E::custom)
            }
        }
        deserializer.deserialize_any(V)
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// System parameter a run can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    /// Number of access points.
    NumAps,
    /// Pilot sequence length.
    PilotLength,
    /// Antennas per AP.
    Antennas,
    /// Number of user equipments.
    NumUes,
}

impl SweepParameter {
    /// Stable label used in CSV output and sweep expressions.
    pub fn label(&self) -> &'static str {
        match self {
            SweepParameter::NumAps => "num_aps",
            SweepParameter::PilotLength => "pilot_length",
            SweepParameter::Antennas => "antennas",
            SweepParameter::NumUes => "num_ues",
        }
    }

    /// Stream-tag discriminant (see [`sweep_stream_tag`]).
    fn tag(&self) -> u8 {
        match self {
            SweepParameter::NumAps => 1,
            SweepParameter::PilotLength => 2,
            SweepParameter::Antennas => 3,
            SweepParameter::NumUes => 4,
        }
    }

    /// Overwrite the swept field of a config.
    pub fn apply(&self, config: &mut SystemConfig, value: usize) {
        match self {
            SweepParameter::NumAps => config.num_aps = value,
            SweepParameter::PilotLength => config.pilot_length = value,
            SweepParameter::Antennas => config.antennas_per_ap = value,
            SweepParameter::NumUes => config.num_ues = value,
        }
    }

    /// Whether the parameter changes the deployment distribution (positions
    /// and large-scale fading). When it does not, drops share one deployment
    /// across sweep values so cross-value trends are paired.
    fn affects_deployment(&self) -> bool {
        matches!(self, SweepParameter::NumAps | SweepParameter::NumUes)
    }

    /// Whether the parameter changes the pilot-assignment distribution.
    fn affects_pilot_assignment(&self) -> bool {
        matches!(self, SweepParameter::PilotLength | SweepParameter::NumUes)
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "num_aps" => Ok(SweepParameter::NumAps),
            "pilot_length" => Ok(SweepParameter::PilotLength),
            "antennas" => Ok(SweepParameter::Antennas),
            "num_ues" => Ok(SweepParameter::NumUes),
            other => Err(Error::SpecParse(format!(
                "unknown sweep parameter '{other}' \
                 (expected num_aps, pilot_length, antennas, or num_ues)"
            ))),
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A single-parameter sweep: the run is repeated for each value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    /// Which config field varies.
    pub parameter: SweepParameter,
    /// Values to visit, in run order.
    pub values: Vec<usize>,
}

impl FromStr for Sweep {
    /// Parse a sweep expression of the form `num_aps=20,40,60`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, list) = s.split_once('=').ok_or_else(|| {
            Error::SpecParse(format!("sweep '{s}' must look like parameter=v1,v2,..."))
        })?;
        let parameter = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::SpecParse(format!("sweep value '{v}' is not an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::SpecParse(format!("sweep '{s}' has no values")));
        }
        Ok(Sweep { parameter, values })
    }

    type Err = Error;
}

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

/// Everything a run needs: system, schemes, budget, sweep, seed, output.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// Base system parameters (a sweep overrides one field per point).
    pub config: SystemConfig,
    /// Schemes to compare, in output order.
    pub schemes: Vec<Scheme>,
    /// AP orders for the serial combiner.
    pub ap_ordering: ApOrdering,
    /// Independent network deployments.
    pub drops: usize,
    /// Evaluation channel realizations per drop.
    pub trials_per_drop: usize,
    /// Monte Carlo samples per AP when training serial statistics.
    pub training_samples: usize,
    /// Optional parameter sweep.
    pub sweep: Option<Sweep>,
    /// Root seed; every stream is derived from it.
    pub seed: u64,
    /// CSV destination; the metadata sidecar lands next to it.
    pub output_path: PathBuf,
}

impl Default for ExperimentSpec {
    /// Baseline comparison on the default network with the default budget
    /// (50 drops × 500 trials, 2000 training samples).
    fn default() -> Self {
        ExperimentSpec {
            config: SystemConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            ap_ordering: ApOrdering::Index,
            drops: 50,
            trials_per_drop: 500,
            training_samples: 2000,
            sweep: None,
            seed: 1,
            output_path: PathBuf::from("cfmimo_run.csv"),
        }
    }
}

impl ExperimentSpec {
    /// Smallest useful run: 2 single-antenna APs, 2 UEs, one drop of ten
    /// trials. Completes in milliseconds; used by `selftest` and smoke tests.
    pub fn smoke() -> Self {
        let config = SystemConfig {
            num_aps: 2,
            num_ues: 2,
            antennas_per_ap: 1,
            pilot_length: 2,
            ..SystemConfig::default()
        };
        ExperimentSpec {
            config,
            drops: 1,
            trials_per_drop: 10,
            training_samples: 30,
            seed: 7,
            output_path: PathBuf::from("smoke.csv"),
            ..ExperimentSpec::default()
        }
    }

    /// Check the spec, including every sweep point's derived config.
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("no schemes selected".into()));
        }
        for (i, scheme) in self.schemes.iter().enumerate() {
            if self.schemes[..i].contains(scheme) {
                return Err(Error::InvalidConfig(format!(
                    "scheme '{scheme}' listed twice"
                )));
            }
        }
        if self.drops == 0 {
            return Err(Error::InvalidConfig("drops must be >= 1".into()));
        }
        if self.trials_per_drop == 0 {
            return Err(Error::InvalidConfig("trials_per_drop must be >= 1".into()));
        }
        if self.training_samples == 0 {
            return Err(Error::InvalidConfig("training_samples must be >= 1".into()));
        }
        for (_, config) in self.sweep_points() {
            config.validate()?;
        }
        Ok(())
    }

    /// The configs a run visits: the base config, or one per sweep value.
    pub fn sweep_points(&self) -> Vec<(Option<(SweepParameter, usize)>, SystemConfig)> {
        match &self.sweep {
            None => vec![(None, self.config.clone())],
            Some(sweep) => sweep
                .values
                .iter()
                .map(|&value| {
                    let mut config = self.config.clone();
                    sweep.parameter.apply(&mut config, value);
                    (Some((sweep.parameter, value)), config)
                })
                .collect(),
        }
    }

    /// SHA-256 over the canonical JSON form of everything that affects the
    /// numbers (system, schemes, ordering, budget, sweep, seed — not the
    /// output path). Stamped into the CSV header and the metadata sidecar.
    pub fn digest(&self) -> String {
        let value = json!({
            "system": self.config,
            "schemes": self.schemes.iter().map(|s| s.label()).collect::<Vec<_>>(),
            "ap_ordering": self.ap_ordering.label(),
            "drops": self.drops,
            "trials_per_drop": self.trials_per_drop,
            "training_samples": self.training_samples,
            "sweep": self.sweep.as_ref().map(|s| {
                json!({ "parameter": s.parameter.label(), "values": s.values })
            }),
            "seed": self.seed,
        });
        let canonical = value.to_string();
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Flat config file / CLI overrides
// ---------------------------------------------------------------------------

/// Optional overrides of an [`ExperimentSpec`], as read from a flat config
/// file or collected from CLI flags. Powers are accepted in dBm and converted
/// to watts exactly once, here.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecPatch {
    /// Root seed.
    pub seed: Option<u64>,
    /// Deployment drops.
    pub drops: Option<usize>,
    /// Evaluation trials per drop.
    pub trials: Option<usize>,
    /// Serial-statistics training samples.
    pub training_samples: Option<usize>,
    /// CSV output path.
    pub out: Option<PathBuf>,
    /// Scheme labels (see [`Scheme::label`]).
    pub schemes: Option<Vec<String>>,
    /// AP ordering: boolean or `"both"`.
    pub sorted_aps: Option<ApOrdering>,
    /// Sweep expression, e.g. `num_aps=20,40,60`.
    pub sweep: Option<String>,
    /// Number of APs.
    pub num_aps: Option<usize>,
    /// Number of UEs.
    pub num_ues: Option<usize>,
    /// Antennas per AP.
    pub antennas: Option<usize>,
    /// Pilot length (symbols).
    pub pilot_length: Option<usize>,
    /// Coherence block length (symbols).
    pub coherence_block: Option<usize>,
    /// UE transmit power in dBm.
    pub uplink_power_dbm: Option<f64>,
    /// Noise power in dBm.
    pub noise_power_dbm: Option<f64>,
    /// Service area side in meters.
    pub area_side: Option<f64>,
    /// Shadowing standard deviation in dB.
    pub shadowing_std_db: Option<f64>,
    /// Shadowing decorrelation distance in meters.
    pub shadowing_decorrelation: Option<f64>,
    /// Antenna correlation: `identity` or `exponential:<r>`.
    pub correlation: Option<String>,
}

/// Convert a dBm level to linear watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Convert linear watts to a dBm level.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Parse a correlation-model expression: `identity` or `exponential:<r>`.
pub fn parse_correlation(s: &str) -> Result<CorrelationModel> {
    if s == "identity" {
        return Ok(CorrelationModel::Identity);
    }
    if let Some(arg) = s.strip_prefix("exponential:") {
        let coefficient = arg.trim().parse::<f64>().map_err(|_| {
            Error::SpecParse(format!("correlation coefficient '{arg}' is not a number"))
        })?;
        return Ok(CorrelationModel::Exponential { coefficient });
    }
    Err(Error::SpecParse(format!(
        "unknown correlation model '{s}' (expected identity or exponential:<r>)"
    )))
}

impl SpecPatch {
    /// Parse a flat TOML config file.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::SpecParse(format!("config file: {e}")))
    }

    /// Apply the overrides on top of a spec.
    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(drops) = self.drops {
            spec.drops = drops;
        }
        if let Some(trials) = self.trials {
            spec.trials_per_drop = trials;
        }
        if let Some(t) = self.training_samples {
            spec.training_samples = t;
        }
        if let Some(out) = &self.out {
            spec.output_path = out.clone();
        }
        if let Some(labels) = &self.schemes {
            spec.schemes = labels
                .iter()
                .map(|label| label.parse())
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(ordering) = self.sorted_aps {
            spec.ap_ordering = ordering;
        }
        if let Some(expr) = &self.sweep {
            spec.sweep = Some(expr.parse()?);
        }
        if let Some(v) = self.num_aps {
            spec.config.num_aps = v;
        }
        if let Some(v) = self.num_ues {
            spec.config.num_ues = v;
        }
        if let Some(v) = self.antennas {
            spec.config.antennas_per_ap = v;
        }
        if let Some(v) = self.pilot_length {
            spec.config.pilot_length = v;
        }
        if let Some(v) = self.coherence_block {
            spec.config.coherence_block = v;
        }
        if let Some(dbm) = self.uplink_power_dbm {
            spec.config.tx_power = dbm_to_watts(dbm);
        }
        if let Some(dbm) = self.noise_power_dbm {
            spec.config.noise_power = dbm_to_watts(dbm);
        }
        if let Some(v) = self.area_side {
            spec.config.area_side = v;
        }
        if let Some(v) = self.shadowing_std_db {
            spec.config.shadowing_std_db = v;
        }
        if let Some(v) = self.shadowing_decorrelation {
            spec.config.shadowing_decorrelation = v;
        }
        if let Some(expr) = &self.correlation {
            spec.config.correlation = parse_correlation(expr)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One finalized result row: a UE's spectral efficiency under one scheme in
/// one drop (at one sweep point).
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Swept parameter, when the run sweeps one.
    pub sweep_parameter: Option<SweepParameter>,
    /// Value of the swept parameter for this row.
    pub sweep_value: Option<usize>,
    /// Combining scheme.
    pub scheme: Scheme,
    /// AP processing order the row was produced under (only the serial
    /// combiner is order-sensitive; other schemes are tagged `index`).
    pub ap_order: OrderVariant,
    /// Deployment index.
    pub drop: usize,
    /// UE index.
    pub ue: usize,
    /// Spectral efficiency, bit/s/Hz.
    pub se: f64,
    /// Hardening-bound MSE behind `se`.
    pub mse: f64,
    /// True when the MSE hit the numerical floor.
    pub mse_clamped: bool,
    /// Optimal post-combining scalar.
    pub alpha: Complex64,
    /// Delta-method standard error of `se`.
    pub se_std_err: f64,
    /// Delta-method standard error of `mse`.
    pub mse_std_err: f64,
}

impl RunRecord {
    /// Plot-series label: the scheme label, with a `_sorted` suffix for the
    /// serial combiner under descending-gain order.
    pub fn series(&self) -> String {
        if self.scheme == Scheme::UniTmmse && self.ap_order == OrderVariant::DescendingGain {
            format!("{}_sorted", self.scheme.label())
        } else {
            self.scheme.label().to_string()
        }
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    sweep_parameter: &'a str,
    sweep_value: Option<usize>,
    scheme: &'static str,
    ap_order: &'static str,
    drop: usize,
    ue: usize,
    se: f64,
    mse: f64,
    mse_clamped: bool,
    alpha_re: f64,
    alpha_im: f64,
    se_std_err: f64,
    mse_std_err: f64,
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Execution knobs that do not affect the numbers.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for the drop loop; `None` = one per available core.
    pub workers: Option<usize>,
}

/// Resolve the worker count: explicit value, else the [`WORKERS_ENV`]
/// environment variable, else `None` (library default).
pub fn resolve_workers(explicit: Option<usize>) -> Result<Option<usize>> {
    if explicit.is_some() {
        return Ok(explicit);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(text) => text
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{WORKERS_ENV}='{text}' is not a number"))),
        Err(_) => Ok(None),
    }
}

/// Aggregated health counters for one run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunDiagnostics {
    /// Largest shadowing covariance mass (dB²) lost to eigenvalue clipping
    /// across drops; zero in exact arithmetic.
    pub max_clipped_shadowing_db2: f64,
    /// Serial-statistics training samples discarded for singular resolvents,
    /// summed over drops; zero in ordinary runs.
    pub training_discarded: usize,
}

impl RunDiagnostics {
    fn absorb(&mut self, other: RunDiagnostics) {
        self.max_clipped_shadowing_db2 = self.max_clipped_shadowing_db2.max(other.max_clipped_shadowing_db2);
        self.training_discarded += other.training_discarded;
    }
}

/// Results of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One row per (sweep point, scheme series, drop, UE), in deterministic
    /// order: sweep points in spec order, drops ascending, schemes in spec
    /// order, UEs ascending.
    pub records: Vec<RunRecord>,
    /// Health counters.
    pub diagnostics: RunDiagnostics,
    /// Wall time of the compute phase (metadata only; excluded from the
    /// determinism contract).
    pub wall_time: Duration,
    /// Worker count the run was asked to use (`None` = library default).
    pub workers: Option<usize>,
}

/// Execute a spec: for every sweep point and drop, deploy a network, train
/// the statistics each selected scheme needs, evaluate all schemes on shared
/// per-trial realizations, and reduce the moments to per-UE records.
pub fn run(spec: &ExperimentSpec, options: &RunOptions) -> Result<RunOutput> {
    spec.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let mut records = Vec::new();
    let mut diagnostics = RunDiagnostics::default();
    for (point, config) in spec.sweep_points() {
        let per_drop: Vec<(Vec<RunRecord>, RunDiagnostics)> = pool.install(|| {
            (0..spec.drops)
                .into_par_iter()
                .map(|drop| run_drop(spec, &config, point, drop))
                .collect::<Result<Vec<_>>>()
        })?;
        for (rows, drop_diag) in per_drop {
            records.extend(rows);
            diagnostics.absorb(drop_diag);
        }
    }
    Ok(RunOutput {
        records,
        diagnostics,
        wall_time: start.elapsed(),
        workers: options.workers,
    })
}

/// One scheme series evaluated within a drop.
struct SeriesPlan {
    scheme: Scheme,
    order: OrderVariant,
}

/// Deterministic per-drop statistics shared by the scheme series.
struct DropContext {
    corr: CorrelationSet,
    estimates: EstimateStatistics,
    assignment: crate::pilot::PilotAssignment,
    team: [Option<TeamStatistics>; 2],
    stat_coeffs: Option<StatCoefficients>,
}

fn run_drop(
    spec: &ExperimentSpec,
    config: &SystemConfig,
    point: Option<(SweepParameter, usize)>,
    drop: usize,
) -> Result<(Vec<RunRecord>, RunDiagnostics)> {
    let seed = spec.seed;
    let sweep = sweep_stream_tag(point);
    let drop_id = drop as u64;

    let deploy_sweep = deployment_stream_tag(point);
    let mut position_rng = stream_rng(seed, StreamKind::Deployment, deploy_sweep, drop_id, 0);
    let mut shadowing_rng = stream_rng(seed, StreamKind::Shadowing, deploy_sweep, drop_id, 0);
    let deployment = deploy(config, &mut position_rng, &mut shadowing_rng);
    let corr = build_correlation(config, &deployment)?;
    let pilot_sweep = pilot_stream_tag(point);
    let mut pilot_rng = stream_rng(seed, StreamKind::PilotAssignment, pilot_sweep, drop_id, 0);
    let assignment = assign_pilots(config, &mut pilot_rng);
    let estimates = EstimateStatistics::new(&corr, &assignment, config)?;

    // Which serial-statistics variants this drop needs. The statistical
    // combiner always consumes the index-order statistics so that its results
    // do not depend on the sorted-APs setting.
    let wants_uni = spec.schemes.contains(&Scheme::UniTmmse);
    let wants_stat = spec.schemes.contains(&Scheme::StatTmmse);
    let uni_variants: &[OrderVariant] = if wants_uni { spec.ap_ordering.variants() } else { &[] };
    let mut needed = [wants_stat || uni_variants.contains(&OrderVariant::Index), false];
    needed[1] = uni_variants.contains(&OrderVariant::DescendingGain);

    let mut team: [Option<TeamStatistics>; 2] = [None, None];
    let mut discarded = 0usize;
    for variant in [OrderVariant::Index, OrderVariant::DescendingGain] {
        let slot = variant.slot() as usize;
        if !needed[slot] {
            continue;
        }
        let order = variant.order(&deployment);
        let mut rng = stream_rng(seed, StreamKind::TeamTraining, sweep, drop_id, variant.slot());
        let stats = estimate_team_statistics(
            &corr,
            &estimates,
            &assignment,
            config,
            &order,
            spec.training_samples,
            &mut rng,
        )?;
        discarded += stats.discarded;
        team[slot] = Some(stats);
    }
    let stat_coeffs = if wants_stat {
        Some(statistical_coefficients(team[0].as_ref().expect("index statistics trained"))?)
    } else {
        None
    };
    let context = DropContext { corr, estimates, assignment, team, stat_coeffs };

    // One series per scheme, in spec order; the serial combiner fans out per
    // order variant.
    let mut plans = Vec::new();
    for &scheme in &spec.schemes {
        if scheme == Scheme::UniTmmse {
            for &order in uni_variants {
                plans.push(SeriesPlan { scheme, order });
            }
        } else {
            plans.push(SeriesPlan { scheme, order: OrderVariant::Index });
        }
    }

    let mut accumulators: Vec<MomentAccumulator> = plans
        .iter()
        .map(|_| MomentAccumulator::new(config.num_ues))
        .collect();

    for trial in 0..spec.trials_per_drop {
        let trial_id = trial as u64;
        let mut channel_rng = stream_rng(seed, StreamKind::TrialChannel, sweep, drop_id, trial_id);
        let channel = sample_channel(&context.corr, &mut channel_rng);
        let mut noise_rng = stream_rng(seed, StreamKind::TrialPilotNoise, sweep, drop_id, trial_id);
        let observations = pilot_observation(&channel, &context.assignment, config, &mut noise_rng);
        let est = mmse_estimate(&observations, &context.estimates, &context.assignment);
        let local = local_stage(&est, &context.estimates, config)?;

        for (plan, accumulator) in plans.iter().zip(accumulators.iter_mut()) {
            let combiners = match plan.scheme {
                Scheme::LocalMmse => local_mmse(&local),
                Scheme::CentTmmse => centralized_tmmse(&local)?,
                Scheme::CentMmse => centralized_mmse(&est, &context.estimates, config)?,
                Scheme::StatTmmse => {
                    statistical_tmmse(&local, context.stat_coeffs.as_ref().expect("coefficients"))
                }
                Scheme::UniTmmse => {
                    let stats = context.team[plan.order.slot() as usize]
                        .as_ref()
                        .expect("serial statistics trained");
                    unidirectional_tmmse(&local, stats)?
                }
            };
            accumulator.accumulate(&combiners, &channel, config);
        }
    }

    let mut rows = Vec::with_capacity(plans.len() * config.num_ues);
    for (plan, accumulator) in plans.iter().zip(accumulators.iter()) {
        let report = accumulator.finalize(config)?;
        for (ue, summary) in report.per_ue.iter().enumerate() {
            rows.push(RunRecord {
                sweep_parameter: point.map(|(p, _)| p),
                sweep_value: point.map(|(_, v)| v),
                scheme: plan.scheme,
                ap_order: plan.order,
                drop,
                ue,
                se: summary.se,
                mse: summary.mse,
                mse_clamped: summary.clamped,
                alpha: summary.alpha,
                se_std_err: summary.se_std_err,
                mse_std_err: summary.mse_std_err,
            });
        }
    }
    let diag = RunDiagnostics {
        max_clipped_shadowing_db2: deployment.clipped_shadowing_mass,
        training_discarded: discarded,
    };
    Ok((rows, diag))
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// Serialize records as CSV. The first line is a comment carrying the schema
/// version and the first 16 hex digits of the spec digest; the second is the
/// column header. Byte-deterministic for fixed records.
pub fn write_records_csv<W: Write>(records: &[RunRecord], digest: &str, mut out: W) -> Result<()> {
    writeln!(out, "# cfmimo-run-schema v1 spec-digest {}", &digest[..16])?;
    let mut writer = csv::Writer::from_writer(out);
    for record in records {
        writer.serialize(CsvRow {
            sweep_parameter: record.sweep_parameter.map_or("", |p| p.label()),
            sweep_value: record.sweep_value,
            scheme: record.scheme.label(),
            ap_order: record.ap_order.label(),
            drop: record.drop,
            ue: record.ue,
            se: record.se,
            mse: record.mse,
            mse_clamped: record.mse_clamped,
            alpha_re: record.alpha.re,
            alpha_im: record.alpha.im,
            se_std_err: record.se_std_err,
            mse_std_err: record.mse_std_err,
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Metadata sidecar content: resolved spec echo, digest, versions, budgets,
/// diagnostics, wall time.
pub fn run_meta(spec: &ExperimentSpec, output: &RunOutput) -> serde_json::Value {
    json!({
        "schema": "cfmimo-run-v1",
        "crate_version": env!("CARGO_PKG_VERSION"),
        "spec_digest": spec.digest(),
        "seed": spec.seed,
        "drops": spec.drops,
        "trials_per_drop": spec.trials_per_drop,
        "training_samples": spec.training_samples,
        "schemes": spec.schemes.iter().map(|s| s.label()).collect::<Vec<_>>(),
        "ap_ordering": spec.ap_ordering.label(),
        "sweep": spec.sweep.as_ref().map(|s| {
            json!({ "parameter": s.parameter.label(), "values": s.values })
        }),
        "system": spec.config,
        "uplink_power_dbm": watts_to_dbm(spec.config.tx_power),
        "noise_power_dbm": watts_to_dbm(spec.config.noise_power),
        "bandwidth_hz": 2.0e7,
        "carrier_frequency_hz": 2.0e9,
        "pilot_assignment": "coverage_shuffle",
        "ap_sort_rule": "descending total channel gain",
        "workers": output.workers,
        "records": output.records.len(),
        "max_clipped_shadowing_db2": output.diagnostics.max_clipped_shadowing_db2,
        "training_samples_discarded": output.diagnostics.training_discarded,
        "wall_time_seconds": output.wall_time.as_secs_f64(),
    })
}

/// Sidecar path for a CSV output path: the extension replaced by
/// `meta.json` (`results/fig1.csv` → `results/fig1.meta.json`).
pub fn meta_path(output_path: &Path) -> PathBuf {
    output_path.with_extension("meta.json")
}

/// Write the CSV and its metadata sidecar, creating parent directories.
/// Returns the two paths written.
pub fn write_outputs(spec: &ExperimentSpec, output: &RunOutput) -> Result<(PathBuf, PathBuf)> {
    let csv_path = spec.output_path.clone();
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut buffer = Vec::new();
    write_records_csv(&output.records, &spec.digest(), &mut buffer)?;
    std::fs::write(&csv_path, &buffer)?;
    let sidecar = meta_path(&csv_path);
    let meta = run_meta(spec, output);
    let pretty = serde_json::to_string_pretty(&meta).expect("JSON value serialization");
    std::fs::write(&sidecar, pretty + "\n")?;
    Ok((csv_path, sidecar))
}

// ---------------------------------------------------------------------------
// Figures
// ---------------------------------------------------------------------------

/// Plot-data shapes the harness can aggregate records into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Per-scheme empirical CDF of per-UE SE (unswept run).
    Fig1Cdf,
    /// Mean SE versus number of APs.
    Fig2SweepAps,
    /// Mean SE versus pilot length.
    Fig3SweepPilots,
    /// Mean SE versus antennas per AP.
    Fig4SweepAntennas,
}

impl FigureKind {
    /// All figures, in order.
    pub const ALL: [FigureKind; 4] = [
        FigureKind::Fig1Cdf,
        FigureKind::Fig2SweepAps,
        FigureKind::Fig3SweepPilots,
        FigureKind::Fig4SweepAntennas,
    ];

    /// Short name used by the CLI and in file names.
    pub fn label(&self) -> &'static str {
        match self {
            FigureKind::Fig1Cdf => "fig1",
            FigureKind::Fig2SweepAps => "fig2",
            FigureKind::Fig3SweepPilots => "fig3",
            FigureKind::Fig4SweepAntennas => "fig4",
        }
    }

    /// The sweep parameter the figure requires (`None` for the CDF).
    pub fn sweep_parameter(&self) -> Option<SweepParameter> {
        match self {
            FigureKind::Fig1Cdf => None,
            FigureKind::Fig2SweepAps => Some(SweepParameter::NumAps),
            FigureKind::Fig3SweepPilots => Some(SweepParameter::PilotLength),
            FigureKind::Fig4SweepAntennas => Some(SweepParameter::Antennas),
        }
    }

    /// Full-budget experiment preset that produces this figure's records.
    pub fn preset(&self) -> ExperimentSpec {
        let mut spec = ExperimentSpec {
            output_path: PathBuf::from(format!("{}.csv", self.label())),
            ..ExperimentSpec::default()
        };
        match self {
            FigureKind::Fig1Cdf => {
                // Baseline network, all five schemes.
            }
            FigureKind::Fig2SweepAps => {
                spec.schemes = vec![Scheme::CentTmmse, Scheme::UniTmmse, Scheme::StatTmmse];
                spec.sweep = Some(Sweep {
                    parameter: SweepParameter::NumAps,
                    values: vec![20, 40, 60, 80, 100],
                });
            }
            FigureKind::Fig3SweepPilots => {
                spec.config.num_aps = 50;
                spec.config.num_ues = 20;
                spec.schemes = vec![Scheme::CentTmmse, Scheme::UniTmmse];
                spec.sweep = Some(Sweep {
                    parameter: SweepParameter::PilotLength,
                    values: vec![5, 10, 20, 40, 80],
                });
            }
            FigureKind::Fig4SweepAntennas => {
                spec.schemes = vec![Scheme::CentTmmse, Scheme::UniTmmse];
                spec.ap_ordering = ApOrdering::Both;
                spec.sweep = Some(Sweep {
                    parameter: SweepParameter::Antennas,
                    values: vec![1, 2, 4],
                });
            }
        }
        spec
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" | "fig1_cdf" => Ok(FigureKind::Fig1Cdf),
            "fig2" | "fig2_aps" => Ok(FigureKind::Fig2SweepAps),
            "fig3" | "fig3_pilots" => Ok(FigureKind::Fig3SweepPilots),
            "fig4" | "fig4_antennas" => Ok(FigureKind::Fig4SweepAntennas),
            other => Err(Error::SpecParse(format!(
                "unknown figure '{other}' (expected fig1, fig2, fig3, or fig4)"
            ))),
        }
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One CDF point of a series.
#[derive(Debug, Clone, Serialize)]
pub struct CdfRow {
    /// Plot series (scheme label, `_sorted`-suffixed for the sorted serial
    /// combiner).
    pub series: String,
    /// Spectral efficiency, bit/s/Hz.
    pub se: f64,
    /// Cumulative probability at `se`.
    pub cdf_prob: f64,
}

/// One sweep point of a series.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Plot series.
    pub series: String,
    /// Swept parameter value.
    pub sweep_value: usize,
    /// Mean SE over drops and UEs, bit/s/Hz.
    pub mean_se: f64,
    /// Standard error of `mean_se` across drop means (NaN below 2 drops).
    pub std_err: f64,
}

/// Plot-ready data for one figure.
#[derive(Debug, Clone)]
pub enum PlotData {
    /// Per-series empirical CDF points.
    Cdf(Vec<CdfRow>),
    /// Per-series sweep means with standard errors.
    Sweep(Vec<SweepRow>),
}

impl PlotData {
    /// Serialize as CSV (header + rows).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        match self {
            PlotData::Cdf(rows) => {
                for row in rows {
                    writer.serialize(row)?;
                }
            }
            PlotData::Sweep(rows) => {
                for row in rows {
                    writer.serialize(row)?;
                }
            }
        }
        writer.flush()?;
        Ok(())
    }
}

/// Aggregate run records into plot data for one figure.
///
/// The CDF figure requires an unswept run and pools all (drop, UE) SE values
/// per series; the sweep figures require records swept over their parameter
/// and reduce to mean ± standard error per (series, value), where the
/// standard error is taken across per-drop means. Errors describe exactly
/// what is missing.
pub fn emit_plot_data(records: &[RunRecord], figure: FigureKind) -> Result<PlotData> {
    if records.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no records to aggregate for {figure}"
        )));
    }
    match figure.sweep_parameter() {
        None => {
            if let Some(record) = records.iter().find(|r| r.sweep_value.is_some()) {
                return Err(Error::InvalidConfig(format!(
                    "{figure} expects an unswept run, found a sweep over {}",
                    record.sweep_parameter.map_or("?", |p| p.label())
                )));
            }
            let mut by_series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for record in records {
                by_series.entry(record.series()).or_default().push(record.se);
            }
            let mut rows = Vec::new();
            for (series, values) in by_series {
                let cdf = empirical_cdf(&values)?;
                for (se, prob) in cdf.values.iter().zip(cdf.probabilities.iter()) {
                    rows.push(CdfRow { series: series.clone(), se: *se, cdf_prob: *prob });
                }
            }
            Ok(PlotData::Cdf(rows))
        }
        Some(parameter) => {
            for record in records {
                if record.sweep_parameter != Some(parameter) {
                    return Err(Error::InvalidConfig(format!(
                        "{figure} needs a {} sweep, found records swept over {}",
                        parameter.label(),
                        record.sweep_parameter.map_or("nothing", |p| p.label())
                    )));
                }
            }
            // (series, value) → drop → running per-UE mean.
            let mut groups: BTreeMap<(String, usize), BTreeMap<usize, (f64, usize)>> =
                BTreeMap::new();
            for record in records {
                let key = (record.series(), record.sweep_value.expect("swept record"));
                let per_drop = groups.entry(key).or_default();
                let slot = per_drop.entry(record.drop).or_insert((0.0, 0));
                slot.0 += record.se;
                slot.1 += 1;
            }
            let mut rows = Vec::new();
            for ((series, sweep_value), per_drop) in groups {
                let drop_means: Vec<f64> =
                    per_drop.values().map(|(sum, n)| sum / *n as f64).collect();
                let d = drop_means.len() as f64;
                let mean_se = drop_means.iter().sum::<f64>() / d;
                let std_err = if drop_means.len() >= 2 {
                    let var = drop_means.iter().map(|m| (m - mean_se).powi(2)).sum::<f64>()
                        / (d - 1.0);
                    (var / d).sqrt()
                } else {
                    f64::NAN
                };
                rows.push(SweepRow { series, sweep_value, mean_se, std_err });
            }
            Ok(PlotData::Sweep(rows))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn stream_rng_is_reproducible_and_separated() {
        let mut a = stream_rng(1, StreamKind::TrialChannel, 0, 3, 7);
        let mut b = stream_rng(1, StreamKind::TrialChannel, 0, 3, 7);
        assert_eq!(a.random::<u64>(), b.random::<u64>());

        let base: u64 = stream_rng(1, StreamKind::TrialChannel, 0, 3, 7).random();
        let variants: Vec<u64> = [
            stream_rng(2, StreamKind::TrialChannel, 0, 3, 7),
            stream_rng(1, StreamKind::TrialPilotNoise, 0, 3, 7),
            stream_rng(1, StreamKind::TrialChannel, 1, 3, 7),
            stream_rng(1, StreamKind::TrialChannel, 0, 4, 7),
            stream_rng(1, StreamKind::TrialChannel, 0, 3, 8),
        ]
        .iter_mut()
        .map(|rng| rng.random())
        .collect();
        for v in variants {
            assert_ne!(v, base);
        }
    }

    #[test]
    fn sweep_tag_distinguishes_parameter_and_value() {
        let a = sweep_stream_tag(Some((SweepParameter::NumAps, 20)));
        let b = sweep_stream_tag(Some((SweepParameter::PilotLength, 20)));
        let c = sweep_stream_tag(Some((SweepParameter::NumAps, 40)));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(sweep_stream_tag(None), 0);
    }

    #[test]
    fn deployment_sharing_pairs_values_of_neutral_sweeps() {
        // Antenna and pilot-length sweeps keep one deployment per drop.
        for parameter in [SweepParameter::Antennas, SweepParameter::PilotLength] {
            assert_eq!(deployment_stream_tag(Some((parameter, 2))), 0);
            assert_eq!(deployment_stream_tag(Some((parameter, 8))), 0);
        }
        // AP and UE counts change the deployment itself.
        let a = deployment_stream_tag(Some((SweepParameter::NumAps, 20)));
        let b = deployment_stream_tag(Some((SweepParameter::NumAps, 40)));
        assert_ne!(a, 0);
        assert_ne!(a, b);
        // Pilot assignment is blind to AP and antenna counts, not to the rest.
        assert_eq!(pilot_stream_tag(Some((SweepParameter::NumAps, 20))), 0);
        assert_eq!(pilot_stream_tag(Some((SweepParameter::Antennas, 4))), 0);
        assert_ne!(pilot_stream_tag(Some((SweepParameter::PilotLength, 10))), 0);
        assert_ne!(pilot_stream_tag(Some((SweepParameter::NumUes, 10))), 0);
    }

    #[test]
    fn swept_records_do_not_depend_on_the_rest_of_the_sweep() {
        // Streams key on the sweep value itself, so evaluating one value
        // alone reproduces its slice of a longer sweep bit for bit.
        let mut spec = ExperimentSpec::smoke();
        spec.schemes = vec![Scheme::CentTmmse];
        spec.sweep = Some(Sweep { parameter: SweepParameter::NumAps, values: vec![2, 3] });
        let long = run(&spec, &RunOptions::default()).unwrap();
        spec.sweep = Some(Sweep { parameter: SweepParameter::NumAps, values: vec![3] });
        let short = run(&spec, &RunOptions::default()).unwrap();
        let long_slice: Vec<_> =
            long.records.iter().filter(|r| r.sweep_value == Some(3)).collect();
        assert_eq!(long_slice.len(), short.records.len());
        for (a, b) in long_slice.iter().zip(&short.records) {
            assert_eq!(a.se.to_bits(), b.se.to_bits());
            assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        }
    }

    #[test]
    fn sweep_expression_parses() {
        let sweep: Sweep = "num_aps=20, 40,60".parse().unwrap();
        assert_eq!(sweep.parameter, SweepParameter::NumAps);
        assert_eq!(sweep.values, vec![20, 40, 60]);

        assert!("num_aps".parse::<Sweep>().is_err());
        assert!("bogus=1,2".parse::<Sweep>().is_err());
        assert!("num_aps=1,x".parse::<Sweep>().is_err());
        assert!("num_aps=".parse::<Sweep>().is_err());
    }

    #[test]
    fn spec_patch_parses_flat_toml_and_converts_dbm() {
        let text = r#"
            seed = 42
            drops = 3
            trials = 20
            training_samples = 100
            schemes = ["cent_tmmse", "uni_tmmse"]
            sorted_aps = true
            sweep = "antennas=1,2"
            num_aps = 4
            num_ues = 3
            antennas = 2
            pilot_length = 3
            coherence_block = 100
            uplink_power_dbm = 23.0
            noise_power_dbm = -96.0
            area_side = 250.0
            shadowing_std_db = 0.0
            shadowing_decorrelation = 50.0
            correlation = "exponential:0.5"
            out = "out/test.csv"
        "#;
        let patch = SpecPatch::from_toml(text).unwrap();
        let mut spec = ExperimentSpec::default();
        patch.apply(&mut spec).unwrap();
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.drops, 3);
        assert_eq!(spec.trials_per_drop, 20);
        assert_eq!(spec.training_samples, 100);
        assert_eq!(spec.schemes, vec![Scheme::CentTmmse, Scheme::UniTmmse]);
        assert_eq!(spec.ap_ordering, ApOrdering::DescendingGain);
        assert_eq!(spec.sweep.as_ref().unwrap().values, vec![1, 2]);
        assert_eq!(spec.config.num_aps, 4);
        assert_relative_eq!(spec.config.tx_power, 0.199526231496888, max_relative = 1e-12);
        assert_relative_eq!(spec.config.noise_power, 2.51188643150958e-13, max_relative = 1e-12);
        assert_eq!(
            spec.config.correlation,
            CorrelationModel::Exponential { coefficient: 0.5 }
        );
        assert_eq!(spec.output_path, PathBuf::from("out/test.csv"));
        spec.validate().unwrap();

        assert!(SpecPatch::from_toml("nonsense_key = 1").is_err());
        assert!(SpecPatch::from_toml("correlation = \"wavy\"")
            .unwrap()
            .apply(&mut spec)
            .is_err());
    }

    #[test]
    fn ap_ordering_accepts_bool_and_string() {
        #[derive(Deserialize)]
        struct Probe {
            sorted_aps: ApOrdering,
        }
        let p: Probe = toml::from_str("sorted_aps = false").unwrap();
        assert_eq!(p.sorted_aps, ApOrdering::Index);
        let p: Probe = toml::from_str("sorted_aps = \"both\"").unwrap();
        assert_eq!(p.sorted_aps, ApOrdering::Both);
        assert_eq!("sorted".parse::<ApOrdering>().unwrap(), ApOrdering::DescendingGain);
        assert!("diagonal".parse::<ApOrdering>().is_err());
    }

    #[test]
    fn spec_validation_catches_bad_budgets_and_sweeps() {
        let mut spec = ExperimentSpec::smoke();
        spec.drops = 0;
        assert!(spec.validate().is_err());

        let mut spec = ExperimentSpec::smoke();
        spec.schemes = vec![Scheme::LocalMmse, Scheme::LocalMmse];
        assert!(spec.validate().is_err());

        // A pilot sweep must keep every point's pilot length below the
        // coherence block.
        let mut spec = ExperimentSpec::smoke();
        spec.sweep = Some(Sweep {
            parameter: SweepParameter::PilotLength,
            values: vec![2, 400],
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn digest_tracks_content_not_output_path() {
        let mut a = ExperimentSpec::smoke();
        let mut b = ExperimentSpec::smoke();
        b.output_path = PathBuf::from("elsewhere.csv");
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
        a.sweep = Some(Sweep { parameter: SweepParameter::NumAps, values: vec![2, 3] });
        assert_ne!(a.digest(), ExperimentSpec::smoke().digest());
    }

    #[test]
    fn smoke_run_produces_one_row_per_scheme_and_ue() {
        let spec = ExperimentSpec::smoke();
        let output = run(&spec, &RunOptions::default()).unwrap();
        // drops × schemes × UEs rows.
        assert_eq!(output.records.len(), 5 * 2);
        for record in &output.records {
            assert!(record.se.is_finite() && record.se >= 0.0);
            assert!(record.mse > 0.0 && record.mse <= 1.0);
            assert!(record.se_std_err.is_finite());
        }
        assert_eq!(output.diagnostics.training_discarded, 0);
    }

    #[test]
    fn centralized_pair_agrees_within_a_shared_trial_set() {
        // The two centralized schemes are the same combiner computed two
        // ways; identical results also witness that schemes share per-trial
        // realizations.
        let spec = ExperimentSpec::smoke();
        let output = run(&spec, &RunOptions::default()).unwrap();
        let tmmse: Vec<&RunRecord> = output
            .records
            .iter()
            .filter(|r| r.scheme == Scheme::CentTmmse)
            .collect();
        let mmse: Vec<&RunRecord> = output
            .records
            .iter()
            .filter(|r| r.scheme == Scheme::CentMmse)
            .collect();
        assert_eq!(tmmse.len(), mmse.len());
        for (a, b) in tmmse.iter().zip(mmse.iter()) {
            assert_eq!((a.drop, a.ue), (b.drop, b.ue));
            assert_relative_eq!(a.mse, b.mse, max_relative = 1e-9);
            assert_relative_eq!(a.se, b.se, max_relative = 1e-9);
        }
    }

    #[test]
    fn csv_bytes_are_deterministic_across_runs_and_worker_counts() {
        let mut spec = ExperimentSpec::smoke();
        spec.drops = 3;
        spec.ap_ordering = ApOrdering::Both;
        let digest = spec.digest();
        let serialize = |workers: Option<usize>| -> Vec<u8> {
            let output = run(&spec, &RunOptions { workers }).unwrap();
            let mut bytes = Vec::new();
            write_records_csv(&output.records, &digest, &mut bytes).unwrap();
            bytes
        };
        let once = serialize(Some(1));
        let again = serialize(Some(1));
        let wide = serialize(Some(4));
        assert_eq!(once, again);
        assert_eq!(once, wide);
        let text = String::from_utf8(once).unwrap();
        let mut lines = text.lines();
        let comment = lines.next().unwrap();
        assert!(comment.starts_with("# cfmimo-run-schema v1 spec-digest "));
        assert!(comment.ends_with(&digest[..16]));
        assert_eq!(
            lines.next().unwrap(),
            "sweep_parameter,sweep_value,scheme,ap_order,drop,ue,se,mse,mse_clamped,\
             alpha_re,alpha_im,se_std_err,mse_std_err"
        );
    }

    #[test]
    fn serial_series_split_by_order_variant() {
        let mut spec = ExperimentSpec::smoke();
        spec.ap_ordering = ApOrdering::Both;
        spec.schemes = vec![Scheme::UniTmmse, Scheme::LocalMmse];
        let output = run(&spec, &RunOptions::default()).unwrap();
        // uni twice (index + sorted) + local once, × 2 UEs.
        assert_eq!(output.records.len(), 3 * 2);
        let series: std::collections::BTreeSet<String> =
            output.records.iter().map(|r| r.series()).collect();
        assert!(series.contains("uni_tmmse"));
        assert!(series.contains("uni_tmmse_sorted"));
        assert!(series.contains("local_mmse"));
    }

    #[test]
    fn cdf_plot_data_pools_per_series() {
        let mut spec = ExperimentSpec::smoke();
        spec.drops = 2;
        let output = run(&spec, &RunOptions::default()).unwrap();
        let data = emit_plot_data(&output.records, FigureKind::Fig1Cdf).unwrap();
        let PlotData::Cdf(rows) = data else { panic!("expected CDF data") };
        // 5 series × (2 drops × 2 UEs) points.
        assert_eq!(rows.len(), 5 * 4);
        let cent: Vec<&CdfRow> = rows.iter().filter(|r| r.series == "cent_tmmse").collect();
        assert_eq!(cent.len(), 4);
        assert_relative_eq!(cent.last().unwrap().cdf_prob, 1.0);
        for pair in cent.windows(2) {
            assert!(pair[1].se >= pair[0].se);
            assert!(pair[1].cdf_prob > pair[0].cdf_prob);
        }

        // A swept run cannot feed the CDF figure.
        let mut swept = ExperimentSpec::smoke();
        swept.sweep = Some(Sweep { parameter: SweepParameter::Antennas, values: vec![1, 2] });
        let swept_out = run(&swept, &RunOptions::default()).unwrap();
        let err = emit_plot_data(&swept_out.records, FigureKind::Fig1Cdf).unwrap_err();
        assert!(err.to_string().contains("unswept"));
    }

    #[test]
    fn sweep_plot_data_averages_drops_and_checks_parameter() {
        let mut spec = ExperimentSpec::smoke();
        spec.drops = 3;
        spec.schemes = vec![Scheme::CentTmmse, Scheme::LocalMmse];
        spec.sweep = Some(Sweep { parameter: SweepParameter::NumAps, values: vec![2, 4] });
        let output = run(&spec, &RunOptions::default()).unwrap();
        let data = emit_plot_data(&output.records, FigureKind::Fig2SweepAps).unwrap();
        let PlotData::Sweep(rows) = data else { panic!("expected sweep data") };
        assert_eq!(rows.len(), 2 * 2);
        for row in &rows {
            assert!(row.mean_se.is_finite());
            assert!(row.std_err.is_finite() && row.std_err >= 0.0);
        }
        // Rows are sorted by series then sweep value.
        let cent: Vec<&SweepRow> = rows.iter().filter(|r| r.series == "cent_tmmse").collect();
        assert_eq!(
            cent.iter().map(|r| r.sweep_value).collect::<Vec<_>>(),
            vec![2, 4]
        );

        let err = emit_plot_data(&output.records, FigureKind::Fig3SweepPilots).unwrap_err();
        assert!(err.to_string().contains("pilot_length"));
        let unswept = run(&ExperimentSpec::smoke(), &RunOptions::default()).unwrap();
        assert!(emit_plot_data(&unswept.records, FigureKind::Fig2SweepAps).is_err());
    }

    #[test]
    fn meta_echoes_resolved_spec() {
        let spec = ExperimentSpec::smoke();
        let output = run(&spec, &RunOptions::default()).unwrap();
        let meta = run_meta(&spec, &output);
        assert_eq!(meta["schema"], "cfmimo-run-v1");
        assert_eq!(meta["spec_digest"].as_str().unwrap().len(), 64);
        assert_eq!(meta["seed"], 7);
        assert_eq!(meta["records"], 10);
        assert_eq!(meta["pilot_assignment"], "coverage_shuffle");
        assert_relative_eq!(meta["uplink_power_dbm"].as_f64().unwrap(), 23.0, epsilon = 1e-9);
        assert_relative_eq!(meta["noise_power_dbm"].as_f64().unwrap(), -96.0, epsilon = 1e-9);
        assert!(meta["wall_time_seconds"].as_f64().unwrap() >= 0.0);
        assert_eq!(meta["system"]["num_aps"], 2);
    }

    #[test]
    fn outputs_land_next_to_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::smoke();
        spec.output_path = dir.path().join("nested/out/smoke.csv");
        let output = run(&spec, &RunOptions::default()).unwrap();
        let (csv_path, sidecar) = write_outputs(&spec, &output).unwrap();
        assert_eq!(sidecar, dir.path().join("nested/out/smoke.meta.json"));
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("# cfmimo-run-schema v1"));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["records"], 10);
    }

    #[test]
    fn worker_resolution_prefers_explicit_then_env() {
        std::env::set_var(WORKERS_ENV, "3");
        assert_eq!(resolve_workers(None).unwrap(), Some(3));
        assert_eq!(resolve_workers(Some(2)).unwrap(), Some(2));
        std::env::set_var(WORKERS_ENV, "many");
        assert!(resolve_workers(None).is_err());
        std::env::remove_var(WORKERS_ENV);
        assert_eq!(resolve_workers(None).unwrap(), None);
    }

    #[test]
    fn figure_presets_validate_and_name_their_sweeps() {
        for figure in FigureKind::ALL {
            let preset = figure.preset();
            preset.validate().unwrap();
            match figure.sweep_parameter() {
                None => assert!(preset.sweep.is_none()),
                Some(parameter) => {
                    assert_eq!(preset.sweep.as_ref().unwrap().parameter, parameter)
                }
            }
        }
        assert_eq!("fig3".parse::<FigureKind>().unwrap(), FigureKind::Fig3SweepPilots);
        assert!("fig9".parse::<FigureKind>().is_err());
        assert_eq!(FigureKind::Fig4SweepAntennas.preset().ap_ordering, ApOrdering::Both);
    }
}
