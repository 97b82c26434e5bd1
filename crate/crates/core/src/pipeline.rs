//! Reproducible end-to-end runs: configuration, per-stage artifacts, the
//! coefficient report, plot data and a digest manifest.
//!
//! Every artifact is a pure function of the inputs and the configuration.
//! Wall-clock timings are the one nondeterministic output and live in their
//! own file next to the manifest, so manifests of repeated runs compare
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delay::{crossfit_predict, DelayFit, GradientRegimeReport};
use crate::diagnostics::{
    cumulative_precision, epoch_effect_series, expanding_oos_stage2, fe_autocorrelation, feature_iccs,
    rolling_fit_with, variance_decomposition, CumulativePrecision, IccReport, OosReport, RollingReport,
    VarianceDecomposition,
};
use crate::error::{Error, Result};
use crate::estimate::{bootstrap_terms, delay_data, fee_data, sample, Dataset, EstimateConfig, Sample};
use crate::fee::{fit_fee_model, smearing_predict, t_critical, BootstrapResult, FeeData, FeeFit, Term, TermKind};
use crate::io::{ingest, write_json, write_snapshots, write_transactions, IngestConfig, InputPaths};
use crate::market::rank_within_epochs;
use crate::sim::{
    compute_vcg_schedule, generate_structural, simulate_queue, vcg_payment_bruteforce, vcg_payment_discrete, FeePolicy,
    SimConfig, StaticInstance, StructuralConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    /// Replicates; 0 skips the bootstrap.
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub rolling_windows: usize,
    /// Training shares of the expanding-window splits.
    pub oos_splits: Vec<f64>,
    /// Points on the cumulative-precision curve.
    pub precision_points: usize,
    /// Largest lag of the epoch-effect autocorrelation.
    pub max_lag: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { rolling_windows: 5, oos_splits: vec![0.5, 0.6, 0.7, 0.8], precision_points: 10, max_lag: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    pub ingest: IngestConfig,
    pub estimate: EstimateConfig,
    pub bootstrap: BootstrapConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.transactions.as_os_str().is_empty() || self.inputs.snapshots.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("transaction and snapshot inputs are required".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("output directory is required".into()));
        }
        if !(0.0..=1.0).contains(&self.ingest.max_error_fraction) {
            return Err(Error::InvalidConfig("max_error_fraction must lie in [0, 1]".into()));
        }
        if !(self.estimate.fee_floor >= 0.0) {
            return Err(Error::InvalidConfig("fee floor must be non-negative".into()));
        }
        if let Some(f) = self.diagnostics.oos_splits.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::InvalidConfig(format!("split fraction {f} outside (0, 1)")));
        }
        self.estimate.delay.forest.validate()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Input path as configured, or artifact path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    /// Wall-clock timings, kept apart so the manifest stays reproducible.
    pub timings: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

// --- stage helpers --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub tx_id: String,
    pub epoch_id: usize,
    pub fee_rate: f64,
    pub percentile: f64,
}

/// Tie-aware percentiles of every epoch-assigned record.
pub fn rank_table(ds: &Dataset) -> Vec<RankRow> {
    rank_within_epochs(&ds.txs)
        .iter()
        .zip(&ds.txs)
        .filter_map(|(r, t)| {
            r.map(|r| RankRow {
                tx_id: t.tx_id.clone(),
                epoch_id: t.epoch_id.expect("ranked"),
                fee_rate: t.fee_rate().as_f64(),
                percentile: r.percentile,
            })
        })
        .collect()
}

/// Stage 1 on the estimation sample.
pub fn fit_delay(ds: &Dataset, cfg: &EstimateConfig) -> Result<(Sample, DelayFit)> {
    let s = sample(ds, cfg.fee_floor).map_err(|e| e.in_stage("rank"))?;
    let data = delay_data(ds, &s).map_err(|e| e.in_stage("delay"))?;
    let fit = crossfit_predict(&data, &cfg.delay).map_err(|e| e.in_stage("delay"))?;
    Ok((s, fit))
}

fn check_delay_fit(s: &Sample, delay: &DelayFit) -> Result<()> {
    if delay.slopes.len() != s.delay_rows.len() {
        return Err(Error::InvalidConfig(format!(
            "delay fit has {} rows but the dataset yields {}",
            delay.slopes.len(),
            s.delay_rows.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub tx_id: String,
    pub epoch_id: usize,
    pub percentile: f64,
    pub predicted_log_wait: f64,
    pub monotone_log_wait: f64,
    pub slope: f64,
    pub log_slope: f64,
    pub in_fee_equation: bool,
}

pub fn slope_table(ds: &Dataset, s: &Sample, delay: &DelayFit) -> Result<Vec<SlopeRow>> {
    check_delay_fit(s, delay)?;
    let logs = delay.log_slopes();
    let mut in_fee = vec![false; s.delay_rows.len()];
    s.fee_rows.iter().for_each(|&k| in_fee[k] = true);
    Ok(s.delay_rows
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let t = &ds.txs[i];
            SlopeRow {
                tx_id: t.tx_id.clone(),
                epoch_id: t.epoch_id.expect("sampled"),
                percentile: s.priority[k],
                predicted_log_wait: delay.predicted[k],
                monotone_log_wait: delay.monotone[k],
                slope: delay.slopes[k],
                log_slope: logs[k],
                in_fee_equation: in_fee[k],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch_id: usize,
    pub priority: f64,
    pub log_wait: f64,
}

/// Per-epoch monotone schedules on the priority grid.
pub fn schedule_table(delay: &DelayFit) -> Vec<ScheduleRow> {
    delay
        .schedules
        .iter()
        .flat_map(|(&e, s)| {
            s.grid.iter().zip(&s.values).map(move |(&p, &v)| ScheduleRow { epoch_id: e, priority: p, log_wait: v })
        })
        .collect()
}

/// Stage 2 given a stored stage-1 fit.
pub fn fit_fee(ds: &Dataset, cfg: &EstimateConfig, delay: &DelayFit) -> Result<(Sample, FeeData, FeeFit)> {
    let s = sample(ds, cfg.fee_floor).map_err(|e| e.in_stage("rank"))?;
    check_delay_fit(&s, delay)?;
    let data = fee_data(ds, &s, &delay.log_slopes());
    let fit = fit_fee_model(&data, &cfg.fee).map_err(|e| e.in_stage("fee"))?;
    Ok((s, data, fit))
}

fn section(kind: TermKind) -> &'static str {
    match kind {
        TermKind::Intercept => "intercept",
        TermKind::Structural => "structural",
        TermKind::Control => "transaction",
        TermKind::State => "block_state",
        TermKind::Missingness => "missingness",
        TermKind::Spline => "impatience_spline",
    }
}

/// Coefficient table as tab-separated text: one row per term, the
/// intercept last, then `#`-prefixed fit statistics.
pub fn coefficient_table(fit: &FeeFit, boot: Option<&BootstrapResult>) -> String {
    let mut out = String::from("section\tvariable\tcoef\tcl_se\tt\tp\tsig");
    if boot.is_some() {
        out.push_str("\tboot_se");
    }
    out.push('\n');
    let mut row = |t: &Term| {
        let _ = write!(out, "{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.4}\t{}", section(t.kind), t.name, t.estimate, t.se, t.t, t.p, t.stars());
        if let Some(b) = boot {
            match b.index_of(&t.name) {
                Some(j) => {
                    let _ = write!(out, "\t{:.4}", b.sd_se[j]);
                }
                None => out.push('\t'),
            }
        }
        out.push('\n');
    };
    fit.terms.iter().for_each(&mut row);
    row(&fit.intercept);
    let _ = writeln!(out, "# observations\t{}", fit.n_obs);
    let _ = writeln!(out, "# epoch clusters\t{}", fit.n_clusters);
    let _ = writeln!(out, "# t degrees of freedom\t{}", fit.df);
    let _ = writeln!(out, "# epoch fixed effects\t{}", if fit.spec.fixed_effects { "yes" } else { "no" });
    let _ = writeln!(out, "# within R2\t{:.4}", fit.r2_within);
    let _ = writeln!(out, "# overall R2\t{:.4}", fit.r2_overall);
    let _ = writeln!(out, "# smearing factor\t{:.4}", fit.smearing);
    if let Some(b) = boot {
        let _ = writeln!(out, "# bootstrap replicates\t{} ({} failed)", b.b, b.failed);
    }
    if !fit.dropped.is_empty() {
        let _ = writeln!(out, "# dropped (no within-epoch variation)\t{}", fit.dropped.join(","));
    }
    out.push_str("# significance\t*** p<0.001, ** p<0.01, * p<0.05\n");
    out
}

// --- diagnostics ----------------------------------------------------------

/// A diagnostic that may not be computable on the sample at hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Skipped(String),
}

impl<T> Outcome<T> {
    /// Keeps I/O failures as errors; any other failure becomes a skip note.
    fn from_result(r: Result<T>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Outcome::Ok(v)),
            Err(e @ Error::Io(_)) => Err(e),
            Err(e) => Ok(Outcome::Skipped(e.to_string())),
        }
    }

    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok(v) => Some(v),
            Outcome::Skipped(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub iccs: Vec<IccReport>,
    pub variance: Outcome<VarianceDecomposition>,
    pub regimes: GradientRegimeReport,
    pub fe_autocorrelation: Outcome<Vec<f64>>,
    pub cumulative_precision: Outcome<CumulativePrecision>,
    pub rolling: Outcome<RollingReport>,
    pub out_of_sample: Outcome<OosReport>,
}

/// Epoch counts for the cumulative-precision curve: from 15% of the sample
/// to all of it.
fn precision_counts(n_epochs: usize, points: usize) -> Vec<usize> {
    let points = points.max(2);
    let mut ks: Vec<usize> = (0..points)
        .map(|j| {
            let f = 0.15 + 0.85 * j as f64 / (points - 1) as f64;
            ((f * n_epochs as f64).round() as usize).clamp(2, n_epochs.max(2))
        })
        .collect();
    ks.dedup();
    ks
}

pub fn diagnose(
    ds: &Dataset,
    cfg: &EstimateConfig,
    dcfg: &DiagnosticsConfig,
    delay: &DelayFit,
    data: &FeeData,
    fit: &FeeFit,
) -> Result<DiagnosticsReport> {
    let xi = epoch_effect_series(fit);
    let lag = dcfg.max_lag.min(xi.len().saturating_sub(2));
    let acf = if lag == 0 {
        Err(Error::NotEnoughEpochs { needed: 3, found: xi.len() })
    } else {
        fe_autocorrelation(&xi, lag)
    };
    let n_epochs = fit.n_clusters;
    Ok(DiagnosticsReport {
        iccs: feature_iccs(data),
        variance: Outcome::from_result(variance_decomposition(&data.outcome, &fit.residuals, &data.epoch))?,
        regimes: delay.regimes.clone(),
        fe_autocorrelation: Outcome::from_result(acf)?,
        cumulative_precision: Outcome::from_result(cumulative_precision(
            data,
            &cfg.fee,
            &precision_counts(n_epochs, dcfg.precision_points),
        ))?,
        rolling: Outcome::from_result(rolling_fit_with(ds, cfg, dcfg.rolling_windows, fit))?,
        out_of_sample: Outcome::from_result(expanding_oos_stage2(data, &cfg.fee, &dcfg.oos_splits))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrecisionRow {
    epochs: usize,
    se: f64,
    /// `se_full * sqrt(E / k)`, the rate under homogeneous epochs.
    reference_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RollingRow {
    window: usize,
    first_epoch: usize,
    last_epoch: usize,
    term: String,
    estimate: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OosRow {
    fraction: f64,
    train_epochs: usize,
    test_epochs: usize,
    r2_within_full: f64,
    r2_within_restricted: f64,
    r2_strict: f64,
    delta_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochEffectRow {
    epoch_id: usize,
    effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LagRow {
    lag: usize,
    autocorrelation: f64,
}

// --- counterfactuals and mechanism checks ---------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSummary {
    pub state_names: Vec<String>,
    pub state: Vec<f64>,
    /// Probability of paying at least the fee floor.
    pub pi: f64,
    /// Mean fee rate below the floor (sat/vB).
    pub below_floor_mean: f64,
    pub n_rows: usize,
    /// Mean expected fee rate at observed states.
    pub baseline_mean: f64,
    /// Mean expected fee rate with every state set to `state`.
    pub counterfactual_mean: f64,
}

/// Expected fee rates at a fixed mempool state, mixing the fee equation with
/// the sub-floor mass. `pi` and the sub-floor mean default to their sample
/// values.
pub fn counterfactual_summary(
    ds: &Dataset,
    s: &Sample,
    data: &FeeData,
    fit: &FeeFit,
    state: &[f64],
    pi: Option<f64>,
    below_floor_mean: Option<f64>,
) -> Result<CounterfactualSummary> {
    let pi = pi.unwrap_or(s.fee_rows.len() as f64 / s.delay_rows.len() as f64);
    let below = below_floor_mean.unwrap_or_else(|| {
        let mut in_fee = vec![false; s.delay_rows.len()];
        s.fee_rows.iter().for_each(|&k| in_fee[k] = true);
        let rates: Vec<f64> = s
            .delay_rows
            .iter()
            .zip(&in_fee)
            .filter(|(_, f)| !**f)
            .map(|(&i, _)| ds.txs[i].fee_rate().as_f64())
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    });
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base: Vec<f64> = smearing_predict(fit, data)?.into_iter().map(|m| pi * m + (1.0 - pi) * below).collect();
    let cf = crate::fee::counterfactual(fit, data, state, pi, below)?;
    Ok(CounterfactualSummary {
        state_names: fit.state_names.clone(),
        state: state.to_vec(),
        pi,
        below_floor_mean: below,
        n_rows: data.n_rows(),
        baseline_mean: mean(&base),
        counterfactual_mean: mean(&cf),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcgCheckReport {
    pub instances: usize,
    pub payments_compared: usize,
    /// Payments where the closed form and the brute-force externality differ at all.
    pub mismatches: usize,
    pub max_abs_difference: f64,
    pub schedule_grid: usize,
    /// Largest deviation of the continuous schedule from `p^2 / 2` for `c(q) = q`, `D = 1`.
    pub schedule_max_error: f64,
}

/// Compares discrete VCG payments with brute-force externalities on random
/// one-slot instances and the continuous schedule with its closed form.
pub fn vcg_check(instances: usize, max_n: usize, seed: u64, grid_m: usize) -> Result<VcgCheckReport> {
    if max_n == 0 {
        return Err(Error::InvalidConfig("instances need at least one transaction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut compared, mut mismatches, mut worst) = (0, 0, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(1..=max_n);
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let inst = StaticInstance::from_costs(costs, 1)?;
        for m in 1..=n {
            let (a, b) = (vcg_payment_discrete(&inst, m)?, vcg_payment_bruteforce(&inst, m)?);
            compared += 1;
            mismatches += usize::from(a != b);
            worst = worst.max((a - b).abs());
        }
    }
    let s = compute_vcg_schedule(|q| q, |_| 1.0, 1.0, 1.0, grid_m)?;
    let err = s.grid.iter().zip(&s.fees).map(|(p, b)| (p * p / 2.0 - b).abs()).fold(0.0, f64::max);
    Ok(VcgCheckReport {
        instances,
        payments_compared: compared,
        mismatches,
        max_abs_difference: worst,
        schedule_grid: grid_m,
        schedule_max_error: err,
    })
}

/// What `simulate` generates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimulationSpec {
    /// The priority-queue market.
    Queue {
        #[serde(default)]
        config: SimConfig,
        #[serde(default)]
        policy: FeePolicy,
    },
    /// Fees drawn from a known log-linear pricing rule and delay technology.
    Structural {
        #[serde(default)]
        config: StructuralConfig,
    },
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec::Queue { config: SimConfig::default(), policy: FeePolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFiles {
    pub transactions: PathBuf,
    pub snapshots: PathBuf,
    /// Ground truth for recovery checks.
    pub truth: PathBuf,
    pub n_transactions: usize,
    pub n_snapshots: usize,
}

pub const SIM_TRANSACTIONS: &str = "transactions.jsonl";
pub const SIM_SNAPSHOTS: &str = "snapshots.csv";
pub const SIM_TRUTH: &str = "truth.json";

/// Simulates and writes the ingestion files plus a ground-truth sidecar.
pub fn simulate_to_dir(spec: &SimulationSpec, dir: &Path) -> Result<SimulationFiles> {
    let (txs, snapshots, truth) = match spec {
        SimulationSpec::Queue { config, policy } => {
            let ds = simulate_queue(config, policy)?;
            let truth = serde_json::json!({
                "mode": ds.mode,
                "config": ds.config,
                "agents": ds.agents,
                "blocks": ds.blocks,
                "planned": ds.planned,
            });
            (ds.txs, ds.snapshots, truth)
        }
        SimulationSpec::Structural { config } => {
            let ds = generate_structural(config)?;
            (ds.txs, ds.snapshots, serde_json::json!({ "config": ds.config, "truth": ds.truth }))
        }
    };
    fs::create_dir_all(dir)?;
    let files = SimulationFiles {
        transactions: dir.join(SIM_TRANSACTIONS),
        snapshots: dir.join(SIM_SNAPSHOTS),
        truth: dir.join(SIM_TRUTH),
        n_transactions: txs.len(),
        n_snapshots: snapshots.len(),
    };
    write_transactions(std::io::BufWriter::new(fs::File::create(&files.transactions)?), &txs)?;
    write_snapshots(fs::File::create(&files.snapshots)?, &snapshots)?;
    fs::write(&files.truth, json_bytes(&truth)?)?;
    Ok(files)
}

// --- artifacts and the full run -------------------------------------------

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes files under the run directory and records their digests.
struct Artifacts {
    dir: PathBuf,
    written: Vec<FileDigest>,
}

impl Artifacts {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.written.push(FileDigest { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put(name, &json_bytes(value)?)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        self.put(name, &csv_bytes(rows)?)
    }
}

fn digest_input(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

fn write_plots(out: &mut Artifacts, fit: &FeeFit, diag: &DiagnosticsReport) -> Result<()> {
    let effects: Vec<EpochEffectRow> =
        fit.epoch_effects.iter().map(|(&e, &v)| EpochEffectRow { epoch_id: e, effect: v }).collect();
    out.csv("plots/epoch_effects.csv", &effects)?;
    if let Some(acf) = diag.fe_autocorrelation.ok() {
        let rows: Vec<LagRow> = acf.iter().enumerate().map(|(k, &r)| LagRow { lag: k + 1, autocorrelation: r }).collect();
        out.csv("plots/epoch_effect_acf.csv", &rows)?;
    }
    out.csv("plots/icc.csv", &diag.iccs)?;
    if let Some(cp) = diag.cumulative_precision.ok() {
        let (k_full, se_full) = (*cp.epochs.last().unwrap_or(&1) as f64, *cp.se.last().unwrap_or(&f64::NAN));
        let rows: Vec<PrecisionRow> = cp
            .epochs
            .iter()
            .zip(&cp.se)
            .map(|(&k, &se)| PrecisionRow { epochs: k, se, reference_se: se_full * (k_full / k as f64).sqrt() })
            .collect();
        out.csv("plots/cumulative_precision.csv", &rows)?;
    }
    if let Some(r) = diag.rolling.ok() {
        let mut rows = Vec::new();
        for (w, win) in r.windows.iter().enumerate() {
            let n_epochs = win.last_epoch - win.first_epoch + 1;
            let c = t_critical(0.95, n_epochs.saturating_sub(1));
            for (term, est, se) in &win.terms {
                rows.push(RollingRow {
                    window: w + 1,
                    first_epoch: win.first_epoch,
                    last_epoch: win.last_epoch,
                    term: term.clone(),
                    estimate: *est,
                    se: *se,
                    ci_low: est - c * se,
                    ci_high: est + c * se,
                });
            }
        }
        out.csv("plots/rolling.csv", &rows)?;
    }
    if let Some(o) = diag.out_of_sample.ok() {
        let rows: Vec<OosRow> = o
            .splits
            .iter()
            .map(|s| OosRow {
                fraction: s.fraction,
                train_epochs: s.train_epochs,
                test_epochs: s.test_epochs,
                r2_within_full: s.r2_within_full,
                r2_within_restricted: s.r2_within_restricted,
                r2_strict: s.r2_strict,
                delta_r2: s.delta_r2,
            })
            .collect();
        out.csv("plots/out_of_sample.csv", &rows)?;
    }
    Ok(())
}

/// Runs ingest, ranking, both stages, the bootstrap and diagnostics, writing
/// every intermediate under `output_dir`. A failing stage aborts with its
/// name; artifacts written before it are left in place.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut out = Artifacts { dir: cfg.output_dir.clone(), written: Vec::new() };
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &str, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming { stage: stage.to_string(), seconds: clock.elapsed().as_secs_f64() });
        clock = Instant::now();
    };

    out.json("config.json", cfg)?;
    let mut inputs = vec![digest_input(&cfg.inputs.transactions)?, digest_input(&cfg.inputs.snapshots)?];
    for p in cfg.inputs.links.iter().chain(&cfg.inputs.external_weights) {
        inputs.push(digest_input(p)?);
    }

    let (ds, report) = ingest(&cfg.inputs, &cfg.ingest).map_err(|e| e.in_stage("ingest"))?;
    out.json("ingest_report.json", &report)?;
    out.json("dataset.json", &ds)?;
    lap("ingest", &mut timings);

    out.csv("ranks.csv", &rank_table(&ds))?;
    let (s, delay) = fit_delay(&ds, &cfg.estimate)?;
    out.json("delay_fit.json", &delay)?;
    out.csv("slopes.csv", &slope_table(&ds, &s, &delay)?)?;
    out.csv("plots/schedules.csv", &schedule_table(&delay))?;
    lap("delay", &mut timings);

    let data = fee_data(&ds, &s, &delay.log_slopes());
    let fit = fit_fee_model(&data, &cfg.estimate.fee).map_err(|e| e.in_stage("fee"))?;
    out.json("fee_fit.json", &fit)?;
    lap("fee", &mut timings);

    let boot = if cfg.bootstrap.replicates > 0 {
        let names: Vec<String> = fit.terms.iter().map(|t| t.name.clone()).collect();
        let b = bootstrap_terms(&ds, &cfg.estimate, &names, cfg.bootstrap.replicates, cfg.bootstrap.seed)
            .map_err(|e| e.in_stage("bootstrap"))?;
        out.json("bootstrap.json", &b)?;
        Some(b)
    } else {
        None
    };
    out.put("table2.tsv", coefficient_table(&fit, boot.as_ref()).as_bytes())?;
    lap("bootstrap", &mut timings);

    let diag = diagnose(&ds, &cfg.estimate, &cfg.diagnostics, &delay, &data, &fit)
        .map_err(|e| e.in_stage("diagnostics"))?;
    out.json("diagnostics.json", &diag)?;
    write_plots(&mut out, &fit, &diag)?;
    lap("diagnostics", &mut timings);

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.digest(),
        inputs,
        artifacts: out.written,
        timings: TIMINGS_FILE.to_string(),
    };
    fs::write(cfg.output_dir.join(MANIFEST_FILE), json_bytes(&manifest)?)?;
    fs::write(cfg.output_dir.join(TIMINGS_FILE), json_bytes(&timings)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::ForestConfig;

    fn small_run(root: &Path) -> RunConfig {
        let spec = SimulationSpec::Structural {
            config: StructuralConfig { n_epochs: 8, per_epoch: 150, seed: 2, ..StructuralConfig::default() },
        };
        let files = simulate_to_dir(&spec, &root.join("input")).unwrap();
        let mut cfg = RunConfig {
            inputs: InputPaths { transactions: files.transactions, snapshots: files.snapshots, ..InputPaths::default() },
            output_dir: root.join("out"),
            ..RunConfig::default()
        };
        cfg.estimate.delay.forest = ForestConfig { n_trees: 8, max_depth: 8, min_leaf: 10, n_folds: 3, ..ForestConfig::default() };
        cfg.bootstrap.replicates = 4;
        cfg.diagnostics = DiagnosticsConfig { rolling_windows: 2, oos_splits: vec![0.5, 0.75], precision_points: 4, max_lag: 3 };
        cfg
    }

    fn read_all(dir: &Path, m: &RunManifest) -> Vec<Vec<u8>> {
        m.artifacts.iter().map(|a| fs::read(dir.join(&a.path)).unwrap()).collect()
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.ingest.epoch.window_secs, 1800.0);
        let f = &c.estimate.delay.forest;
        assert_eq!((f.n_trees, f.max_depth, f.min_leaf, f.n_folds), (200, 15, 20, 5));
        assert_eq!(c.estimate.delay.grid_m, 99);
        assert_eq!(c.estimate.delay.slope.delta, 0.05);
        assert_eq!(c.estimate.fee_floor, 1.0);
        assert!(c.estimate.fee.fixed_effects && c.estimate.fee.spline.is_none());
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.estimate.delay.slope.delta = 0.1 + 0.2;
        c.estimate.fee.spline = Some(Default::default());
        c.diagnostics.oos_splits = vec![1.0 / 3.0];
        let path = dir.path().join("run.json");
        c.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
        fs::write(&path, r#"{"bootstrap": {"replicates": 3}, "estimate": {"delay": {"forest": {"n_trees": 7}}}}"#).unwrap();
        let partial = RunConfig::load(&path).unwrap();
        assert_eq!(partial.bootstrap, BootstrapConfig { replicates: 3, seed: 0 });
        assert_eq!(partial.estimate.delay.forest.n_trees, 7);
        assert_eq!(partial.estimate.delay.forest.max_depth, 15);
    }

    #[test]
    fn run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path());
        let m = run_pipeline(&cfg).unwrap();
        let names: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        for want in [
            "config.json",
            "ingest_report.json",
            "dataset.json",
            "ranks.csv",
            "delay_fit.json",
            "slopes.csv",
            "plots/schedules.csv",
            "fee_fit.json",
            "bootstrap.json",
            "table2.tsv",
            "diagnostics.json",
            "plots/epoch_effects.csv",
            "plots/cumulative_precision.csv",
            "plots/rolling.csv",
            "plots/out_of_sample.csv",
        ] {
            assert!(names.contains(&want), "missing {want}");
        }
        for (a, bytes) in m.artifacts.iter().zip(read_all(&cfg.output_dir, &m)) {
            assert_eq!(sha256_hex(&bytes), a.sha256);
        }
        let on_disk: RunManifest = crate::io::read_json(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(on_disk, m);
        assert_eq!(m.config_sha256, cfg.digest());
        assert_eq!(RunConfig::load(&cfg.output_dir.join("config.json")).unwrap(), cfg);
        let timings: Vec<StageTiming> = crate::io::read_json(&cfg.output_dir.join(TIMINGS_FILE)).unwrap();
        assert_eq!(timings.len(), 5);
        let table = fs::read_to_string(cfg.output_dir.join("table2.tsv")).unwrap();
        assert!(table.lines().nth(1).unwrap().starts_with("structural\tlog_delay_gradient\t"));
        assert!(table.contains("\nintercept\t"));
        let diag: DiagnosticsReport = crate::io::read_json(&cfg.output_dir.join("diagnostics.json")).unwrap();
        assert!(diag.rolling.ok().is_some() && diag.out_of_sample.ok().is_some());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path());
        let first = run_pipeline(&cfg).unwrap();
        let manifest = fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap();
        let bytes = read_all(&cfg.output_dir, &first);
        let second = run_pipeline(&cfg).unwrap();
        assert_eq!(fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap(), manifest);
        assert_eq!(read_all(&cfg.output_dir, &second), bytes);
    }

    #[test]
    fn too_many_folds_abort_in_stage_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_run(dir.path());
        cfg.estimate.delay.forest.n_folds = 12;
        let err = run_pipeline(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("stage delay failed") && msg.contains("cross-fitting with 12 folds"), "{msg}");
        assert_eq!(err.category(), "config");
        assert!(cfg.output_dir.join("dataset.json").exists());
        assert!(!cfg.output_dir.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn skipped_diagnostics_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_run(dir.path());
        cfg.bootstrap.replicates = 0;
        cfg.diagnostics.rolling_windows = 6;
        let m = run_pipeline(&cfg).unwrap();
        assert!(!m.artifacts.iter().any(|a| a.path == "bootstrap.json" || a.path == "plots/rolling.csv"));
        let diag: DiagnosticsReport = crate::io::read_json(&cfg.output_dir.join("diagnostics.json")).unwrap();
        assert!(matches!(diag.rolling, Outcome::Skipped(_)));
    }

    #[test]
    fn counterfactual_limits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path());
        let (ds, _) = ingest(&cfg.inputs, &cfg.ingest).unwrap();
        let (_, delay) = fit_delay(&ds, &cfg.estimate).unwrap();
        let (s, data, fit) = fit_fee(&ds, &cfg.estimate, &delay).unwrap();
        let state = vec![0.8, 3.0, 15.0];
        let none = counterfactual_summary(&ds, &s, &data, &fit, &state, Some(0.0), Some(2.5)).unwrap();
        assert_eq!(none.counterfactual_mean, 2.5);
        assert_eq!(none.baseline_mean, 2.5);
        let all = counterfactual_summary(&ds, &s, &data, &fit, &state, Some(1.0), None).unwrap();
        let direct = crate::fee::counterfactual(&fit, &data, &state, 1.0, 0.0).unwrap();
        let mean = direct.iter().sum::<f64>() / direct.len() as f64;
        assert!((all.counterfactual_mean - mean).abs() <= 1e-12 * mean);
        assert!(counterfactual_summary(&ds, &s, &data, &fit, &[1.0], None, None).is_err());
    }

    #[test]
    fn vcg_check_agrees() {
        let r = vcg_check(300, 8, 1, 1000).unwrap();
        assert_eq!(r.mismatches, 0);
        assert!(r.payments_compared >= 300);
        assert!(r.schedule_max_error < 1e-4);
    }

    #[test]
    fn precision_counts_span_the_sample() {
        assert_eq!(precision_counts(100, 4), vec![15, 43, 72, 100]);
        assert_eq!(precision_counts(3, 5), vec![2, 3]);
    }

    #[test]
    fn stale_delay_fit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path());
        let (ds, _) = ingest(&cfg.inputs, &cfg.ingest).unwrap();
        let (_, mut delay) = fit_delay(&ds, &cfg.estimate).unwrap();
        delay.slopes.pop();
        assert!(fit_fee(&ds, &cfg.estimate, &delay).is_err());
    }
}
