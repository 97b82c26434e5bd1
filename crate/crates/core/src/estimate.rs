//! Two-stage estimation on epoch-assigned transaction records.
//!
//! Stage 1 fits the delay technology on confirmed transactions and returns a
//! positive delay gradient per row; stage 2 regresses log fee rate on its log
//! with transaction controls, entry-state controls and epoch fixed effects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::delay::{crossfit_predict, DelayConfig, DelayData, DelayFit, FeatureMatrix};
use crate::error::{Error, Result};
use crate::fee::{epoch_bootstrap, fit_fee_model, BootstrapResult, Column, EpochDraw, FeeData, FeeFit, FeeSpec};
use crate::market::{assign_epochs, rank_within_epochs, EpochConfig, EpochState, Snapshot, TxRecord};

/// Transaction-level controls, in column order.
pub const CONTROL_NAMES: [&str; 8] = [
    "rbf",
    "cpfp_package",
    "log_total_output_sats",
    "log_n_inputs",
    "log_n_outputs",
    "op_return",
    "inscription",
    "log_weight",
];

/// Mempool state at entry, in column order (the counterfactual state vector).
pub const STATE_NAMES: [&str; 3] = ["blockspace_util", "log_secs_since_last_block", "log_mempool_bytes"];

/// Records after ingestion: every transaction carries an epoch and its entry state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub txs: Vec<TxRecord>,
    pub epochs: Vec<EpochState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub delay: DelayConfig,
    pub fee: FeeSpec,
    /// Relay minimum in sat/vB; cheaper rows are left out of the fee equation.
    pub fee_floor: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig { delay: DelayConfig::default(), fee: FeeSpec::default(), fee_floor: 1.0 }
    }
}

/// Rows entering each stage, as indices into `Dataset::txs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub delay_rows: Vec<usize>,
    pub priority: Vec<f64>,
    /// Positions within `delay_rows` that also enter the fee equation.
    pub fee_rows: Vec<usize>,
    pub unconfirmed: usize,
    pub below_floor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub sample: Sample,
    pub delay: DelayFit,
    pub fee: FeeFit,
}

/// Ranks within epochs and selects confirmed, state-bearing rows.
pub fn sample(ds: &Dataset, fee_floor: f64) -> Result<Sample> {
    let ranked = rank_within_epochs(&ds.txs);
    let mut out = Sample { delay_rows: Vec::new(), priority: Vec::new(), fee_rows: Vec::new(), unconfirmed: 0, below_floor: 0 };
    for (i, tx) in ds.txs.iter().enumerate() {
        let Some(r) = &ranked[i] else { continue };
        if tx.state.is_none() {
            return Err(Error::MissingEpochState(tx.epoch_id.unwrap_or(usize::MAX)));
        }
        if tx.confirm_time.is_none() {
            out.unconfirmed += 1;
            continue;
        }
        if tx.fee_rate().as_f64() < fee_floor {
            out.below_floor += 1;
        } else {
            out.fee_rows.push(out.delay_rows.len());
        }
        out.delay_rows.push(i);
        out.priority.push(r.percentile);
    }
    if out.delay_rows.is_empty() {
        return Err(Error::EmptyInput("confirmed transactions"));
    }
    Ok(out)
}

pub fn delay_data(ds: &Dataset, s: &Sample) -> Result<DelayData> {
    let txs: Vec<&TxRecord> = s.delay_rows.iter().map(|&i| &ds.txs[i]).collect();
    let state = |t: &TxRecord| t.state.expect("sampled rows carry state");
    let cols = vec![
        s.priority.clone(),
        txs.iter().map(|t| state(t).blockspace_util).collect(),
        txs.iter().map(|t| state(t).mempool_bytes.ln_1p()).collect(),
        txs.iter().map(|t| state(t).mempool_tx_count.ln_1p()).collect(),
    ];
    let target = txs.iter().map(|t| t.wait_seconds().expect("confirmed").max(0.0).ln_1p()).collect();
    let epoch = txs.iter().map(|t| t.epoch_id.expect("ranked rows have epochs")).collect();
    DelayData::new(epoch, FeatureMatrix::from_columns(cols)?, target)
}

/// Fee-equation rows for the sample, given stage-1 log slopes per delay row.
pub fn fee_data(ds: &Dataset, s: &Sample, log_slopes: &[f64]) -> FeeData {
    let txs: Vec<&TxRecord> = s.fee_rows.iter().map(|&k| &ds.txs[s.delay_rows[k]]).collect();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let col = |name: &str, f: &dyn Fn(&TxRecord) -> f64| Column::new(name, txs.iter().map(|t| f(t)).collect());
    let controls = vec![
        col(CONTROL_NAMES[0], &|t| flag(t.rbf)),
        col(CONTROL_NAMES[1], &|t| flag(t.cpfp_package())),
        col(CONTROL_NAMES[2], &|t| (t.total_output_sats as f64).ln_1p()),
        col(CONTROL_NAMES[3], &|t| (t.n_inputs as f64).ln()),
        col(CONTROL_NAMES[4], &|t| (t.n_outputs as f64).ln()),
        col(CONTROL_NAMES[5], &|t| flag(t.has_op_return)),
        col(CONTROL_NAMES[6], &|t| flag(t.has_inscription)),
        col(CONTROL_NAMES[7], &|t| (t.weight_wu as f64).ln()),
    ];
    let st = |t: &TxRecord| t.state.expect("sampled rows carry state");
    let state = vec![
        col(STATE_NAMES[0], &|t| st(t).blockspace_util),
        col(STATE_NAMES[1], &|t| st(t).secs_since_last_block.max(0.0).ln_1p()),
        col(STATE_NAMES[2], &|t| st(t).mempool_bytes.ln_1p()),
    ];
    FeeData {
        epoch: txs.iter().map(|t| t.epoch_id.expect("ranked rows have epochs")).collect(),
        outcome: txs.iter().map(|t| t.fee_rate().as_f64().ln()).collect(),
        log_slope: s.fee_rows.iter().map(|&k| log_slopes[k]).collect(),
        controls,
        state,
        impatience: txs.iter().map(|t| t.impatience).collect(),
    }
}

fn estimate_with_groups(ds: &Dataset, cfg: &EstimateConfig, groups: BTreeMap<usize, usize>) -> Result<Estimate> {
    let s = sample(ds, cfg.fee_floor).map_err(|e| e.in_stage("rank"))?;
    let data = delay_data(ds, &s).map_err(|e| e.in_stage("delay"))?.with_fold_groups(groups);
    let delay = crossfit_predict(&data, &cfg.delay).map_err(|e| e.in_stage("delay"))?;
    let fd = fee_data(ds, &s, &delay.log_slopes());
    let fee = fit_fee_model(&fd, &cfg.fee).map_err(|e| e.in_stage("fee"))?;
    Ok(Estimate { sample: s, delay, fee })
}

/// Runs both stages.
pub fn estimate(ds: &Dataset, cfg: &EstimateConfig) -> Result<Estimate> {
    estimate_with_groups(ds, cfg, BTreeMap::new())
}

/// Builds the dataset for one resample: each drawn epoch is copied under its
/// new id, so duplicates form distinct clusters.
pub fn resampled_dataset(ds: &Dataset, draws: &[EpochDraw]) -> Dataset {
    let mut by_epoch: BTreeMap<usize, Vec<&TxRecord>> = BTreeMap::new();
    for tx in &ds.txs {
        if let Some(e) = tx.epoch_id {
            by_epoch.entry(e).or_default().push(tx);
        }
    }
    let states: BTreeMap<usize, &EpochState> = ds.epochs.iter().map(|e| (e.epoch_id, e)).collect();
    let mut txs = Vec::new();
    let mut epochs = Vec::new();
    for d in draws {
        for tx in by_epoch.get(&d.source).into_iter().flatten() {
            let mut t = (*tx).clone();
            t.epoch_id = Some(d.id);
            txs.push(t);
        }
        if let Some(st) = states.get(&d.source) {
            let mut st = (*st).clone();
            st.epoch_id = d.id;
            epochs.push(st);
        }
    }
    Dataset { txs, epochs }
}

/// Epoch-block bootstrap re-running both stages; replicates report every
/// term of the point fit (a replicate that loses a term counts as failed).
pub fn bootstrap(ds: &Dataset, cfg: &EstimateConfig, b: usize, seed: u64) -> Result<BootstrapResult> {
    let point = estimate(ds, cfg)?;
    let names: Vec<String> = point.fee.terms.iter().map(|t| t.name.clone()).collect();
    bootstrap_terms(ds, cfg, &names, b, seed)
}

/// As [`bootstrap`], for a given list of terms.
pub fn bootstrap_terms(ds: &Dataset, cfg: &EstimateConfig, names: &[String], b: usize, seed: u64) -> Result<BootstrapResult> {
    let mut epochs: Vec<usize> = ds.txs.iter().filter_map(|t| t.epoch_id).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let refit = |draws: &[EpochDraw]| -> Result<Vec<f64>> {
        let rds = resampled_dataset(ds, draws);
        let groups = draws.iter().map(|d| (d.id, d.source)).collect();
        let fit = estimate_with_groups(&rds, cfg, groups)?;
        names.iter().map(|n| fit.fee.coef(n).ok_or_else(|| Error::MissingRegressor(n.clone()))).collect()
    };
    epoch_bootstrap(&epochs, names, b, seed, refit)
}

/// Attaches epochs and entry state to raw records.
pub fn prepare(txs: Vec<TxRecord>, snapshots: &[Snapshot], cfg: &EpochConfig) -> Result<Dataset> {
    if snapshots.is_empty() {
        return Err(Error::NoEpochState);
    }
    let a = assign_epochs(txs, snapshots, cfg)?;
    Ok(Dataset { txs: a.txs, epochs: a.epochs })
}
