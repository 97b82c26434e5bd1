use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::forest::mix;
use super::{local_slope, monotone_schedule, FeatureMatrix, Forest, ForestConfig, MonotoneSchedule, SlopeConfig};
use crate::error::{Error, Result};

/// Names of the Stage 1 features, in column order. Priority comes first.
pub const DELAY_FEATURES: [&str; 4] = ["priority", "blockspace_util", "mempool_bytes", "mempool_tx_count"];

/// How the monotone schedule behind each slope is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// One schedule per epoch with non-priority features at their epoch medians.
    #[default]
    EpochMedian,
    /// One schedule per transaction at its own features.
    PerObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayConfig {
    pub forest: ForestConfig,
    pub grid_m: usize,
    pub slope: SlopeConfig,
    /// Floor applied before taking logs of slopes in the fee equation.
    pub slope_floor: f64,
    /// Epochs whose steepest local slope is below this are flagged trivial.
    pub flat_tolerance: f64,
    pub mode: ScheduleMode,
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            forest: ForestConfig::default(),
            grid_m: super::DEFAULT_GRID,
            slope: SlopeConfig::default(),
            slope_floor: 1e-6,
            flat_tolerance: 1e-3,
            mode: ScheduleMode::EpochMedian,
        }
    }
}

/// Stage 1 input: one row per confirmed transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayData {
    pub epoch: Vec<usize>,
    /// Columns as in [`DELAY_FEATURES`].
    pub features: FeatureMatrix,
    /// `ln(wait_seconds + 1)`.
    pub target: Vec<f64>,
    /// Epochs sharing a group always land in the same fold (bootstrap
    /// duplicates of one source epoch). Epochs not listed are their own group.
    pub fold_group: BTreeMap<usize, usize>,
}

impl DelayData {
    pub fn new(epoch: Vec<usize>, features: FeatureMatrix, target: Vec<f64>) -> Result<Self> {
        if epoch.len() != features.n_rows() || target.len() != epoch.len() {
            return Err(Error::InvalidConfig("delay data columns differ in length".into()));
        }
        Ok(DelayData { epoch, features, target, fold_group: BTreeMap::new() })
    }

    pub fn with_fold_groups(mut self, groups: BTreeMap<usize, usize>) -> Self {
        self.fold_group = groups;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.epoch.len()
    }

    fn group_of(&self, epoch: usize) -> usize {
        self.fold_group.get(&epoch).copied().unwrap_or(epoch)
    }

    pub fn priority(&self) -> &[f64] {
        self.features.column(0)
    }

    pub fn epochs(&self) -> Vec<usize> {
        let mut e = self.epoch.clone();
        e.sort_unstable();
        e.dedup();
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRegime {
    pub epoch_id: usize,
    pub max_slope: f64,
    pub trivial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRegimeReport {
    pub tolerance: f64,
    pub epochs: Vec<EpochRegime>,
    pub trivial_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayMetrics {
    pub r2: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayFit {
    pub version: u32,
    pub config: DelayConfig,
    pub fold_of_epoch: BTreeMap<usize, usize>,
    /// Epochs each fold's forest was trained on.
    pub trained_epochs: Vec<Vec<usize>>,
    pub schedules: BTreeMap<usize, MonotoneSchedule>,
    /// Raw out-of-fold forest prediction per row.
    pub predicted: Vec<f64>,
    /// Monotone prediction per row.
    pub monotone: Vec<f64>,
    pub slopes: Vec<f64>,
    pub importances: Vec<f64>,
    pub metrics: DelayMetrics,
    pub regimes: GradientRegimeReport,
    #[serde(skip)]
    pub forests: Vec<Forest>,
}

impl DelayFit {
    pub fn log_slopes(&self) -> Vec<f64> {
        let floor = self.config.slope_floor;
        self.slopes.iter().map(|s| s.max(floor).ln()).collect()
    }

    pub fn forest_for(&self, epoch: usize) -> Result<&Forest> {
        let k = *self.fold_of_epoch.get(&epoch).ok_or(Error::MissingForest(epoch))?;
        self.forests.get(k).ok_or(Error::MissingForest(epoch))
    }
}

/// Balanced epoch-to-fold map: epochs ordered by a seeded hash, then dealt
/// round-robin.
pub fn assign_folds(epochs: &[usize], k: usize, seed: u64) -> Result<BTreeMap<usize, usize>> {
    if k < 2 {
        return Err(Error::InvalidConfig("need at least 2 cross-fitting folds".into()));
    }
    if k > epochs.len() {
        return Err(Error::TooFewEpochsForFolds { folds: k, found: epochs.len() });
    }
    let mut keyed: Vec<(u64, usize)> = epochs.iter().map(|&e| (mix(&[seed, e as u64]), e)).collect();
    keyed.sort_unstable();
    Ok(keyed.into_iter().enumerate().map(|(i, (_, e))| (e, i % k)).collect())
}

/// Epoch-level cross-fitting: every row is predicted by the forest trained
/// on the other folds, then projected onto a monotone schedule and
/// differenced.
pub fn crossfit_predict(data: &DelayData, cfg: &DelayConfig) -> Result<DelayFit> {
    cfg.forest.validate()?;
    if data.n_rows() == 0 {
        return Err(Error::EmptyInput("delay data"));
    }
    let epochs = data.epochs();
    let k = cfg.forest.n_folds;
    let mut groups: Vec<usize> = epochs.iter().map(|&e| data.group_of(e)).collect();
    groups.sort_unstable();
    groups.dedup();
    let fold_of_group = assign_folds(&groups, k, cfg.forest.seed)?;
    let fold_of_epoch: BTreeMap<usize, usize> =
        epochs.iter().map(|&e| (e, fold_of_group[&data.group_of(e)])).collect();
    let fold_of_row: Vec<usize> = data.epoch.iter().map(|e| fold_of_epoch[e]).collect();

    let mut forests = Vec::with_capacity(k);
    let mut trained_epochs = Vec::with_capacity(k);
    for fold in 0..k {
        let train: Vec<usize> = (0..data.n_rows()).filter(|&i| fold_of_row[i] != fold).collect();
        let x = data.features.select_rows(&train);
        let y: Vec<f64> = train.iter().map(|&i| data.target[i]).collect();
        forests.push(Forest::fit(&x, &y, &cfg.forest, fold as u64)?);
        trained_epochs.push(epochs.iter().copied().filter(|e| fold_of_epoch[e] != fold).collect());
    }

    let n = data.n_rows();
    let nf = data.features.n_features();
    let mut predicted = Vec::with_capacity(n);
    for i in 0..n {
        predicted.push(forests[fold_of_row[i]].predict_row(&data.features.row(i)));
    }

    let mut rows_by_epoch: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &e) in data.epoch.iter().enumerate() {
        rows_by_epoch.entry(e).or_default().push(i);
    }
    let mut schedules = BTreeMap::new();
    for (&e, rows) in &rows_by_epoch {
        let medians: Vec<f64> = (1..nf).map(|f| median(rows.iter().map(|&i| data.features.column(f)[i]))).collect();
        schedules.insert(e, monotone_schedule(&forests[fold_of_epoch[&e]], &medians, cfg.grid_m)?);
    }

    let p = data.priority();
    let mut monotone = vec![0.0; n];
    let mut slopes = vec![0.0; n];
    match cfg.mode {
        ScheduleMode::EpochMedian => {
            for i in 0..n {
                let s = &schedules[&data.epoch[i]];
                monotone[i] = s.eval(p[i]);
                slopes[i] = local_slope(s, p[i], &cfg.slope)?;
            }
        }
        ScheduleMode::PerObservation => {
            // rows sharing a state vector (same snapshot) share a schedule
            let mut cache: HashMap<(usize, Vec<u64>), MonotoneSchedule> = HashMap::new();
            for i in 0..n {
                let row = data.features.row(i);
                let key = (fold_of_row[i], row[1..].iter().map(|v| v.to_bits()).collect());
                let s = match cache.entry(key) {
                    Entry::Occupied(o) => o.into_mut(),
                    Entry::Vacant(v) => v.insert(monotone_schedule(&forests[fold_of_row[i]], &row[1..], cfg.grid_m)?),
                };
                monotone[i] = s.eval(p[i]);
                slopes[i] = local_slope(s, p[i], &cfg.slope)?;
            }
        }
    }

    let mean_y = data.target.iter().sum::<f64>() / n as f64;
    let sse: f64 = data.target.iter().zip(&predicted).map(|(y, f)| (y - f).powi(2)).sum();
    let sst: f64 = data.target.iter().map(|y| (y - mean_y).powi(2)).sum();
    let metrics = DelayMetrics {
        r2: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        rmse: (sse / n as f64).sqrt(),
    };

    let mut importances = vec![0.0; nf];
    for f in &forests {
        for (acc, v) in importances.iter_mut().zip(&f.importances) {
            *acc += v / k as f64;
        }
    }

    let regimes = regime_report(&schedules, &cfg.slope, cfg.flat_tolerance);
    Ok(DelayFit {
        version: 1,
        config: cfg.clone(),
        fold_of_epoch,
        trained_epochs,
        schedules,
        predicted,
        monotone,
        slopes,
        importances,
        metrics,
        regimes,
        forests,
    })
}

/// Flags epochs whose steepest local slope over the grid is below `tolerance`.
pub fn regime_report(
    schedules: &BTreeMap<usize, MonotoneSchedule>,
    slope: &SlopeConfig,
    tolerance: f64,
) -> GradientRegimeReport {
    let epochs: Vec<EpochRegime> = schedules
        .iter()
        .map(|(&epoch_id, s)| {
            let max_slope = s
                .grid
                .iter()
                .filter_map(|&p| local_slope(s, p, slope).ok())
                .fold(0.0, f64::max);
            EpochRegime { epoch_id, max_slope, trivial: max_slope < tolerance }
        })
        .collect();
    let trivial = epochs.iter().filter(|e| e.trivial).count();
    let trivial_share = if epochs.is_empty() { 0.0 } else { trivial as f64 / epochs.len() as f64 };
    GradientRegimeReport { tolerance, epochs, trivial_share }
}

pub(crate) fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
