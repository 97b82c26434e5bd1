//! Temporal-stability battery: clustering of regressors (ICC and design
//! effects), rolling windows, expanding-window out-of-sample fit, epoch
//! fixed-effect persistence, variance decomposition and cumulative precision.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate, fee_data, Dataset, Estimate, EstimateConfig};
use crate::fee::{fit_fee_model, linear_predictor, FeeData, FeeFit, FeeSpec, STRUCTURAL_TERM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccReport {
    pub feature: String,
    pub icc: f64,
    pub mean_cluster_size: f64,
    pub design_effect: f64,
    pub effective_n: f64,
    pub n: usize,
}

struct Groups {
    n: usize,
    sizes: Vec<f64>,
    mean: f64,
    /// Sum of squares within groups.
    ssw: f64,
    /// Size-weighted sum of squared deviations of group means.
    ssb: f64,
}

fn groups(values: &[f64], epochs: &[usize]) -> Result<Groups> {
    if values.len() != epochs.len() {
        return Err(Error::InvalidConfig("values and epochs differ in length".into()));
    }
    let mut members: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&v, &e) in values.iter().zip(epochs) {
        members.entry(e).or_default().push(v);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sizes = Vec::new();
    let (mut ssw, mut ssb) = (0.0, 0.0);
    for vs in members.values() {
        let m = vs.iter().sum::<f64>() / vs.len() as f64;
        ssw += vs.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        ssb += vs.len() as f64 * (m - mean).powi(2);
        sizes.push(vs.len() as f64);
    }
    Ok(Groups { n, sizes, mean, ssw, ssb })
}

/// One-way ANOVA intraclass correlation with the implied design effect.
pub fn icc(feature: &str, values: &[f64], epochs: &[usize]) -> Result<IccReport> {
    let g = groups(values, epochs)?;
    let k = g.sizes.len();
    if k < 2 || g.n < 2 {
        return Err(Error::NotEnoughEpochs { needed: 2, found: k });
    }
    if g.n == k {
        return Err(Error::Undefined(format!("ICC of {feature}: every epoch is a singleton")));
    }
    let msb = g.ssb / (k - 1) as f64;
    let msw = g.ssw / (g.n - k) as f64;
    let m_bar = g.n as f64 / k as f64;
    let denom = msb + (m_bar - 1.0) * msw;
    if !(denom > 0.0) {
        return Err(Error::Undefined(format!("ICC of {feature}: no variation")));
    }
    let icc = ((msb - msw) / denom).clamp(0.0, 1.0);
    let design_effect = 1.0 + (m_bar - 1.0) * icc;
    Ok(IccReport {
        feature: feature.to_string(),
        icc,
        mean_cluster_size: m_bar,
        design_effect,
        effective_n: g.n as f64 / design_effect,
        n: g.n,
    })
}

/// ICC of the outcome and every fee-equation regressor; constant columns are skipped.
pub fn feature_iccs(data: &FeeData) -> Vec<IccReport> {
    let mut cols: Vec<(&str, &[f64])> = vec![("log_fee_rate", &data.outcome), (STRUCTURAL_TERM, &data.log_slope)];
    cols.extend(data.controls.iter().chain(&data.state).map(|c| (c.name.as_str(), c.values.as_slice())));
    cols.into_iter().filter_map(|(name, v)| icc(name, v, &data.epoch).ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceShares {
    pub total: f64,
    pub between: f64,
    pub within: f64,
    pub between_share: f64,
    pub within_share: f64,
}

/// Law-of-total-variance split (population variances, size-weighted between part).
pub fn variance_shares(values: &[f64], epochs: &[usize]) -> Result<VarianceShares> {
    let g = groups(values, epochs)?;
    if g.sizes.len() < 2 {
        return Err(Error::NotEnoughEpochs { needed: 2, found: g.sizes.len() });
    }
    let n = g.n as f64;
    let total = values.iter().map(|v| (v - g.mean).powi(2)).sum::<f64>() / n;
    let between = g.ssb / n;
    let within = g.ssw / n;
    let share = |x: f64| if total > 0.0 { x / total } else { f64::NAN };
    Ok(VarianceShares { total, between, within, between_share: share(between), within_share: share(within) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub outcome: VarianceShares,
    pub residual: VarianceShares,
    pub outcome_icc: Option<f64>,
    pub residual_icc: Option<f64>,
}

pub fn variance_decomposition(outcome: &[f64], residuals: &[f64], epochs: &[usize]) -> Result<VarianceDecomposition> {
    Ok(VarianceDecomposition {
        outcome: variance_shares(outcome, epochs)?,
        residual: variance_shares(residuals, epochs)?,
        outcome_icc: icc("outcome", outcome, epochs).ok().map(|r| r.icc),
        residual_icc: icc("residual", residuals, epochs).ok().map(|r| r.icc),
    })
}

/// Sample autocorrelations of a time-ordered series at lags `1..=max_lag`.
pub fn fe_autocorrelation(xi: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if xi.len() < max_lag + 2 {
        return Err(Error::NotEnoughEpochs { needed: max_lag + 2, found: xi.len() });
    }
    let n = xi.len();
    let mean = xi.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = xi.iter().map(|v| v - mean).collect();
    let c0: f64 = d.iter().map(|v| v * v).sum();
    if !(c0 > 0.0) {
        return Err(Error::Undefined("autocorrelation of a constant series".into()));
    }
    Ok((1..=max_lag).map(|k| (0..n - k).map(|t| d[t] * d[t + k]).sum::<f64>() / c0).collect())
}

fn sorted_epochs(ds: &Dataset) -> Vec<usize> {
    ds.txs.iter().filter_map(|t| t.epoch_id).collect::<BTreeSet<_>>().into_iter().collect()
}

fn restrict(ds: &Dataset, keep: &BTreeSet<usize>) -> Dataset {
    Dataset {
        txs: ds.txs.iter().filter(|t| t.epoch_id.is_some_and(|e| keep.contains(&e))).cloned().collect(),
        epochs: ds.epochs.iter().filter(|e| keep.contains(&e.epoch_id)).cloned().collect(),
    }
}

/// Contiguous, near-equal blocks of a sorted list (earlier blocks take the remainder).
fn blocks(items: &[usize], n: usize) -> Vec<Vec<usize>> {
    let (q, r) = (items.len() / n, items.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for w in 0..n {
        let len = q + usize::from(w < r);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub n_obs: usize,
    /// (term, estimate, clustered SE)
    pub terms: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStability {
    pub term: String,
    pub min: f64,
    pub max: f64,
    pub full_sample_se: f64,
    /// Root-mean-square of the per-window SEs.
    pub pooled_se: f64,
    /// `(max - min) / pooled_se`.
    pub range_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingReport {
    pub windows: Vec<WindowFit>,
    pub stability: Vec<CoefficientStability>,
}

/// Re-runs both stages on `n_windows` contiguous epoch blocks and compares
/// each coefficient's spread across windows with the pooled window SE.
pub fn rolling_fit(ds: &Dataset, cfg: &EstimateConfig, n_windows: usize) -> Result<RollingReport> {
    let full = estimate(ds, cfg)?;
    rolling_fit_with(ds, cfg, n_windows, &full.fee)
}

/// As [`rolling_fit`], reusing an existing full-sample fit.
pub fn rolling_fit_with(ds: &Dataset, cfg: &EstimateConfig, n_windows: usize, pooled: &FeeFit) -> Result<RollingReport> {
    let epochs = sorted_epochs(ds);
    if n_windows == 0 || epochs.len() < n_windows {
        return Err(Error::NotEnoughEpochs { needed: n_windows.max(1), found: epochs.len() });
    }
    let parts = blocks(&epochs, n_windows);
    if let Some(p) = parts.iter().find(|p| p.len() < 2) {
        return Err(Error::NotEnoughEpochs { needed: 2, found: p.len() });
    }
    let fits: Vec<Result<Estimate>> = parts
        .par_iter()
        .map(|p| {
            let keep: BTreeSet<usize> = p.iter().copied().collect();
            estimate(&restrict(ds, &keep), cfg)
        })
        .collect();
    let mut windows = Vec::with_capacity(n_windows);
    for (p, fit) in parts.iter().zip(fits) {
        let fit = fit?;
        windows.push(WindowFit {
            first_epoch: p[0],
            last_epoch: p[p.len() - 1],
            n_obs: fit.fee.n_obs,
            terms: fit.fee.terms.iter().map(|t| (t.name.clone(), t.estimate, t.se)).collect(),
        });
    }
    let stability = pooled
        .terms
        .iter()
        .map(|t| {
            let found: Vec<(f64, f64)> =
                windows.iter().filter_map(|w| w.terms.iter().find(|x| x.0 == t.name).map(|x| (x.1, x.2))).collect();
            let min = found.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
            let max = found.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            let pooled_se = (found.iter().map(|x| x.1 * x.1).sum::<f64>() / found.len() as f64).sqrt();
            CoefficientStability {
                term: t.name.clone(),
                min,
                max,
                full_sample_se: t.se,
                pooled_se,
                range_ratio: if pooled_se > 0.0 { (max - min) / pooled_se } else { f64::NAN },
            }
        })
        .collect();
    Ok(RollingReport { windows, stability })
}

fn demean(values: &[f64], epochs: &[usize]) -> Vec<f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&v, &e) in values.iter().zip(epochs) {
        let a = acc.entry(e).or_default();
        a.0 += v;
        a.1 += 1;
    }
    values.iter().zip(epochs).map(|(v, e)| v - acc[e].0 / acc[e].1 as f64).collect()
}

fn r2(actual: &[f64], predicted: &[f64], centred: &[f64]) -> f64 {
    let sse: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    let sst: f64 = centred.iter().map(|v| v * v).sum();
    if sst > 0.0 {
        1.0 - sse / sst
    } else {
        f64::NAN
    }
}

/// Applies a fit to rows demeaned by their own epoch means (test-epoch
/// demeaning); the within-epoch R².
pub fn within_r2(fit: &FeeFit, rows: &FeeData) -> Result<f64> {
    let eta = linear_predictor(fit, rows)?;
    let y = demean(&rows.outcome, &rows.epoch);
    Ok(r2(&y, &demean(&eta, &rows.epoch), &y))
}

/// Raw log fee-rate prediction from structural features and the training
/// intercept only (no epoch effects for unseen epochs).
pub fn strict_r2(fit: &FeeFit, rows: &FeeData) -> Result<(f64, Vec<f64>)> {
    let eta = linear_predictor(fit, rows)?;
    let mean = rows.outcome.iter().sum::<f64>() / rows.n_rows() as f64;
    let centred: Vec<f64> = rows.outcome.iter().map(|v| v - mean).collect();
    let resid = rows.outcome.iter().zip(&eta).map(|(y, p)| y - p).collect();
    Ok((r2(&rows.outcome, &eta, &centred), resid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosSplit {
    pub fraction: f64,
    pub train_epochs: usize,
    pub test_epochs: usize,
    pub train_r2_within_full: f64,
    pub train_r2_within_restricted: f64,
    pub r2_within_full: f64,
    pub r2_within_restricted: f64,
    pub r2_strict: f64,
    /// Drop in test within-R² when the delay gradient is omitted.
    pub delta_r2: f64,
    pub test_variance: Option<VarianceDecomposition>,
    /// Set when a test R² is undefined (no outcome variation).
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosReport {
    pub splits: Vec<OosSplit>,
}

/// Expanding-window evaluation. The first stage is cross-fitted once on the
/// full sample (every slope is out-of-fold); the fee equation is refitted on
/// the first `fraction` of epochs and scored on the rest.
pub fn expanding_oos(ds: &Dataset, cfg: &EstimateConfig, splits: &[f64]) -> Result<OosReport> {
    let full = estimate(ds, cfg)?;
    let data = fee_data(ds, &full.sample, &full.delay.log_slopes());
    expanding_oos_stage2(&data, &cfg.fee, splits)
}

/// Expanding-window evaluation of the fee equation on given rows.
pub fn expanding_oos_stage2(data: &FeeData, spec: &FeeSpec, splits: &[f64]) -> Result<OosReport> {
    let epochs: Vec<usize> = data.epoch.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let restricted = FeeSpec { include_slope: false, ..spec.clone() };
    let mut out = Vec::with_capacity(splits.len());
    for &f in splits {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("split fraction {f} outside (0, 1)")));
        }
        let n_train = ((f * epochs.len() as f64).round() as usize).min(epochs.len() - 1);
        if n_train < 2 {
            return Err(Error::NotEnoughEpochs { needed: 2, found: n_train });
        }
        let cut = epochs[n_train];
        let train_rows: Vec<usize> = (0..data.n_rows()).filter(|&i| data.epoch[i] < cut).collect();
        let test_rows: Vec<usize> = (0..data.n_rows()).filter(|&i| data.epoch[i] >= cut).collect();
        let (train, test) = (data.select_rows(&train_rows), data.select_rows(&test_rows));
        let fit_full = fit_fee_model(&train, spec)?;
        let fit_restricted = fit_fee_model(&train, &restricted)?;
        let r_full = within_r2(&fit_full, &test)?;
        let r_restricted = within_r2(&fit_restricted, &test)?;
        let (r_strict, strict_resid) = strict_r2(&fit_full, &test)?;
        out.push(OosSplit {
            fraction: f,
            train_epochs: n_train,
            test_epochs: epochs.len() - n_train,
            train_r2_within_full: fit_full.r2_within,
            train_r2_within_restricted: fit_restricted.r2_within,
            r2_within_full: r_full,
            r2_within_restricted: r_restricted,
            r2_strict: r_strict,
            delta_r2: r_full - r_restricted,
            test_variance: variance_decomposition(&test.outcome, &strict_resid, &test.epoch).ok(),
            flagged: !(r_full.is_finite() && r_restricted.is_finite() && r_strict.is_finite()),
        });
    }
    Ok(OosReport { splits: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePrecision {
    pub epochs: Vec<usize>,
    pub se: Vec<f64>,
    /// Slope of log SE on log epoch count (about -1/2 under homogeneity).
    pub log_slope: f64,
}

/// Clustered SE of the structural coefficient as epochs accumulate in
/// chronological order, refitting the fee equation on the first `k` epochs.
pub fn cumulative_precision(data: &FeeData, spec: &FeeSpec, counts: &[usize]) -> Result<CumulativePrecision> {
    let epochs: Vec<usize> = data.epoch.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut ks = Vec::new();
    let mut ses = Vec::new();
    for &k in counts {
        if k < 2 || k > epochs.len() {
            return Err(Error::NotEnoughEpochs { needed: k.max(2), found: epochs.len() });
        }
        let keep: BTreeSet<usize> = epochs[..k].iter().copied().collect();
        let rows: Vec<usize> = (0..data.n_rows()).filter(|&i| keep.contains(&data.epoch[i])).collect();
        let fit = fit_fee_model(&data.select_rows(&rows), spec)?;
        let se = fit.slope_coef().ok_or_else(|| Error::MissingRegressor(STRUCTURAL_TERM.into()))?.se;
        ks.push(k);
        ses.push(se);
    }
    let x: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let y: Vec<f64> = ses.iter().map(|s| s.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(CumulativePrecision { epochs: ks, se: ses, log_slope: if sxx > 0.0 { sxy / sxx } else { f64::NAN } })
}

/// Epoch effects in chronological order.
pub fn epoch_effect_series(fit: &FeeFit) -> Vec<f64> {
    fit.epoch_effects.values().copied().collect()
}
