use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::inference::{cluster_covariance, t_test};
use super::ispline::ISplineBasis;
use super::linalg::{collinear_columns, cross, demean_by_group, dot, gram, group_means, ols, residuals};
use super::nnls::nnls_gram;
use crate::error::{Error, Result};

pub const STRUCTURAL_TERM: &str = "log_delay_gradient";
pub const MISSING_IMPATIENCE_TERM: &str = "impatience_missing";

/// A named regressor column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column { name: name.into(), values }
    }
}

/// Second-stage rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeeData {
    /// Cluster / fixed-effect id per row.
    pub epoch: Vec<usize>,
    /// Log fee rate.
    pub outcome: Vec<f64>,
    /// Log delay gradient from Stage 1.
    pub log_slope: Vec<f64>,
    pub controls: Vec<Column>,
    pub state: Vec<Column>,
    /// Impatience proxy; `None` where no respend was observed.
    pub impatience: Vec<Option<f64>>,
}

impl FeeData {
    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.outcome.len();
        let lens_ok = self.epoch.len() == n
            && self.log_slope.len() == n
            && self.impatience.len() == n
            && self.controls.iter().chain(&self.state).all(|c| c.values.len() == n);
        if !lens_ok {
            return Err(Error::InvalidConfig("fee data columns differ in length".into()));
        }
        let finite = self.outcome.iter().chain(&self.log_slope).all(|v| v.is_finite())
            && self.controls.iter().chain(&self.state).all(|c| c.values.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig("fee data contains non-finite values".into()));
        }
        Ok(())
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> FeeData {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_cols = |cols: &[Column]| cols.iter().map(|c| Column::new(c.name.clone(), pick(&c.values))).collect();
        FeeData {
            epoch: rows.iter().map(|&i| self.epoch[i]).collect(),
            outcome: pick(&self.outcome),
            log_slope: pick(&self.log_slope),
            controls: pick_cols(&self.controls),
            state: pick_cols(&self.state),
            impatience: rows.iter().map(|&i| self.impatience[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineSpec {
    pub degree: usize,
    /// Interior knots as quantiles of observed impatience.
    pub knot_quantiles: Vec<f64>,
}

impl Default for SplineSpec {
    fn default() -> Self {
        SplineSpec { degree: 3, knot_quantiles: vec![0.2, 0.4, 0.6, 0.8, 0.95] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeSpec {
    /// Include the log delay gradient (off for the restricted model).
    pub include_slope: bool,
    /// Absorb epoch fixed effects; otherwise fit a single intercept.
    pub fixed_effects: bool,
    pub spline: Option<SplineSpec>,
    /// Drop regressors with no within-epoch variation instead of failing.
    pub drop_degenerate: bool,
}

impl Default for FeeSpec {
    fn default() -> Self {
        FeeSpec { include_slope: true, fixed_effects: true, spline: None, drop_degenerate: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    Intercept,
    Structural,
    Control,
    State,
    Missingness,
    Spline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub kind: TermKind,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

impl Term {
    pub fn stars(&self) -> &'static str {
        match self.p {
            p if p < 0.001 => "***",
            p if p < 0.01 => "**",
            p if p < 0.05 => "*",
            _ => "",
        }
    }
}

/// Spline as fitted, enough to re-evaluate the impatience mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSpline {
    pub degree: usize,
    pub knots: Vec<f64>,
    /// Impatience quantiles at probabilities `0, 1/200, ..., 1`.
    pub quantiles: Vec<f64>,
    /// Index into `FeeFit::terms` per basis function; `None` where the
    /// column was dropped (coefficient zero).
    pub term_index: Vec<Option<usize>>,
}

impl FittedSpline {
    pub fn basis(&self) -> Result<ISplineBasis> {
        ISplineBasis::new(&self.knots, self.degree)
    }

    /// Impatience quantile by linear interpolation of the stored table.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let pos = q * (self.quantiles.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(self.quantiles.len() - 1);
        self.quantiles[lo] + (pos - lo as f64) * (self.quantiles[hi] - self.quantiles[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeeFit {
    pub spec: FeeSpec,
    /// Estimated slope terms (intercept excluded), spline block last.
    pub terms: Vec<Term>,
    /// Size-weighted mean level; with fixed effects, `mean(alpha + xi_t)`.
    pub intercept: Term,
    pub epoch_effects: BTreeMap<usize, f64>,
    /// Clustered covariance over `terms`, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub r2_within: f64,
    pub r2_overall: f64,
    pub smearing: f64,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub n_params: usize,
    /// Degrees of freedom of the t reference distribution (clusters - 1).
    pub df: usize,
    /// Columns dropped for lacking within-epoch variation.
    pub dropped: Vec<String>,
    pub state_names: Vec<String>,
    pub spline: Option<FittedSpline>,
    /// Gradient of the mean squared error with respect to the spline coefficients.
    pub spline_gradient: Vec<f64>,
}

impl FeeFit {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.estimate)
    }

    pub fn slope_coef(&self) -> Option<&Term> {
        self.term(STRUCTURAL_TERM)
    }

    pub fn spline_coefs(&self) -> Vec<f64> {
        self.spline
            .as_ref()
            .map(|s| s.term_index.iter().map(|i| i.map_or(0.0, |i| self.terms[i].estimate)).collect())
            .unwrap_or_default()
    }

    /// Intercept followed by every term, in table order.
    pub fn table(&self) -> Vec<&Term> {
        std::iter::once(&self.intercept).chain(&self.terms).collect()
    }
}

pub fn spline_term_name(l: usize) -> String {
    format!("impatience_spline_{l}")
}

/// Type-7 sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Boundary knots at the data range, interior knots at the requested
/// quantiles; coincident knots (heavily tied data) are merged.
fn spline_knots(sorted: &[f64], quantiles: &[f64]) -> Vec<f64> {
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let mut knots = vec![lo];
    for &q in quantiles {
        let k = quantile_sorted(sorted, q);
        if k > *knots.last().unwrap() && k < hi {
            knots.push(k);
        }
    }
    knots.push(hi);
    knots
}

struct Design {
    names: Vec<String>,
    kinds: Vec<TermKind>,
    raw: Vec<Vec<f64>>,
}

impl Design {
    fn push(&mut self, name: impl Into<String>, kind: TermKind, values: Vec<f64>) {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.raw.push(values);
    }
}

/// Fits the log-fee equation with epoch fixed effects (or a pooled
/// intercept), an optional non-negative I-spline impatience block, and
/// epoch-clustered inference.
pub fn fit_fee_model(data: &FeeData, spec: &FeeSpec) -> Result<FeeFit> {
    data.validate()?;
    let n = data.n_rows();
    let clusters: BTreeSet<usize> = data.epoch.iter().copied().collect();
    let g = clusters.len();
    if spec.fixed_effects && g < 2 {
        return Err(Error::NotEnoughEpochs { needed: 2, found: g });
    }

    let mut design = Design { names: vec![], kinds: vec![], raw: vec![] };
    if !spec.fixed_effects {
        design.push("const", TermKind::Intercept, vec![1.0; n]);
    }
    if spec.include_slope {
        design.push(STRUCTURAL_TERM, TermKind::Structural, data.log_slope.clone());
    }
    for c in &data.controls {
        design.push(c.name.clone(), TermKind::Control, c.values.clone());
    }
    for c in &data.state {
        design.push(c.name.clone(), TermKind::State, c.values.clone());
    }

    let mut spline_meta = None;
    if let Some(sp) = &spec.spline {
        let mut observed: Vec<f64> = data.impatience.iter().flatten().copied().collect();
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite impatience".into()));
        }
        if observed.len() < 2 {
            return Err(Error::NotEnoughRows { needed: 2, found: observed.len() });
        }
        observed.sort_by(f64::total_cmp);
        if observed[0] == observed[observed.len() - 1] {
            return Err(Error::RankDeficient(vec!["impatience (constant)".into()]));
        }
        let knots = spline_knots(&observed, &sp.knot_quantiles);
        let basis = ISplineBasis::new(&knots, sp.degree)?;
        if data.impatience.iter().any(Option::is_none) {
            let ind = data.impatience.iter().map(|v| if v.is_none() { 1.0 } else { 0.0 }).collect();
            design.push(MISSING_IMPATIENCE_TERM, TermKind::Missingness, ind);
        }
        let mut cols = vec![vec![0.0; n]; basis.len()];
        for (i, v) in data.impatience.iter().enumerate() {
            if let Some(v) = v {
                for (l, b) in basis.eval(*v).into_iter().enumerate() {
                    cols[l][i] = b;
                }
            }
        }
        for (l, col) in cols.into_iter().enumerate() {
            design.push(spline_term_name(l + 1), TermKind::Spline, col);
        }
        let quantiles = (0..=200).map(|k| quantile_sorted(&observed, k as f64 / 200.0)).collect();
        spline_meta = Some((sp.degree, knots, quantiles, basis.len()));
    }

    // within transformation
    let within = |v: &[f64]| if spec.fixed_effects { demean_by_group(v, &data.epoch) } else { v.to_vec() };
    let y = within(&data.outcome);
    let mut dropped = Vec::new();
    let mut keep = Vec::new();
    let mut cols = Vec::new();
    for (j, raw) in design.raw.iter().enumerate() {
        let w = within(raw);
        let scale = raw.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let degenerate = w.iter().all(|v| v.abs() <= 1e-12 * scale);
        if degenerate && (spec.drop_degenerate || design.kinds[j] == TermKind::Spline) {
            dropped.push(design.names[j].clone());
            continue;
        }
        keep.push(j);
        cols.push(w);
    }
    if keep.is_empty() {
        return Err(Error::EmptyInput("no regressors left after dropping degenerate columns"));
    }
    let names: Vec<String> = keep.iter().map(|&j| design.names[j].clone()).collect();
    let kinds: Vec<TermKind> = keep.iter().map(|&j| design.kinds[j]).collect();
    let bad = collinear_columns(&cols, &names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let k = cols.len();
    if n <= k + usize::from(spec.fixed_effects) {
        return Err(Error::NotEnoughRows { needed: k + 2, found: n });
    }

    let free: Vec<usize> = (0..k).filter(|&j| kinds[j] != TermKind::Spline).collect();
    let spl: Vec<usize> = (0..k).filter(|&j| kinds[j] == TermKind::Spline).collect();
    let free_cols: Vec<Vec<f64>> = free.iter().map(|&j| cols[j].clone()).collect();
    let free_names: Vec<String> = free.iter().map(|&j| names[j].clone()).collect();

    let mut coef = vec![0.0; k];
    if spl.is_empty() {
        let b = ols(&free_cols, &free_names, &y)?;
        for (&j, b) in free.iter().zip(b) {
            coef[j] = b;
        }
    } else {
        // partial the free regressors out of the spline block, solve the
        // constrained problem there, then recover the free coefficients
        let partial = |v: &[f64]| -> Result<Vec<f64>> {
            if free_cols.is_empty() {
                return Ok(v.to_vec());
            }
            let b = ols(&free_cols, &free_names, v)?;
            Ok(residuals(&free_cols, &b, v))
        };
        let ry = partial(&y)?;
        let rs: Vec<Vec<f64>> = spl.iter().map(|&j| partial(&cols[j])).collect::<Result<_>>()?;
        let inv_n = 1.0 / n as f64;
        let gm = gram(&rs) * inv_n;
        let c = cross(&rs, &ry) * inv_n;
        let delta = nnls_gram(&gm, &c)?;
        let mut y_net = y.clone();
        for (s, &j) in spl.iter().enumerate() {
            coef[j] = delta[s];
            y_net.iter_mut().zip(&cols[j]).for_each(|(yi, xi)| *yi -= delta[s] * xi);
        }
        let b = if free_cols.is_empty() { vec![] } else { ols(&free_cols, &free_names, &y_net)? };
        for (&j, b) in free.iter().zip(b) {
            coef[j] = b;
        }
    }

    let e = residuals(&cols, &coef, &y);
    let sse = dot(&e, &e);
    let mean_y = data.outcome.iter().sum::<f64>() / n as f64;
    let tss = data.outcome.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>();
    let r2_overall = if tss > 0.0 { 1.0 - sse / tss } else { f64::NAN };
    let r2_within = if spec.fixed_effects {
        let wss = dot(&y, &y);
        if wss > 0.0 { 1.0 - sse / wss } else { f64::NAN }
    } else {
        r2_overall
    };
    let smearing = e.iter().map(|r| r.exp()).sum::<f64>() / n as f64;

    // spline coefficients held at the bound are fixed given the active set
    let estimated: Vec<usize> = (0..k).filter(|&j| kinds[j] != TermKind::Spline || coef[j] > 0.0).collect();
    let est_cols: Vec<Vec<f64>> = estimated.iter().map(|&j| cols[j].clone()).collect();
    let n_params = estimated.len() + usize::from(spec.fixed_effects);
    let cov_est = cluster_covariance(&est_cols, &e, &data.epoch, n_params)?;
    let mut cov = nalgebra::DMatrix::zeros(k, k);
    for (a, &ja) in estimated.iter().enumerate() {
        for (b, &jb) in estimated.iter().enumerate() {
            cov[(ja, jb)] = cov_est[(a, b)];
        }
    }
    let df = g.saturating_sub(1);
    let terms: Vec<Term> = (0..k)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let (t, p) = t_test(coef[j], se, df);
            Term { name: names[j].clone(), kind: kinds[j], estimate: coef[j], se, t, p }
        })
        .collect();

    // levels: alpha + xi_t = mean_t(y) - mean_t(x)'gamma
    let mut epoch_effects = BTreeMap::new();
    let intercept = if spec.fixed_effects {
        let ymeans = group_means(&data.outcome, &data.epoch);
        let xmeans: Vec<BTreeMap<usize, f64>> =
            keep.iter().map(|&j| group_means(&design.raw[j], &data.epoch)).collect();
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for ep in &data.epoch {
            *sizes.entry(*ep).or_default() += 1;
        }
        let mut level = BTreeMap::new();
        for (&ep, &ym) in &ymeans {
            let fitted: f64 = (0..k).map(|j| coef[j] * xmeans[j][&ep]).sum();
            level.insert(ep, ym - fitted);
        }
        let alpha = level.iter().map(|(ep, v)| v * sizes[ep] as f64).sum::<f64>() / n as f64;
        for (ep, v) in level {
            epoch_effects.insert(ep, v - alpha);
        }
        let xbar: Vec<f64> = keep.iter().map(|&j| design.raw[j].iter().sum::<f64>() / n as f64).collect();
        let var = (0..k).map(|a| (0..k).map(|b| xbar[a] * cov[(a, b)] * xbar[b]).sum::<f64>()).sum::<f64>();
        let se = var.max(0.0).sqrt();
        let (t, p) = t_test(alpha, se, df);
        Term { name: "const".into(), kind: TermKind::Intercept, estimate: alpha, se, t, p }
    } else {
        terms[0].clone()
    };
    let terms: Vec<Term> = if spec.fixed_effects { terms } else { terms[1..].to_vec() };
    let offset = usize::from(!spec.fixed_effects);
    let covariance: Vec<Vec<f64>> =
        (offset..k).map(|a| (offset..k).map(|b| cov[(a, b)]).collect()).collect();

    let spline_gradient: Vec<f64> = spl.iter().map(|&j| -dot(&cols[j], &e) / n as f64).collect();
    let spline = spline_meta.map(|(degree, knots, quantiles, len)| {
        let term_index = (1..=len)
            .map(|l| {
                let name = spline_term_name(l);
                terms.iter().position(|t| t.name == name)
            })
            .collect();
        FittedSpline { degree, knots, quantiles, term_index }
    });

    Ok(FeeFit {
        spec: spec.clone(),
        terms,
        intercept,
        epoch_effects,
        covariance,
        r2_within,
        r2_overall,
        smearing,
        residuals: e,
        n_obs: n,
        n_clusters: g,
        n_params,
        df,
        dropped,
        state_names: data.state.iter().map(|c| c.name.clone()).collect(),
        spline,
        spline_gradient,
    })
}
