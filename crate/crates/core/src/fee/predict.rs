//! Retransformed predictions, counterfactual state scenarios and the
//! aggregate impatience effect.

use super::model::{FeeData, FeeFit, TermKind};
use crate::error::{Error, Result};

/// Log-scale linear predictor for every row, including the epoch effect
/// when the row's epoch was in the estimation sample.
pub fn linear_predictor(fit: &FeeFit, rows: &FeeData) -> Result<Vec<f64>> {
    let n = rows.n_rows();
    if rows.epoch.len() != n || rows.log_slope.len() != n || rows.impatience.len() != n {
        return Err(Error::InvalidConfig("prediction rows differ in length".into()));
    }
    let mut eta: Vec<f64> =
        rows.epoch.iter().map(|e| fit.intercept.estimate + fit.epoch_effects.get(e).copied().unwrap_or(0.0)).collect();
    let find = |name: &str| {
        rows.controls
            .iter()
            .chain(&rows.state)
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| Error::MissingRegressor(name.to_string()))
    };
    for term in &fit.terms {
        match term.kind {
            TermKind::Intercept | TermKind::Spline => {}
            TermKind::Structural => add(&mut eta, &rows.log_slope, term.estimate),
            TermKind::Control | TermKind::State => {
                let col = find(&term.name)?;
                if col.len() != n {
                    return Err(Error::InvalidConfig(format!("column {} has wrong length", term.name)));
                }
                add(&mut eta, col, term.estimate);
            }
            TermKind::Missingness => {
                for (v, imp) in eta.iter_mut().zip(&rows.impatience) {
                    if imp.is_none() {
                        *v += term.estimate;
                    }
                }
            }
        }
    }
    if let Some(spline) = &fit.spline {
        let basis = spline.basis()?;
        let delta = fit.spline_coefs();
        for (v, imp) in eta.iter_mut().zip(&rows.impatience) {
            if let Some(x) = imp {
                *v += basis.eval(*x).iter().zip(&delta).map(|(b, d)| b * d).sum::<f64>();
            }
        }
    }
    Ok(eta)
}

fn add(eta: &mut [f64], col: &[f64], coef: f64) {
    eta.iter_mut().zip(col).for_each(|(e, x)| *e += coef * x);
}

/// Fee-rate predictions in levels: `exp(eta) * psi`.
pub fn smearing_predict(fit: &FeeFit, rows: &FeeData) -> Result<Vec<f64>> {
    Ok(linear_predictor(fit, rows)?.into_iter().map(|e| e.exp() * fit.smearing).collect())
}

/// Expected fee rates with every row's state controls set to `state_cf`
/// (ordered as `fit.state_names`), mixing in `below_eps_mean` with
/// probability `1 - pi`.
pub fn counterfactual(fit: &FeeFit, rows: &FeeData, state_cf: &[f64], pi: f64, below_eps_mean: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::InvalidConfig(format!("selection probability {pi} outside [0, 1]")));
    }
    if state_cf.len() != fit.state_names.len() {
        return Err(Error::InvalidConfig(format!(
            "counterfactual state has {} coordinates, model has {}",
            state_cf.len(),
            fit.state_names.len()
        )));
    }
    let mut cf = rows.clone();
    for (name, &v) in fit.state_names.iter().zip(state_cf) {
        let col = cf.state.iter_mut().find(|c| &c.name == name).ok_or_else(|| Error::MissingRegressor(name.clone()))?;
        col.values.iter_mut().for_each(|x| *x = v);
    }
    let m = smearing_predict(fit, &cf)?;
    Ok(m.into_iter().map(|m| pi * m + (1.0 - pi) * below_eps_mean).collect())
}

/// Change in log fee rate moving impatience between two values, with a
/// delta-method standard error from the spline block of the covariance.
pub fn spline_effect_between(fit: &FeeFit, from: f64, to: f64) -> Result<(f64, f64)> {
    let spline = fit.spline.as_ref().ok_or_else(|| Error::InvalidConfig("fit has no impatience spline".into()))?;
    let basis = spline.basis()?;
    let (a, b) = (basis.eval(from), basis.eval(to));
    let mut effect = 0.0;
    // gradient over the kept spline terms
    let mut grad = Vec::new();
    for (l, idx) in spline.term_index.iter().enumerate() {
        if let Some(i) = idx {
            let d = b[l] - a[l];
            effect += fit.terms[*i].estimate * d;
            grad.push((*i, d));
        }
    }
    let var: f64 = grad.iter().flat_map(|&(i, gi)| grad.iter().map(move |&(j, gj)| (i, j, gi * gj))).map(|(i, j, w)| w * fit.covariance[i][j]).sum();
    Ok((effect, var.max(0.0).sqrt()))
}

/// [`spline_effect_between`] at two quantiles of the impatience distribution.
pub fn aggregate_spline_effect(fit: &FeeFit, from_q: f64, to_q: f64) -> Result<(f64, f64)> {
    let spline = fit.spline.as_ref().ok_or_else(|| Error::InvalidConfig("fit has no impatience spline".into()))?;
    spline_effect_between(fit, spline.quantile(from_q), spline.quantile(to_q))
}
