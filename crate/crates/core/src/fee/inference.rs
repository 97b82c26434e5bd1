//! Sandwich covariances and t-based tests.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::linalg::{gram, inverse_spd};
use crate::error::{Error, Result};

fn bread(cols: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    inverse_spd(&gram(cols)).ok_or_else(|| Error::RankDeficient(vec!["design".into()]))
}

fn sandwich(b: &DMatrix<f64>, meat: &DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    let v = b * meat * b * factor;
    // symmetrize away rounding
    (&v + v.transpose()) * 0.5
}

/// Liang-Zeger covariance clustered on `clusters`, scaled by
/// `G/(G-1) * (N-1)/(N-K)`.
pub fn cluster_covariance(cols: &[Vec<f64>], resid: &[f64], clusters: &[usize], n_params: usize) -> Result<DMatrix<f64>> {
    let k = cols.len();
    let n = resid.len();
    let b = bread(cols)?;
    let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let s = scores.entry(clusters[i]).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            s[j] += cols[j][i] * resid[i];
        }
    }
    let g = scores.len();
    if g < 2 || n <= n_params {
        return Err(Error::NotEnoughEpochs { needed: 2, found: g });
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    let factor = g as f64 / (g - 1) as f64 * (n - 1) as f64 / (n - n_params) as f64;
    Ok(sandwich(&b, &meat, factor))
}

/// Heteroskedasticity-robust covariance with the `N/(N-K)` correction.
pub fn hc1_covariance(cols: &[Vec<f64>], resid: &[f64], n_params: usize) -> Result<DMatrix<f64>> {
    let k = cols.len();
    let n = resid.len();
    if n <= n_params {
        return Err(Error::NotEnoughRows { needed: n_params + 1, found: n });
    }
    let b = bread(cols)?;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let z = DVector::from_iterator(k, cols.iter().map(|c| c[i] * resid[i]));
        meat += &z * z.transpose();
    }
    Ok(sandwich(&b, &meat, n as f64 / (n - n_params) as f64))
}

/// Two-sided t test of a zero null with `df` degrees of freedom.
pub fn t_test(estimate: f64, se: f64, df: usize) -> (f64, f64) {
    if se <= 0.0 || df == 0 {
        return (f64::NAN, f64::NAN);
    }
    let t = estimate / se;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive df");
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Two-sided `level` critical value with `df` degrees of freedom.
pub fn t_critical(level: f64, df: usize) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive df");
    dist.inverse_cdf(0.5 + level / 2.0)
}
