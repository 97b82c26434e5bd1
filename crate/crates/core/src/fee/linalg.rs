//! Small dense least-squares helpers over column-major designs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Subtracts group means from `col`.
///
/// Each group is demeaned in exact integer arithmetic on the group's common
/// binary scale, so the result depends only on the real-valued deviations:
/// adding any exactly representable constant to a group leaves it
/// bit-identical. Groups whose values span too many binades fall back to
/// floating point.
pub fn demean_by_group(col: &[f64], groups: &[usize]) -> Vec<f64> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(*g).or_default().push(i);
    }
    let mut out = vec![0.0; col.len()];
    for rows in members.values() {
        let vals: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        let dev = exact_deviations(&vals).unwrap_or_else(|| {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| v - m).collect()
        });
        for (&i, d) in rows.iter().zip(dev) {
            out[i] = d;
        }
    }
    out
}

/// `v = m * 2^e` with integer `m`, or `None` for non-finite input.
fn decompose(v: f64) -> Option<(i128, i32)> {
    if !v.is_finite() {
        return None;
    }
    if v == 0.0 {
        return Some((0, i32::MAX));
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1 << 52), exp - 1075) };
    let tz = mant.trailing_zeros() as i32;
    Some((sign * (mant >> tz) as i128, e + tz))
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

fn exact_deviations(vals: &[f64]) -> Option<Vec<f64>> {
    let parts: Vec<(i128, i32)> = vals.iter().map(|&v| decompose(v)).collect::<Option<_>>()?;
    let e0 = parts.iter().map(|p| p.1).min()?;
    if e0 == i32::MAX {
        return Some(vec![0.0; vals.len()]);
    }
    let n = vals.len() as i128;
    let scaled: Vec<i128> = parts
        .iter()
        .map(|&(m, e)| if m == 0 { Some(0) } else { m.checked_mul(1i128.checked_shl((e - e0) as u32)?) })
        .collect::<Option<_>>()?;
    let total = scaled.iter().try_fold(0i128, |acc, v| acc.checked_add(*v))?;
    let scale = pow2(e0);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    scaled
        .iter()
        .map(|v| {
            let d = v.checked_mul(n)?.checked_sub(total)?;
            Some(d as f64 / n as f64 * scale)
        })
        .collect()
}

pub fn group_means(col: &[f64], groups: &[usize]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (v, g) in col.iter().zip(groups) {
        let e = acc.entry(*g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gram(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let k = cols.len();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = dot(&cols[i], &cols[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

pub fn cross(cols: &[Vec<f64>], y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(cols.len(), cols.iter().map(|c| dot(c, y)))
}

/// Columns that lie (numerically) in the span of the columns before them.
pub fn collinear_columns(cols: &[Vec<f64>], names: &[String]) -> Vec<String> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (col, name) in cols.iter().zip(names) {
        let norm0 = dot(col, col).sqrt();
        if norm0 == 0.0 {
            bad.push(name.clone());
            continue;
        }
        let mut v: Vec<f64> = col.iter().map(|x| x / norm0).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let r = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= r * qi);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-9 {
            bad.push(name.clone());
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    bad
}

/// Solves a symmetric positive definite system by Cholesky.
pub fn solve_spd(g: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    g.clone().cholesky().map(|c| c.solve(b))
}

pub fn inverse_spd(g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    g.clone().cholesky().map(|c| c.inverse())
}

/// Ordinary least squares of `y` on `cols`, erroring with the names of
/// collinear columns when the design is rank deficient.
pub fn ols(cols: &[Vec<f64>], names: &[String], y: &[f64]) -> Result<Vec<f64>> {
    if cols.is_empty() {
        return Ok(Vec::new());
    }
    let bad = collinear_columns(cols, names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let g = gram(cols);
    let b = cross(cols, y);
    solve_spd(&g, &b).map(|x| x.iter().copied().collect()).ok_or_else(|| Error::RankDeficient(names.to_vec()))
}

/// `y - cols * coef`.
pub fn residuals(cols: &[Vec<f64>], coef: &[f64], y: &[f64]) -> Vec<f64> {
    let mut r = y.to_vec();
    for (c, b) in cols.iter().zip(coef) {
        r.iter_mut().zip(c).for_each(|(ri, ci)| *ri -= b * ci);
    }
    r
}
