//! Lawson-Hanson active-set non-negative least squares on normal equations.

use nalgebra::{DMatrix, DVector};

use super::linalg::solve_spd;
use crate::error::{Error, Result};

/// Minimizes `x'Gx/2 - c'x` subject to `x >= 0`, with `G = A'A`, `c = A'b`.
pub fn nnls_gram(g: &DMatrix<f64>, c: &DVector<f64>) -> Result<DVector<f64>> {
    let n = c.len();
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::InvalidConfig("Gram matrix shape mismatch".into()));
    }
    let scale = (0..n).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale * (1.0 + c.amax());
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = c - g * &x;
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        for _ in 0..max_outer {
            let s = solve_passive(g, c, &passive)?;
            if (0..n).all(|i| !passive[i] || s[i] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && s[i] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - s[i]));
                }
            }
            x = &x + (s - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol / scale {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    Ok(x)
}

fn solve_passive(g: &DMatrix<f64>, c: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let idx: Vec<usize> = (0..c.len()).filter(|&i| passive[i]).collect();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| g[(idx[a], idx[b])]);
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| c[i]));
    let sol = solve_spd(&sub, &rhs).ok_or_else(|| Error::RankDeficient(vec!["spline block".into()]))?;
    let mut full = DVector::zeros(c.len());
    for (k, &i) in idx.iter().enumerate() {
        full[i] = sol[k];
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unconstrained_optimum_inside() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![2.0, 3.0]);
        let x = nnls_gram(&g, &c).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_at_zero() {
        let g = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![-1.0, 2.0]);
        let x = nnls_gram(&g, &c).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kkt_holds(a in prop::collection::vec(-1.0f64..1.0, 40), b in prop::collection::vec(-1.0f64..1.0, 10)) {
            // A is 10 x 4
            let am = DMatrix::from_row_slice(10, 4, &a);
            let bv = DVector::from_vec(b);
            let g = am.transpose() * &am;
            let c = am.transpose() * &bv;
            let x = nnls_gram(&g, &c).unwrap();
            let grad = &g * &x - &c;
            for j in 0..4 {
                prop_assert!(x[j] >= 0.0);
                if x[j] > 0.0 {
                    prop_assert!(grad[j].abs() < 1e-8, "grad {} at active {}", grad[j], j);
                } else {
                    prop_assert!(grad[j] > -1e-8);
                }
            }
        }
    }
}
