//! Monotone I-spline basis.
//!
//! An I-spline of degree `d` is the running integral of a normalized
//! M-spline of degree `d - 1`; equivalently the tail sum of degree-`d`
//! B-splines on the same knots. With `J` interior knots there are `J + d`
//! non-constant basis functions, each rising from 0 at the lower boundary
//! to 1 at the upper one.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ISplineBasis {
    degree: usize,
    /// Full clamped knot vector.
    t: Vec<f64>,
}

impl ISplineBasis {
    /// `knots` lists the boundary knots and any interior knots, strictly increasing.
    pub fn new(knots: &[f64], degree: usize) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidConfig("I-spline needs at least 2 knots".into()));
        }
        if degree == 0 {
            return Err(Error::InvalidConfig("I-spline degree must be at least 1".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidConfig("knots must be finite".into()));
        }
        for w in knots.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::DuplicateKnot(w[1]));
            }
        }
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        let mut t = vec![lo; degree + 1];
        t.extend_from_slice(&knots[1..knots.len() - 1]);
        t.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(ISplineBasis { degree, t })
    }

    pub fn len(&self) -> usize {
        self.n_bsplines() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }

    fn n_bsplines(&self) -> usize {
        self.t.len() - self.degree - 1
    }

    /// Basis values at `x` (clamped into the knot span).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        let x = x.clamp(lo, hi);
        let d = self.degree;
        let nb = self.n_bsplines();
        // knot span with t[span] <= x < t[span + 1], using the last real span at x = hi
        let span = if x >= hi { nb - 1 } else { self.t.partition_point(|&k| k <= x) - 1 };
        let b = self.nonzero_bsplines(span, x);
        // B_{span-d..=span} are the only nonzero ones; I_j = sum_{i >= j} B_i
        let mut out = vec![0.0; nb - 1];
        let mut tail = 0.0;
        for i in (1..nb).rev() {
            if i <= span && i + d >= span {
                tail += b[i + d - span];
            }
            out[i - 1] = if i + d < span { 1.0 } else { tail };
        }
        out
    }

    /// The `d + 1` nonzero degree-`d` B-splines at `x` (Cox-de Boor).
    fn nonzero_bsplines(&self, span: usize, x: f64) -> Vec<f64> {
        let d = self.degree;
        let t = &self.t;
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }
}

/// Basis matrix (rows follow `values`).
pub fn ispline_basis(values: &[f64], knots: &[f64], degree: usize) -> Result<Vec<Vec<f64>>> {
    let basis = ISplineBasis::new(knots, degree)?;
    Ok(values.iter().map(|&v| basis.eval(v)).collect())
}
