/// L2-closest weakly decreasing sequence (pool adjacent violators).
///
/// Output has the same length as the input; pooled blocks take their mean.
pub fn pava_decreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count); a violation is a later block mean above an earlier one
    let mut sums: Vec<f64> = Vec::with_capacity(values.len());
    let mut counts: Vec<usize> = Vec::with_capacity(values.len());
    for &v in values {
        sums.push(v);
        counts.push(1);
        while sums.len() > 1 {
            let k = sums.len() - 1;
            let last = sums[k] / counts[k] as f64;
            let prev = sums[k - 1] / counts[k - 1] as f64;
            if last <= prev {
                break;
            }
            sums[k - 1] += sums[k];
            counts[k - 1] += counts[k];
            sums.pop();
            counts.pop();
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, c) in sums.iter().zip(&counts) {
        let mean = s / *c as f64;
        out.extend(std::iter::repeat_n(mean, *c));
    }
    out
}

/// Weakly increasing counterpart, via negation.
pub fn pava_increasing(values: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    pava_decreasing(&neg).into_iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        assert_eq!(pava_decreasing(&[3.0, 2.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(pava_decreasing(&[3.0, 1.0, 2.0]), vec![3.0, 1.5, 1.5]);
        assert_eq!(pava_decreasing(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(pava_increasing(&[1.0, 3.0, 2.0]), vec![1.0, 2.5, 2.5]);
    }

    proptest! {
        #[test]
        fn monotone_idempotent_mean_preserving(v in prop::collection::vec(-100.0f64..100.0, 1..60)) {
            let fit = pava_decreasing(&v);
            prop_assert_eq!(fit.len(), v.len());
            for w in fit.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert_eq!(pava_decreasing(&fit), fit.clone());
            let m0: f64 = v.iter().sum::<f64>() / v.len() as f64;
            let m1: f64 = fit.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((m0 - m1).abs() <= 1e-9 * (1.0 + m0.abs()));
        }
    }
}
