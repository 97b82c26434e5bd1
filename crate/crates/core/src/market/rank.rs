use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TxRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedTx {
    /// Position of the transaction in the ranked slice.
    pub tx_ref: usize,
    pub percentile: f64,
}

/// Midpoint-ECDF ranks as exact fractions.
///
/// Returns per-element numerators `2 * #{less} + #{equal}` over the common
/// denominator `2 * N`, so `p_i = num_i / den` exactly.
pub fn tie_aware_numerators<T: PartialOrd>(values: &[T]) -> Result<(Vec<u64>, u64)> {
    if values.is_empty() {
        return Err(Error::EmptyRanking);
    }
    if values.iter().any(|v| v.partial_cmp(v).is_none()) {
        return Err(Error::Undefined("ranking value is not comparable (NaN?)".into()));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));

    let mut num = vec![0u64; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let value = 2 * start as u64 + (end - start) as u64;
        for &i in &order[start..end] {
            num[i] = value;
        }
        start = end;
    }
    Ok((num, 2 * n as u64))
}

/// Tie-aware percentile `(#{r_j < r_i} + #{r_j = r_i}/2) / N`, in input order.
pub fn tie_aware_percentile<T: PartialOrd>(values: &[T]) -> Result<Vec<f64>> {
    let (num, den) = tie_aware_numerators(values)?;
    Ok(num.into_iter().map(|k| k as f64 / den as f64).collect())
}

/// Ranks every epoch-assigned transaction by fee rate within its epoch.
///
/// The ranking set is every transaction that entered the epoch. Records
/// without an epoch get `None`.
pub fn rank_within_epochs(txs: &[TxRecord]) -> Vec<Option<RankedTx>> {
    let mut by_epoch: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, tx) in txs.iter().enumerate() {
        if let Some(e) = tx.epoch_id {
            by_epoch.entry(e).or_default().push(i);
        }
    }
    let mut out = vec![None; txs.len()];
    for members in by_epoch.values() {
        let rates: Vec<_> = members.iter().map(|&i| txs[i].fee_rate()).collect();
        // members is nonempty and fee rates are totally ordered.
        let p = tie_aware_percentile(&rates).expect("nonempty epoch");
        for (&i, p) in members.iter().zip(p) {
            out[i] = Some(RankedTx { tx_ref: i, percentile: p });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        assert_eq!(tie_aware_percentile(&[1, 2, 2, 3]).unwrap(), vec![0.125, 0.5, 0.5, 0.875]);
        assert_eq!(tie_aware_percentile(&[5, 5, 5, 5]).unwrap(), vec![0.5; 4]);
        let p = tie_aware_percentile(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p, vec![1.0 / 6.0, 0.5, 5.0 / 6.0]);
    }

    #[test]
    fn empty_is_error() {
        let empty: [f64; 0] = [];
        assert!(matches!(tie_aware_percentile(&empty), Err(Error::EmptyRanking)));
    }

    #[test]
    fn nan_is_rejected() {
        assert!(tie_aware_percentile(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn mean_is_exactly_half(v in prop::collection::vec(0u32..20, 1..200)) {
            let (num, den) = tie_aware_numerators(&v).unwrap();
            let total: u64 = num.iter().sum();
            // sum(num) / den / N == 1/2  <=>  2 * sum(num) == den * N
            prop_assert_eq!(2 * total, den * v.len() as u64);
        }

        #[test]
        fn strictly_inside_unit_interval(v in prop::collection::vec(0u32..5, 1..50)) {
            for p in tie_aware_percentile(&v).unwrap() {
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }

        #[test]
        fn invariant_under_increasing_transform(v in prop::collection::vec(0u32..30, 1..100)) {
            let t: Vec<f64> = v.iter().map(|&x| (x as f64).exp() + 3.0 * x as f64).collect();
            prop_assert_eq!(tie_aware_percentile(&v).unwrap(), tie_aware_percentile(&t).unwrap());
        }

        #[test]
        fn nondecreasing_in_value(v in prop::collection::vec(0u32..30, 1..100)) {
            let p = tie_aware_percentile(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] { prop_assert!(p[i] < p[j]); }
                    if v[i] == v[j] { prop_assert_eq!(p[i], p[j]); }
                }
            }
        }
    }
}
