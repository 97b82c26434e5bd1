use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{TxRecord, WeightSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalWeight {
    pub vsize_vb: u64,
    pub weight_wu: u64,
}

impl ExternalWeight {
    fn is_valid(&self) -> bool {
        self.vsize_vb > 0 && self.weight_wu >= self.vsize_vb && self.weight_wu <= 4 * self.vsize_vb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub n_records: usize,
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub n_rejected_rows: usize,
    pub match_fraction: f64,
    /// Mean of (external - node) weight over matched records, in WU.
    pub mean_weight_delta: f64,
}

/// Replaces node-reported size fields with external measurements where
/// available. Fee rates are derived from vsize, so matched records pick up
/// the corrected rate automatically.
pub fn correct_weights(
    mut txs: Vec<TxRecord>,
    external: &HashMap<String, ExternalWeight>,
) -> (Vec<TxRecord>, CorrectionReport) {
    let n_rejected_rows = external.values().filter(|w| !w.is_valid()).count();
    let mut n_matched = 0;
    let mut delta_sum = 0.0;
    for tx in &mut txs {
        match external.get(&tx.tx_id).filter(|w| w.is_valid()) {
            Some(w) => {
                delta_sum += w.weight_wu as f64 - tx.weight_wu as f64;
                tx.vsize_vb = w.vsize_vb;
                tx.weight_wu = w.weight_wu;
                tx.weight_source = WeightSource::External;
                n_matched += 1;
            }
            None => tx.weight_source = WeightSource::Node,
        }
    }
    let n_records = txs.len();
    let report = CorrectionReport {
        n_records,
        n_matched,
        n_unmatched: n_records - n_matched,
        n_rejected_rows,
        match_fraction: if n_records > 0 { n_matched as f64 / n_records as f64 } else { 0.0 },
        mean_weight_delta: if n_matched > 0 { delta_sum / n_matched as f64 } else { 0.0 },
    };
    (txs, report)
}
