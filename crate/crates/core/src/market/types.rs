use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset in the impatience proxy `1 / (respend_blocks + eps)`.
pub const DEFAULT_EPS_RESP: f64 = 1.0;

/// Exact fee rate in sat/vB, kept as the fraction `fee_sats / vsize_vb`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeeRate {
    pub fee_sats: u64,
    pub vsize_vb: u64,
}

impl FeeRate {
    pub fn new(fee_sats: u64, vsize_vb: u64) -> Self {
        assert!(vsize_vb > 0, "fee rate with zero vsize");
        FeeRate { fee_sats, vsize_vb }
    }

    pub fn as_f64(&self) -> f64 {
        self.fee_sats as f64 / self.vsize_vb as f64
    }
}

impl PartialEq for FeeRate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FeeRate {}

impl PartialOrd for FeeRate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FeeRate {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.fee_sats as u128 * other.vsize_vb as u128;
        let rhs = other.fee_sats as u128 * self.vsize_vb as u128;
        lhs.cmp(&rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightSource {
    /// Weight as reported by the collecting node.
    #[default]
    Node,
    /// Replaced by an external (block-explorer) measurement.
    External,
}

/// Mempool conditions at the moment a transaction entered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxState {
    pub blockspace_util: f64,
    pub mempool_bytes: f64,
    pub mempool_tx_count: f64,
    pub secs_since_last_block: f64,
    pub block_height: u64,
}

/// One transaction, or one collapsed CPFP package.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub tx_id: String,
    pub fee_sats: u64,
    pub weight_wu: u64,
    pub vsize_vb: u64,
    pub entry_time: f64,
    pub confirm_time: Option<f64>,
    pub confirm_height: Option<u64>,
    pub wait_blocks: Option<u64>,
    pub rbf: bool,
    /// Member ids when this record is a collapsed package; empty otherwise.
    pub cpfp_members: Vec<String>,
    pub n_inputs: u32,
    pub n_outputs: u32,
    pub total_output_sats: u64,
    pub has_op_return: bool,
    pub has_inscription: bool,
    pub respend_blocks: Option<f64>,
    pub impatience: Option<f64>,
    pub epoch_id: Option<usize>,
    pub state: Option<TxState>,
    pub weight_source: WeightSource,
}

impl TxRecord {
    /// A bare record with neutral defaults; mostly useful for tests and the simulator.
    pub fn new(tx_id: impl Into<String>, fee_sats: u64, vsize_vb: u64, entry_time: f64) -> Self {
        TxRecord {
            tx_id: tx_id.into(),
            fee_sats,
            weight_wu: vsize_vb * 4,
            vsize_vb,
            entry_time,
            confirm_time: None,
            confirm_height: None,
            wait_blocks: None,
            rbf: false,
            cpfp_members: Vec::new(),
            n_inputs: 1,
            n_outputs: 1,
            total_output_sats: 0,
            has_op_return: false,
            has_inscription: false,
            respend_blocks: None,
            impatience: None,
            epoch_id: None,
            state: None,
            weight_source: WeightSource::Node,
        }
    }

    pub fn fee_rate(&self) -> FeeRate {
        FeeRate::new(self.fee_sats, self.vsize_vb)
    }

    pub fn cpfp_package(&self) -> bool {
        !self.cpfp_members.is_empty()
    }

    pub fn wait_seconds(&self) -> Option<f64> {
        self.confirm_time.map(|c| c - self.entry_time)
    }

    /// Sets the respend horizon and the derived impatience proxy together.
    pub fn set_respend(&mut self, respend_blocks: Option<f64>, eps_resp: f64) {
        self.respend_blocks = respend_blocks;
        self.impatience = respend_blocks.map(|d| 1.0 / (d + eps_resp));
    }

    pub fn validate(&self, eps_resp: f64) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidRecord { tx_id: self.tx_id.clone(), reason: reason.to_string() })
        };
        if self.vsize_vb == 0 {
            return fail("vsize must be positive");
        }
        if self.weight_wu < self.vsize_vb || self.weight_wu > 4 * self.vsize_vb {
            return fail("weight must lie in [vsize, 4*vsize]");
        }
        if !self.entry_time.is_finite() {
            return fail("entry time must be finite");
        }
        if let Some(c) = self.confirm_time {
            if !(c >= self.entry_time) {
                return fail("confirmation precedes entry");
            }
        }
        if self.wait_blocks.is_some() != self.confirm_height.is_some() {
            return fail("wait_blocks present iff confirm_height present");
        }
        if self.n_inputs == 0 || self.n_outputs == 0 {
            return fail("input and output counts must be positive");
        }
        match (self.respend_blocks, self.impatience) {
            (None, None) => {}
            (Some(d), Some(i)) => {
                if !(d > 0.0) {
                    return fail("respend_blocks must be positive");
                }
                if i != 1.0 / (d + eps_resp) {
                    return fail("impatience does not match respend_blocks");
                }
            }
            _ => return fail("impatience present iff respend_blocks present"),
        }
        Ok(())
    }
}

/// One mempool snapshot line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub ts: f64,
    pub mempool_bytes: u64,
    pub tx_count: u64,
    pub block_height: u64,
    pub secs_since_last_block: f64,
    pub blockspace_util: f64,
}

impl Snapshot {
    pub fn tx_state(&self) -> TxState {
        TxState {
            blockspace_util: self.blockspace_util,
            mempool_bytes: self.mempool_bytes as f64,
            mempool_tx_count: self.tx_count as f64,
            secs_since_last_block: self.secs_since_last_block,
            block_height: self.block_height,
        }
    }
}

/// Congestion and capacity state of one epoch window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    pub epoch_id: usize,
    pub window_start: f64,
    pub window_end: f64,
    /// Backlog in weight units (4 x mempool virtual bytes).
    pub congestion_wu: u64,
    pub blockspace_util: f64,
    pub mempool_bytes: u64,
    pub mempool_tx_count: u64,
    pub secs_since_last_block: f64,
    pub n_tx: usize,
    /// State was taken from the nearest snapshot outside the window.
    pub imputed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fee_rate_times_vsize_is_fee() {
        let r = FeeRate::new(1000, 200);
        assert_eq!(r.as_f64() * 200.0, 1000.0);
        assert_eq!(FeeRate::new(10, 2), FeeRate::new(5, 1));
        assert!(FeeRate::new(1, 3) < FeeRate::new(1, 2));
    }

    #[test]
    fn validate_catches_bad_weight() {
        let mut tx = TxRecord::new("a", 100, 100, 0.0);
        tx.weight_wu = 401;
        assert!(tx.validate(1.0).is_err());
        tx.weight_wu = 99;
        assert!(tx.validate(1.0).is_err());
        tx.weight_wu = 400;
        assert!(tx.validate(1.0).is_ok());
    }

    #[test]
    fn impatience_follows_respend() {
        let mut tx = TxRecord::new("a", 100, 100, 0.0);
        tx.set_respend(Some(9.0), DEFAULT_EPS_RESP);
        assert_eq!(tx.impatience, Some(0.1));
        assert!(tx.validate(DEFAULT_EPS_RESP).is_ok());
        tx.impatience = Some(0.2);
        assert!(tx.validate(DEFAULT_EPS_RESP).is_err());
    }

    #[test]
    fn confirm_before_entry_rejected() {
        let mut tx = TxRecord::new("a", 100, 100, 10.0);
        tx.confirm_time = Some(5.0);
        tx.confirm_height = Some(1);
        tx.wait_blocks = Some(1);
        assert!(tx.validate(1.0).is_err());
    }
}
