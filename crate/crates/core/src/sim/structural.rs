//! Synthetic markets with fees generated directly from the log
//! decomposition `log b = log c + alpha * log D(p, s) + log Weight + const + e`,
//! for checking that the two-stage estimator recovers `alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::delay::mix;
use crate::error::{Error, Result};
use crate::market::{tie_aware_percentile, FeeRate, Snapshot, TxRecord, DEFAULT_EPS_RESP};

const BLOCK_SECS: f64 = 600.0;

/// Delay technology in log-seconds:
/// `m(p, s) = base + shift * ln(tx_count / reference) + A(s) * ((1 - p) + curvature * (1 - p)^2 / 2)`,
/// with `A(s) = level * (tx_count / reference)^elasticity`, so the positive
/// gradient is `D = A(s) * (1 + curvature * (1 - p))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuralConfig {
    pub n_epochs: usize,
    pub per_epoch: usize,
    pub epoch_secs: f64,
    pub snapshot_secs: f64,
    pub seed: u64,
    /// True loading of log fee rate on the log delay gradient.
    pub alpha: f64,
    pub cost_mu: f64,
    pub cost_sigma: f64,
    pub fee_noise: f64,
    pub wait_noise: f64,
    pub base_log_wait: f64,
    pub gradient_level: f64,
    pub gradient_elasticity: f64,
    /// Congestion shifts waits at every priority by this log-elasticity.
    pub wait_shift: f64,
    pub curvature: f64,
    pub reference_tx_count: f64,
    /// Mempool transaction count per snapshot, as multiples of the reference
    /// count drawn uniformly; empty draws a lognormal with `tx_count_sigma`.
    pub tx_count_levels: Vec<f64>,
    pub tx_count_sigma: f64,
    /// Log fee-rate intercept (sat/vB).
    pub log_rate_const: f64,
    pub respend_scale: f64,
}

impl Default for StructuralConfig {
    fn default() -> Self {
        StructuralConfig {
            n_epochs: 50,
            per_epoch: 2000,
            epoch_secs: 1800.0,
            snapshot_secs: 25.0,
            seed: 0,
            alpha: 1.0,
            cost_mu: 0.05f64.ln(),
            cost_sigma: 1.3,
            fee_noise: 0.3,
            wait_noise: 0.01,
            base_log_wait: 600f64.ln(),
            gradient_level: 1.5,
            gradient_elasticity: 1.0,
            wait_shift: 1.0,
            curvature: 0.0,
            reference_tx_count: 5000.0,
            tx_count_levels: vec![0.5, 1.0, 2.0],
            tx_count_sigma: 0.5,
            log_rate_const: 8.0,
            respend_scale: 0.5,
        }
    }
}

impl StructuralConfig {
    pub fn gradient(&self, p: f64, tx_count: f64) -> f64 {
        let a = self.gradient_level * (tx_count / self.reference_tx_count).powf(self.gradient_elasticity);
        a * (1.0 + self.curvature * (1.0 - p))
    }

    pub fn log_wait(&self, p: f64, tx_count: f64) -> f64 {
        let a = self.gradient_level * (tx_count / self.reference_tx_count).powf(self.gradient_elasticity);
        let q = 1.0 - p;
        self.base_log_wait + self.wait_shift * (tx_count / self.reference_tx_count).ln() + a * (q + self.curvature * q * q / 2.0)
    }

    fn validate(&self) -> Result<()> {
        if self.n_epochs == 0 || self.per_epoch == 0 {
            return Err(Error::InvalidConfig("structural market needs epochs and transactions".into()));
        }
        let positive = [self.epoch_secs, self.snapshot_secs, self.gradient_level, self.reference_tx_count, self.respend_scale];
        if positive.iter().chain(&self.tx_count_levels).any(|v| !(*v > 0.0)) || self.curvature < 0.0 {
            return Err(Error::InvalidConfig("structural market scales must be positive".into()));
        }
        let sd = [self.cost_sigma, self.fee_noise, self.wait_noise, self.tx_count_sigma];
        if sd.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("dispersions must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralTruth {
    pub tx_id: String,
    pub cost: f64,
    /// Fee-rate percentile within the epoch (the priority the gradient is evaluated at).
    pub percentile: f64,
    pub log_gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralDataset {
    pub config: StructuralConfig,
    pub txs: Vec<TxRecord>,
    pub snapshots: Vec<Snapshot>,
    pub truth: Vec<StructuralTruth>,
}

pub fn generate_structural(cfg: &StructuralConfig) -> Result<StructuralDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x5717]));
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let horizon = cfg.n_epochs as f64 * cfg.epoch_secs;
    let n_snaps = (horizon / cfg.snapshot_secs).ceil() as usize + 1;
    let snapshots: Vec<Snapshot> = (0..n_snaps)
        .map(|k| {
            let ts = k as f64 * cfg.snapshot_secs;
            let scale = if cfg.tx_count_levels.is_empty() {
                (cfg.tx_count_sigma * std.sample(&mut rng)).exp()
            } else {
                cfg.tx_count_levels[rng.random_range(0..cfg.tx_count_levels.len())]
            };
            let tx_count = (cfg.reference_tx_count * scale).round().max(1.0);
            let bytes = (5.0e6 * (0.5 * std.sample(&mut rng)).exp()).round();
            Snapshot {
                ts,
                mempool_bytes: bytes as u64,
                tx_count: tx_count as u64,
                block_height: (ts / BLOCK_SECS).floor() as u64,
                secs_since_last_block: ts % BLOCK_SECS,
                blockspace_util: rng.random_range(0.6..1.0),
            }
        })
        .collect();

    let mut txs = Vec::with_capacity(cfg.n_epochs * cfg.per_epoch);
    let mut truth = Vec::with_capacity(txs.capacity());
    for e in 0..cfg.n_epochs {
        let start = e as f64 * cfg.epoch_secs;
        let n = cfg.per_epoch;
        let mut entry: Vec<f64> = (0..n).map(|_| start + rng.random::<f64>() * cfg.epoch_secs).collect();
        entry.sort_by(f64::total_cmp);
        let snap: Vec<&Snapshot> =
            entry.iter().map(|&t| &snapshots[((t / cfg.snapshot_secs).floor() as usize).min(n_snaps - 1)]).collect();
        let cost: Vec<f64> = (0..n).map(|_| (cfg.cost_mu + cfg.cost_sigma * std.sample(&mut rng)).exp()).collect();
        let noise: Vec<f64> = (0..n).map(|_| cfg.fee_noise * std.sample(&mut rng)).collect();
        let vsize: Vec<u64> = (0..n).map(|_| rng.random_range(110..=400)).collect();
        let wait_noise: Vec<f64> = (0..n).map(|_| cfg.wait_noise * std.sample(&mut rng)).collect();
        let inputs: Vec<u32> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        let outputs: Vec<u32> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let out_sats: Vec<u64> = (0..n).map(|_| (1e6 * (1.5 * std.sample(&mut rng)).exp()) as u64 + 546).collect();

        // priority is the fee-rate percentile, which feeds back into the
        // gradient when the schedule is curved: iterate to a fixed point
        let mut p = vec![0.5; n];
        let mut fee = vec![0u64; n];
        let iterations = if cfg.curvature > 0.0 { 8 } else { 1 };
        for _ in 0..iterations {
            for i in 0..n {
                let log_rate = cfg.log_rate_const
                    + cost[i].ln()
                    + cfg.alpha * cfg.gradient(p[i], snap[i].tx_count as f64).ln()
                    + noise[i];
                fee[i] = (log_rate.exp() * vsize[i] as f64).round().max(1.0) as u64;
            }
            let rates: Vec<FeeRate> = (0..n).map(|i| FeeRate::new(fee[i], vsize[i])).collect();
            p = tie_aware_percentile(&rates)?;
        }

        for i in 0..n {
            let s = snap[i];
            let wait = (cfg.log_wait(p[i], s.tx_count as f64) + wait_noise[i]).exp() - 1.0;
            let wait = wait.max(1.0);
            let id = format!("s{e:04}x{i:05}");
            let mut tx = TxRecord::new(id.clone(), fee[i], vsize[i], entry[i]);
            tx.weight_wu = 4 * vsize[i] - rng.random_range(0..=vsize[i]);
            tx.confirm_time = Some(entry[i] + wait);
            let entry_height = (entry[i] / BLOCK_SECS).floor() as u64;
            let blocks = ((wait / BLOCK_SECS).ceil() as u64).max(1);
            tx.confirm_height = Some(entry_height + blocks);
            tx.wait_blocks = Some(blocks);
            tx.n_inputs = inputs[i];
            tx.n_outputs = outputs[i];
            tx.total_output_sats = out_sats[i];
            tx.set_respend(Some(cfg.respend_scale / cost[i]), DEFAULT_EPS_RESP);
            truth.push(StructuralTruth {
                tx_id: id,
                cost: cost[i],
                percentile: p[i],
                log_gradient: cfg.gradient(p[i], s.tx_count as f64).ln(),
            });
            txs.push(tx);
        }
    }
    Ok(StructuralDataset { config: cfg.clone(), txs, snapshots, truth })
}
