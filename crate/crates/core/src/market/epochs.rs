use serde::{Deserialize, Serialize};

use super::{EpochState, Snapshot, TxRecord, TxState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochConfig {
    pub window_secs: f64,
    /// Largest distance to a snapshot that may stand in for a missing one.
    pub max_gap_secs: f64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig { window_secs: 1800.0, max_gap_secs: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAssignment {
    pub txs: Vec<TxRecord>,
    pub epochs: Vec<EpochState>,
    /// Records dropped because no snapshot was close enough.
    pub dropped: usize,
    pub imputed_epochs: usize,
    pub imputed_txs: usize,
}

/// Splits the timeline into half-open windows anchored at the earliest entry
/// and attaches mempool state to epochs and transactions.
///
/// Epoch state is the mean of the snapshots inside the window. Transactions
/// also get the latest snapshot at or before their entry (within
/// `max_gap_secs`) as their own entry state, which fills `wait_blocks` when
/// the record carries a confirmation height.
pub fn assign_epochs(
    txs: Vec<TxRecord>,
    snapshots: &[Snapshot],
    cfg: &EpochConfig,
) -> Result<EpochAssignment> {
    if !(cfg.window_secs > 0.0) {
        return Err(Error::InvalidConfig("epoch window must be positive".into()));
    }
    if txs.is_empty() {
        return Ok(EpochAssignment {
            txs,
            epochs: Vec::new(),
            dropped: 0,
            imputed_epochs: 0,
            imputed_txs: 0,
        });
    }
    if let Some(tx) = txs.iter().find(|t| !t.entry_time.is_finite()) {
        return Err(Error::InvalidRecord { tx_id: tx.tx_id.clone(), reason: "missing entry time".into() });
    }
    let mut snaps = snapshots.to_vec();
    snaps.sort_by(|a, b| a.ts.total_cmp(&b.ts));

    let t0 = txs.iter().map(|t| t.entry_time).fold(f64::INFINITY, f64::min);
    let window_of = |t: f64| ((t - t0) / cfg.window_secs).floor() as usize;
    let n_windows = txs.iter().map(|t| window_of(t.entry_time)).max().unwrap_or(0) + 1;

    let mut epochs = Vec::with_capacity(n_windows);
    let mut has_state = vec![false; n_windows];
    let mut imputed_epochs = 0;
    for k in 0..n_windows {
        let start = t0 + k as f64 * cfg.window_secs;
        let end = start + cfg.window_secs;
        let lo = snaps.partition_point(|s| s.ts < start);
        let hi = snaps.partition_point(|s| s.ts < end);
        let mut state = EpochState {
            epoch_id: k,
            window_start: start,
            window_end: end,
            congestion_wu: 0,
            blockspace_util: 0.0,
            mempool_bytes: 0,
            mempool_tx_count: 0,
            secs_since_last_block: 0.0,
            n_tx: 0,
            imputed: false,
        };
        let inside = &snaps[lo..hi];
        let chosen: Option<&[Snapshot]> = if !inside.is_empty() {
            Some(inside)
        } else {
            nearest_to_window(&snaps, lo, start, end, cfg.max_gap_secs).map(std::slice::from_ref)
        };
        if let Some(group) = chosen {
            fill_mean_state(&mut state, group);
            state.imputed = inside.is_empty();
            imputed_epochs += state.imputed as usize;
            has_state[k] = true;
        }
        epochs.push(state);
    }

    let mut kept = Vec::with_capacity(txs.len());
    let mut dropped = 0;
    let mut imputed_txs = 0;
    for mut tx in txs {
        let k = window_of(tx.entry_time);
        if !has_state[k] {
            dropped += 1;
            continue;
        }
        let state = entry_state(&snaps, tx.entry_time, cfg.max_gap_secs).unwrap_or_else(|| {
            let e = &epochs[k];
            TxState {
                blockspace_util: e.blockspace_util,
                mempool_bytes: e.mempool_bytes as f64,
                mempool_tx_count: e.mempool_tx_count as f64,
                secs_since_last_block: e.secs_since_last_block,
                block_height: 0,
            }
        });
        if epochs[k].imputed {
            imputed_txs += 1;
        }
        if tx.wait_blocks.is_none() {
            if let Some(h) = tx.confirm_height {
                tx.wait_blocks = Some(h.saturating_sub(state.block_height).max(1));
            }
        }
        tx.epoch_id = Some(k);
        tx.state = Some(state);
        epochs[k].n_tx += 1;
        kept.push(tx);
    }
    Ok(EpochAssignment { txs: kept, epochs, dropped, imputed_epochs, imputed_txs })
}

fn nearest_to_window(snaps: &[Snapshot], lo: usize, start: f64, end: f64, max_gap: f64) -> Option<&Snapshot> {
    // No snapshot lies inside [start, end), so the candidates are the last
    // one before `start` and the first one at or after `end`.
    let before = lo.checked_sub(1).map(|i| (&snaps[i], start - snaps[i].ts));
    let after = snaps.get(lo).map(|s| (s, s.ts - end));
    [before, after]
        .into_iter()
        .flatten()
        .filter(|(_, d)| *d <= max_gap)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| s)
}

fn entry_state(snaps: &[Snapshot], t: f64, max_gap: f64) -> Option<TxState> {
    let idx = snaps.partition_point(|s| s.ts <= t);
    if idx > 0 && t - snaps[idx - 1].ts <= max_gap {
        return Some(snaps[idx - 1].tx_state());
    }
    snaps.get(idx).filter(|s| s.ts - t <= max_gap).map(Snapshot::tx_state)
}

fn fill_mean_state(state: &mut EpochState, group: &[Snapshot]) {
    let n = group.len() as f64;
    let mean = |f: &dyn Fn(&Snapshot) -> f64| group.iter().map(f).sum::<f64>() / n;
    state.blockspace_util = mean(&|s| s.blockspace_util).clamp(0.0, 1.0);
    state.mempool_bytes = mean(&|s| s.mempool_bytes as f64).round() as u64;
    state.mempool_tx_count = mean(&|s| s.tx_count as f64).round() as u64;
    state.secs_since_last_block = mean(&|s| s.secs_since_last_block);
    state.congestion_wu = 4 * state.mempool_bytes;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(ts: f64, height: u64) -> Snapshot {
        Snapshot {
            ts,
            mempool_bytes: 1000,
            tx_count: 10,
            block_height: height,
            secs_since_last_block: 60.0,
            blockspace_util: 0.5,
        }
    }

    fn snaps_every(step: f64, until: f64) -> Vec<Snapshot> {
        let mut out = Vec::new();
        let mut t = 0.0;
        while t <= until {
            out.push(snap(t, 100));
            t += step;
        }
        out
    }

    #[test]
    fn three_transactions_two_epochs() {
        let txs = vec![
            TxRecord::new("a", 10, 10, 0.0),
            TxRecord::new("b", 10, 10, 1700.0),
            TxRecord::new("c", 10, 10, 1900.0),
        ];
        let out = assign_epochs(txs, &snaps_every(25.0, 3600.0), &EpochConfig::default()).unwrap();
        let ids: Vec<_> = out.txs.iter().map(|t| t.epoch_id.unwrap()).collect();
        assert_eq!(ids, vec![0, 0, 1]);
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.epochs[0].n_tx, 2);
        assert_eq!(out.epochs[1].n_tx, 1);
    }

    #[test]
    fn single_and_empty() {
        let out = assign_epochs(vec![TxRecord::new("a", 1, 1, 5.0)], &[snap(0.0, 1)], &EpochConfig::default()).unwrap();
        assert_eq!(out.epochs.len(), 1);
        assert_eq!(out.epochs[0].n_tx, 1);
        let out = assign_epochs(Vec::new(), &[], &EpochConfig::default()).unwrap();
        assert!(out.txs.is_empty() && out.epochs.is_empty());
    }

    #[test]
    fn uniform_ten_hours_gives_twenty_epochs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut times: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..36_000.0)).collect();
        // pin the span so the anchor sits at 0 and the last window is 19
        times[0] = 0.0;
        let txs: Vec<_> = times.iter().enumerate().map(|(i, &t)| TxRecord::new(i.to_string(), 1, 1, t)).collect();
        let out = assign_epochs(txs, &snaps_every(25.0, 36_000.0), &EpochConfig::default()).unwrap();
        // counting oracle
        let mut counts = vec![0usize; 20];
        for &t in &times {
            counts[(t / 1800.0).floor() as usize] += 1;
        }
        assert_eq!(out.epochs.len(), 20);
        let got: Vec<_> = out.epochs.iter().map(|e| e.n_tx).collect();
        assert_eq!(got, counts);
        assert_eq!(got.iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn missing_snapshot_imputes_or_drops() {
        let txs = vec![TxRecord::new("a", 1, 1, 0.0), TxRecord::new("b", 1, 1, 5000.0)];
        // snapshot near tx a only; epoch 2 (3600..5400) has none within 300 s
        let out = assign_epochs(txs.clone(), &[snap(10.0, 1)], &EpochConfig::default()).unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.txs.len(), 1);
        // a snapshot 200 s after the window end is close enough to impute
        let out = assign_epochs(txs, &[snap(10.0, 1), snap(5600.0, 2)], &EpochConfig::default()).unwrap();
        assert_eq!(out.dropped, 0);
        assert!(out.epochs[2].imputed);
        assert_eq!(out.imputed_txs, 1);
    }

    #[test]
    fn wait_blocks_from_entry_height() {
        let mut tx = TxRecord::new("a", 1, 1, 30.0);
        tx.confirm_time = Some(900.0);
        tx.confirm_height = Some(103);
        let out = assign_epochs(vec![tx], &[snap(25.0, 100)], &EpochConfig::default()).unwrap();
        assert_eq!(out.txs[0].wait_blocks, Some(3));
    }

    #[test]
    fn epoch_members_partition_input() {
        let txs: Vec<_> = (0..50).map(|i| TxRecord::new(i.to_string(), 1, 1, (i * 397 % 7200) as f64)).collect();
        let out = assign_epochs(txs, &snaps_every(25.0, 7200.0), &EpochConfig::default()).unwrap();
        let mut ids: Vec<usize> = Vec::new();
        for e in &out.epochs {
            for t in out.txs.iter().filter(|t| t.epoch_id == Some(e.epoch_id)) {
                ids.push(t.tx_id.parse().unwrap());
            }
        }
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
    }
}
