//! Discrete-event priority queue with weight-constrained blocks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::config::{FeePolicy, SimConfig};
use super::vcg::compute_vcg_schedule;
use crate::delay::{mix, pava_decreasing};
use crate::error::{Error, Result};
use crate::market::{tie_aware_percentile, FeeRate, Snapshot, TxRecord, DEFAULT_EPS_RESP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    Exogenous,
    RandomRates,
    Equilibrium,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAgent {
    pub agent_id: u64,
    pub cost: f64,
    pub value: f64,
    pub weight_wu: u64,
    pub vsize_vb: u64,
    /// Seconds.
    pub entry_time: f64,
    /// Position of `cost` in the population cost distribution.
    pub cost_quantile: f64,
    pub chosen_fee_sats: u64,
    pub participating: bool,
    pub confirm_time: Option<f64>,
    pub confirm_height: Option<u64>,
    pub realized_wait_blocks: Option<u64>,
    /// `value - cost * wait - fee` in USD, for confirmed agents.
    pub surplus: Option<f64>,
}

impl SimAgent {
    pub fn tx_id(&self) -> String {
        format!("tx{:08}", self.agent_id)
    }

    pub fn fee_rate(&self) -> FeeRate {
        FeeRate::new(self.chosen_fee_sats, self.vsize_vb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub height: u64,
    pub time: f64,
    pub weight_wu: u64,
    pub included: Vec<u64>,
}

/// The stationary delay schedule agents plan against, with the implied
/// gradient and per-weight-unit fee schedule (USD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSchedule {
    pub grid: Vec<f64>,
    pub wait_blocks: Vec<f64>,
    pub gradient: Vec<f64>,
    pub fee_per_wu: Vec<f64>,
}

impl PlannedSchedule {
    fn interp(&self, v: &[f64], p: f64) -> f64 {
        let m = self.grid.len();
        let x = p.clamp(0.0, 1.0) * (m - 1) as f64;
        let k = (x.floor() as usize).min(m - 2);
        let t = x - k as f64;
        v[k] * (1.0 - t) + v[k + 1] * t
    }

    pub fn wait_at(&self, p: f64) -> f64 {
        self.interp(&self.wait_blocks, p)
    }

    pub fn fee_per_wu_at(&self, p: f64) -> f64 {
        self.interp(&self.fee_per_wu, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub mode: SimMode,
    pub config: SimConfig,
    pub agents: Vec<SimAgent>,
    pub txs: Vec<TxRecord>,
    pub snapshots: Vec<Snapshot>,
    pub blocks: Vec<BlockRecord>,
    pub planned: Option<PlannedSchedule>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    rate: FeeRate,
    entry: f64,
    id: u64,
    weight: u64,
    vsize: u64,
}

impl Eq for Pending {}

impl Ord for Pending {
    /// Greater = mined first: higher fee rate, then earlier entry, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.rate
            .cmp(&other.rate)
            .then_with(|| other.entry.total_cmp(&self.entry))
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn draw_agents(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<SimAgent> {
    let mut agents = Vec::new();
    let push = |id: u64, cost: f64, value: f64, weight: u64, entry: f64| SimAgent {
        agent_id: id,
        cost,
        value,
        weight_wu: weight,
        vsize_vb: weight.div_ceil(4),
        entry_time: entry,
        cost_quantile: cfg.cost_dist.cdf(cost),
        chosen_fee_sats: 0,
        participating: true,
        confirm_time: None,
        confirm_height: None,
        realized_wait_blocks: None,
        surplus: None,
    };
    for (i, a) in cfg.preseed.iter().enumerate() {
        agents.push(push(i as u64, a.cost, a.value, a.weight_wu, 0.0));
    }
    if cfg.arrival_rate_lambda > 0.0 {
        let gap = Exp::new(cfg.arrival_rate_lambda / 60.0).expect("positive rate");
        let end = cfg.horizon * 60.0;
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t > end {
                break;
            }
            let cost = cfg.cost_dist.sample(rng);
            let value = cfg.value_dist.sample(rng);
            let w = (cfg.weight_dist.sample(rng).round() as u64).clamp(4, cfg.block_capacity_wu);
            let id = agents.len() as u64;
            agents.push(push(id, cost, value, w, t));
        }
    }
    agents
}

struct QueueOutcome {
    blocks: Vec<BlockRecord>,
    snapshots: Vec<Snapshot>,
}

/// Runs the event loop over participating agents (sorted by entry time),
/// filling in their confirmation fields.
fn run_queue(cfg: &SimConfig, agents: &mut [SimAgent], block_seed: u64) -> QueueOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(block_seed);
    let block_gap = Exp::new(cfg.block_rate_mu / 60.0).expect("positive rate");
    let horizon = cfg.horizon * 60.0;
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].participating).collect();
        o.sort_by(|&a, &b| agents[a].entry_time.total_cmp(&agents[b].entry_time).then(a.cmp(&b)));
        o
    };
    let min_weight = order.iter().map(|&i| agents[i].weight_wu).min().unwrap_or(u64::MAX);
    let index_of = |id: u64| id as usize;

    let mut heap: BinaryHeap<Pending> = BinaryHeap::new();
    let mut pending_bytes: u64 = 0;
    let mut blocks = Vec::new();
    let mut snapshots = Vec::new();
    let mut next_arrival = 0;
    let mut next_block = block_gap.sample(&mut rng);
    let mut next_snap = 0.0;
    let mut last_block_time = 0.0;
    let mut last_util = 0.0;
    loop {
        let t_arr = order.get(next_arrival).map_or(f64::INFINITY, |&i| agents[i].entry_time);
        let arrivals_done = next_arrival >= order.len();
        let finished = if cfg.drain { arrivals_done && heap.is_empty() } else { next_block.min(next_snap).min(t_arr) > horizon };
        if finished {
            break;
        }
        if t_arr <= next_snap && t_arr <= next_block {
            let a = &agents[order[next_arrival]];
            heap.push(Pending { rate: a.fee_rate(), entry: a.entry_time, id: a.agent_id, weight: a.weight_wu, vsize: a.vsize_vb });
            pending_bytes += a.vsize_vb;
            next_arrival += 1;
        } else if next_snap <= next_block {
            snapshots.push(Snapshot {
                ts: next_snap,
                mempool_bytes: pending_bytes,
                tx_count: heap.len() as u64,
                block_height: blocks.len() as u64,
                secs_since_last_block: next_snap - last_block_time,
                blockspace_util: last_util,
            });
            next_snap += cfg.snapshot_secs;
        } else {
            let t = next_block;
            let height = blocks.len() as u64 + 1;
            let mut remaining = cfg.block_capacity_wu;
            let mut skipped = Vec::new();
            let mut included = Vec::new();
            while remaining >= min_weight {
                let Some(tx) = heap.pop() else { break };
                if tx.weight <= remaining {
                    remaining -= tx.weight;
                    pending_bytes -= tx.vsize;
                    included.push(tx.id);
                    let a = &mut agents[index_of(tx.id)];
                    a.confirm_time = Some(t);
                    a.confirm_height = Some(height);
                } else {
                    skipped.push(tx);
                }
            }
            heap.extend(skipped);
            let used = cfg.block_capacity_wu - remaining;
            last_util = used as f64 / cfg.block_capacity_wu as f64;
            last_block_time = t;
            blocks.push(BlockRecord { height, time: t, weight_wu: used, included });
            next_block = t + block_gap.sample(&mut rng);
        }
    }
    // blocks mined before each entry give the wait in blocks
    let block_times: Vec<f64> = blocks.iter().map(|b| b.time).collect();
    for a in agents.iter_mut() {
        if let Some(h) = a.confirm_height {
            let before = block_times.partition_point(|&bt| bt < a.entry_time) as u64;
            a.realized_wait_blocks = Some(h - before);
        }
    }
    QueueOutcome { blocks, snapshots }
}

fn assign_random_rates(agents: &mut [SimAgent], min_rate: f64, max_rate: f64, rng: &mut ChaCha8Rng) {
    for a in agents {
        let r = if max_rate > min_rate { rng.random_range(min_rate..max_rate) } else { min_rate };
        a.chosen_fee_sats = (r * a.vsize_vb as f64).round().max(1.0) as u64;
    }
}

/// Maps realized waits against fee-rate priority into a weakly decreasing
/// schedule on `grid_m` points, with its non-negative gradient.
fn planned_from_pilot(agents: &[SimAgent], grid_m: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let confirmed: Vec<&SimAgent> = agents.iter().filter(|a| a.realized_wait_blocks.is_some()).collect();
    if confirmed.len() < 2 {
        return Err(Error::NotEnoughRows { needed: 2, found: confirmed.len() });
    }
    let rates: Vec<FeeRate> = confirmed.iter().map(|a| a.fee_rate()).collect();
    let p = tie_aware_percentile(&rates)?;
    let bins = 50.min(confirmed.len());
    let mut sum = vec![0.0; bins];
    let mut cnt = vec![0usize; bins];
    for (a, &pi) in confirmed.iter().zip(&p) {
        let b = ((pi * bins as f64) as usize).min(bins - 1);
        sum[b] += a.realized_wait_blocks.unwrap() as f64;
        cnt[b] += 1;
    }
    let centers: Vec<f64> = (0..bins).filter(|&b| cnt[b] > 0).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    let means: Vec<f64> = (0..bins).filter(|&b| cnt[b] > 0).map(|b| sum[b] / cnt[b] as f64).collect();
    let fitted = pava_decreasing(&means);
    let grid: Vec<f64> = (0..grid_m).map(|k| k as f64 / (grid_m - 1) as f64).collect();
    let wait: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let j = centers.partition_point(|&c| c < x);
            if j == 0 {
                fitted[0]
            } else if j >= centers.len() {
                fitted[centers.len() - 1]
            } else {
                let t = (x - centers[j - 1]) / (centers[j] - centers[j - 1]);
                fitted[j - 1] * (1.0 - t) + fitted[j] * t
            }
        })
        .collect();
    let h = 1.0 / (grid_m - 1) as f64;
    let gradient: Vec<f64> = (0..grid_m)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(grid_m - 1));
            ((wait[a] - wait[b]) / ((b - a) as f64 * h)).max(0.0)
        })
        .collect();
    Ok((grid, wait, gradient))
}

fn finalize(cfg: &SimConfig, mode: SimMode, mut agents: Vec<SimAgent>, outcome: QueueOutcome, planned: Option<PlannedSchedule>, rng: &mut ChaCha8Rng) -> SimDataset {
    let mut txs = Vec::new();
    for a in agents.iter_mut() {
        if let Some(w) = a.realized_wait_blocks {
            a.surplus = Some(a.value - a.cost * w as f64 - a.chosen_fee_sats as f64 / cfg.sats_per_usd);
        }
    }
    for a in &agents {
        // descriptive fields drawn in agent order so they do not depend on the queue
        let n_inputs = rng.random_range(1..=3u32);
        let n_outputs = rng.random_range(1..=3u32);
        let total_output_sats = (rng.random::<f64>() * 5e6) as u64 + 546;
        let rbf = rng.random_bool(0.1);
        let op_return = rng.random_bool(0.02);
        if !a.participating {
            continue;
        }
        let mut tx = TxRecord::new(a.tx_id(), a.chosen_fee_sats, a.vsize_vb, a.entry_time);
        tx.weight_wu = a.weight_wu;
        tx.confirm_time = a.confirm_time;
        tx.confirm_height = a.confirm_height;
        tx.wait_blocks = a.realized_wait_blocks;
        tx.n_inputs = n_inputs;
        tx.n_outputs = n_outputs;
        tx.total_output_sats = total_output_sats;
        tx.rbf = rbf;
        tx.has_op_return = op_return;
        let respend = if a.cost > 0.0 { Some(cfg.respend_scale / a.cost) } else { None };
        tx.set_respend(respend, DEFAULT_EPS_RESP);
        txs.push(tx);
    }
    SimDataset { mode, config: cfg.clone(), agents, txs, snapshots: outcome.snapshots, blocks: outcome.blocks, planned }
}

/// Simulates the queue under `policy`. Deterministic in `cfg.seed`.
pub fn simulate_queue(cfg: &SimConfig, policy: &FeePolicy) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 1]));
    let mut agents = draw_agents(cfg, &mut rng);
    let block_seed = mix(&[cfg.seed, 2]);
    let mut extra = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 3]));

    let (mode, planned) = match policy {
        FeePolicy::Exogenous(fees) => {
            for a in agents.iter_mut() {
                a.chosen_fee_sats = *fees.get(&a.agent_id).ok_or(Error::MissingFee(a.agent_id))?;
            }
            (SimMode::Exogenous, None)
        }
        FeePolicy::RandomRates { min_rate, max_rate } => {
            if !(*min_rate >= 0.0 && max_rate >= min_rate) {
                return Err(Error::InvalidConfig("random fee-rate range is empty".into()));
            }
            assign_random_rates(&mut agents, *min_rate, *max_rate, &mut extra);
            (SimMode::RandomRates, None)
        }
        FeePolicy::Equilibrium => {
            // pilot: priorities independent of costs trace out the delay schedule
            let mut pilot = agents.clone();
            assign_random_rates(&mut pilot, 1.0, 100.0, &mut extra);
            run_queue(cfg, &mut pilot, mix(&[cfg.seed, 4]));
            let (grid, wait, gradient) = planned_from_pilot(&pilot, cfg.schedule_grid)?;
            let g = gradient.clone();
            let m = grid.len();
            let sched = compute_vcg_schedule(
                |q| cfg.cost_dist.quantile(q.min(1.0 - 1e-9)),
                move |q| g[((q * (m - 1) as f64).round() as usize).min(m - 1)],
                cfg.kappa,
                1.0,
                m,
            )?;
            let planned = PlannedSchedule { grid, wait_blocks: wait, gradient, fee_per_wu: sched.fees };
            for a in agents.iter_mut() {
                let fee_usd = planned.fee_per_wu_at(a.cost_quantile) * a.weight_wu as f64;
                let floor = (cfg.min_fee_rate * a.vsize_vb as f64).ceil();
                a.chosen_fee_sats = (fee_usd * cfg.sats_per_usd).round().max(floor).max(0.0) as u64;
                let expected = a.value - a.cost * planned.wait_at(a.cost_quantile) - a.chosen_fee_sats as f64 / cfg.sats_per_usd;
                a.participating = expected >= 0.0;
            }
            (SimMode::Equilibrium, Some(planned))
        }
    };
    let outcome = run_queue(cfg, &mut agents, block_seed);
    Ok(finalize(cfg, mode, agents, outcome, planned, &mut extra))
}

/// Counts blocks violating greedy packing: an excluded pending transaction
/// with a strictly higher fee rate than some included one that would have
/// fit in the capacity left over.
pub fn greedy_violations(ds: &SimDataset) -> usize {
    let cap = ds.config.block_capacity_wu;
    let mut violations = 0;
    for b in &ds.blocks {
        let mut min_included: Option<FeeRate> = None;
        for &id in &b.included {
            let r = ds.agents[id as usize].fee_rate();
            min_included = Some(min_included.map_or(r, |m| m.min(r)));
        }
        let Some(floor) = min_included else { continue };
        let left = cap - b.weight_wu;
        let bad = ds.agents.iter().any(|a| {
            a.participating
                && a.entry_time < b.time
                && a.confirm_height.is_none_or(|h| h > b.height)
                && a.weight_wu <= left
                && a.fee_rate() > floor
        });
        violations += usize::from(bad);
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleCrossingReport {
    pub n_agents: usize,
    /// Pairs whose cost order strictly disagrees with their fee-rate order.
    pub violations: u64,
    pub spearman: f64,
}

/// Lemma check: higher-cost agents never choose strictly lower priority.
pub fn check_single_crossing(ds: &SimDataset) -> Result<SingleCrossingReport> {
    if ds.mode != SimMode::Equilibrium {
        return Err(Error::NotEquilibrium);
    }
    let part: Vec<&SimAgent> = ds.agents.iter().filter(|a| a.participating).collect();
    let costs: Vec<f64> = part.iter().map(|a| a.cost).collect();
    let rates: Vec<FeeRate> = part.iter().map(|a| a.fee_rate()).collect();
    single_crossing_pairs(&costs, &rates)
}

pub fn single_crossing_pairs(costs: &[f64], rates: &[FeeRate]) -> Result<SingleCrossingReport> {
    let n = costs.len();
    if n == 0 {
        return Ok(SingleCrossingReport { n_agents: 0, violations: 0, spearman: f64::NAN });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(rates[a].cmp(&rates[b])));
    let mut seq: Vec<FeeRate> = idx.iter().map(|&i| rates[i]).collect();
    let violations = count_inversions(&mut seq);
    let rc = tie_aware_percentile(costs)?;
    let rr = tie_aware_percentile(rates)?;
    Ok(SingleCrossingReport { n_agents: n, violations, spearman: pearson(&rc, &rr) })
}

/// Strict inversions (`i < j`, `v[i] > v[j]`), by merge sort.
fn count_inversions(v: &mut [FeeRate]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            count += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        f64::NAN
    } else {
        cov / (va * vb).sqrt()
    }
}
