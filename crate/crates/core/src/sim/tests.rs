use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::market::FeeRate;

fn backlog_config(fees: &[u64]) -> (SimConfig, FeePolicy) {
    let cfg = SimConfig {
        arrival_rate_lambda: 0.0,
        block_capacity_wu: 400,
        preseed: fees.iter().map(|_| AgentSpec { cost: 1.0, value: 100.0, weight_wu: 400 }).collect(),
        horizon: 1000.0,
        ..SimConfig::default()
    };
    let map: BTreeMap<u64, u64> = fees.iter().enumerate().map(|(i, &f)| (i as u64, f)).collect();
    (cfg, FeePolicy::Exogenous(map))
}

fn small_market(seed: u64) -> SimConfig {
    SimConfig { horizon: 240.0, arrival_rate_lambda: 120.0, block_capacity_wu: 560 * 800, seed, ..SimConfig::default() }
}

#[test]
fn capacity_one_backlog_clears_in_fee_order() {
    let (cfg, policy) = backlog_config(&[30, 20, 10]);
    let ds = simulate_queue(&cfg, &policy).unwrap();
    let waits: Vec<u64> = ds.agents.iter().map(|a| a.realized_wait_blocks.unwrap()).collect();
    assert_eq!(waits, vec![1, 2, 3]);
    let (cfg, policy) = backlog_config(&[10, 30, 20]);
    let ds = simulate_queue(&cfg, &policy).unwrap();
    let waits: Vec<u64> = ds.agents.iter().map(|a| a.realized_wait_blocks.unwrap()).collect();
    assert_eq!(waits, vec![3, 1, 2]);
}

#[test]
fn equal_fees_clear_by_entry_then_id() {
    let (cfg, policy) = backlog_config(&[10, 10, 10]);
    let ds = simulate_queue(&cfg, &policy).unwrap();
    let waits: Vec<u64> = ds.agents.iter().map(|a| a.realized_wait_blocks.unwrap()).collect();
    assert_eq!(waits, vec![1, 2, 3]);
}

#[test]
fn ample_capacity_means_single_block_waits() {
    let cfg = SimConfig { block_capacity_wu: 4_000_000_000, ..small_market(3) };
    let ds = simulate_queue(&cfg, &FeePolicy::RandomRates { min_rate: 1.0, max_rate: 50.0 }).unwrap();
    assert!(ds.agents.len() > 1000);
    assert!(ds.agents.iter().all(|a| a.realized_wait_blocks == Some(1)));
}

#[test]
fn block_gaps_match_poisson_rate() {
    // long horizon, no transactions: only block arrivals are simulated
    let mut means = Vec::new();
    for seed in 0..4 {
        let cfg = SimConfig { arrival_rate_lambda: 0.0, horizon: 1e5, drain: false, seed, ..SimConfig::default() };
        let ds = simulate_queue(&cfg, &FeePolicy::Exogenous(BTreeMap::new())).unwrap();
        let t: Vec<f64> = ds.blocks.iter().map(|b| b.time).collect();
        means.push((t[t.len() - 1] - t[0]) / (t.len() - 1) as f64 / 60.0);
    }
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    assert!((avg - 10.0).abs() < 0.2, "mean gap {avg} min");
}

#[test]
fn blocks_are_packed_greedily() {
    let cfg = SimConfig {
        weight_dist: Dist::Uniform { lo: 400.0, hi: 40_000.0 },
        block_capacity_wu: 400_000,
        ..small_market(5)
    };
    let ds = simulate_queue(&cfg, &FeePolicy::RandomRates { min_rate: 1.0, max_rate: 80.0 }).unwrap();
    assert!(ds.agents.iter().any(|a| a.realized_wait_blocks.unwrap() > 1));
    assert_eq!(greedy_violations(&ds), 0);
    for b in &ds.blocks {
        assert!(b.weight_wu <= cfg.block_capacity_wu);
    }
}

#[test]
fn surplus_identity_is_exact() {
    let ds = simulate_queue(&small_market(7), &FeePolicy::Equilibrium).unwrap();
    let sats = ds.config.sats_per_usd;
    for a in ds.agents.iter().filter(|a| a.participating) {
        let w = a.realized_wait_blocks.unwrap() as f64;
        assert_eq!(a.surplus.unwrap(), a.value - a.cost * w - a.chosen_fee_sats as f64 / sats);
    }
    assert!(ds.agents.iter().filter(|a| !a.participating).all(|a| a.surplus.is_none()));
}

#[test]
fn same_seed_same_dataset() {
    let a = simulate_queue(&small_market(11), &FeePolicy::Equilibrium).unwrap();
    let b = simulate_queue(&small_market(11), &FeePolicy::Equilibrium).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = simulate_queue(&small_market(12), &FeePolicy::Equilibrium).unwrap();
    assert_ne!(a.agents.len(), 0);
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn equilibrium_fees_are_monotone_in_cost() {
    let ds = simulate_queue(&small_market(13), &FeePolicy::Equilibrium).unwrap();
    let report = check_single_crossing(&ds).unwrap();
    assert!(report.n_agents > 1000);
    assert_eq!(report.violations, 0);
    assert!(report.spearman > 0.9, "spearman {}", report.spearman);
    let planned = ds.planned.as_ref().unwrap();
    assert!(planned.wait_blocks.windows(2).all(|w| w[0] >= w[1]));
    assert!(planned.fee_per_wu.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn single_crossing_requires_equilibrium() {
    let (cfg, policy) = backlog_config(&[30, 20, 10]);
    let ds = simulate_queue(&cfg, &policy).unwrap();
    let err = check_single_crossing(&ds).unwrap_err();
    assert!(matches!(err, Error::NotEquilibrium));
    assert_eq!(err.to_string(), "single-crossing check requires equilibrium mode");
}

#[test]
fn single_crossing_counts_swaps_and_tolerates_ties() {
    let r = |f: u64| FeeRate::new(f, 100);
    let ok = single_crossing_pairs(&[1.0, 2.0, 2.0, 3.0], &[r(10), r(20), r(30), r(40)]).unwrap();
    assert_eq!(ok.violations, 0);
    let tied = single_crossing_pairs(&[1.0, 2.0, 3.0], &[r(10), r(20), r(20)]).unwrap();
    assert_eq!(tied.violations, 0);
    let swapped = single_crossing_pairs(&[1.0, 2.0, 3.0, 4.0], &[r(10), r(30), r(20), r(40)]).unwrap();
    assert_eq!(swapped.violations, 1);
}

#[test]
fn missing_exogenous_fee_is_an_error() {
    let (cfg, _) = backlog_config(&[30, 20, 10]);
    let map = BTreeMap::from([(0, 30), (2, 10)]);
    assert!(matches!(simulate_queue(&cfg, &FeePolicy::Exogenous(map)), Err(Error::MissingFee(1))));
}

#[test]
fn zero_capacity_is_rejected() {
    let cfg = SimConfig { block_capacity_wu: 0, ..SimConfig::default() };
    assert!(matches!(simulate_queue(&cfg, &FeePolicy::Equilibrium), Err(Error::InvalidConfig(_))));
}

#[test]
fn structural_market_follows_its_technology() {
    let cfg = StructuralConfig { n_epochs: 4, per_epoch: 500, seed: 2, ..StructuralConfig::default() };
    let ds = generate_structural(&cfg).unwrap();
    assert_eq!(ds.txs.len(), 2000);
    assert_eq!(ds.truth.len(), 2000);
    for (tx, t) in ds.txs.iter().zip(&ds.truth) {
        assert_eq!(tx.tx_id, t.tx_id);
        assert!(tx.wait_blocks.unwrap() >= 1);
        assert!(t.log_gradient.is_finite());
        assert!((0.0..=1.0).contains(&t.percentile));
    }
    let again = generate_structural(&cfg).unwrap();
    assert_eq!(ds, again);
    let curved = StructuralConfig { curvature: 1.0, ..cfg };
    assert!(generate_structural(&curved).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_markets_pack_greedily(seed in 0u64..1000, cap in 2usize..40) {
        let cfg = SimConfig {
            horizon: 60.0,
            arrival_rate_lambda: 30.0,
            block_capacity_wu: 560 * cap as u64,
            weight_dist: Dist::Uniform { lo: 200.0, hi: 2000.0 },
            seed,
            ..SimConfig::default()
        };
        let ds = simulate_queue(&cfg, &FeePolicy::RandomRates { min_rate: 1.0, max_rate: 20.0 }).unwrap();
        prop_assert_eq!(greedy_violations(&ds), 0);
        prop_assert!(ds.agents.iter().all(|a| a.realized_wait_blocks.is_some_and(|w| w >= 1)));
    }
}
