use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// A one-dimensional positive distribution, sampled and inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Constant { value: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl Dist {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Dist::Constant { value } => value.is_finite() && value >= 0.0,
            Dist::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
            Dist::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid {what} distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            Dist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    Uniform::new(lo, hi).expect("validated").sample(rng)
                }
            }
            Dist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Dist::Constant { value } => {
                if x < value {
                    0.0
                } else if x > value {
                    1.0
                } else {
                    0.5
                }
            }
            Dist::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else if sigma == 0.0 {
                    Dist::Constant { value: mu.exp() }.cdf(x)
                } else {
                    Normal::new(mu, sigma).expect("validated").cdf(x.ln())
                }
            }
            Dist::Uniform { lo, hi } => {
                if hi == lo {
                    Dist::Constant { value: lo }.cdf(x)
                } else {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            }
            Dist::Exponential { mean } => 1.0 - (-x.max(0.0) / mean).exp(),
        }
    }

    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        match *self {
            Dist::Constant { value } => value,
            Dist::LogNormal { mu, sigma } => {
                if sigma == 0.0 {
                    mu.exp()
                } else {
                    Normal::new(mu, sigma).expect("validated").inverse_cdf(q).exp()
                }
            }
            Dist::Uniform { lo, hi } => lo + q * (hi - lo),
            Dist::Exponential { mean } => -mean * (1.0 - q).ln(),
        }
    }
}

/// A transaction present in the mempool before the first block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub cost: f64,
    pub value: f64,
    pub weight_wu: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Blocks per minute.
    pub block_rate_mu: f64,
    pub block_capacity_wu: u64,
    /// Arrivals per minute.
    pub arrival_rate_lambda: f64,
    /// Per-block delay cost, USD.
    pub cost_dist: Dist,
    /// Willingness to pay, USD.
    pub value_dist: Dist,
    /// Transaction weight, weight units (rounded, clamped to `[4, capacity]`).
    pub weight_dist: Dist,
    /// Normalization of the priority price.
    pub kappa: f64,
    /// Minutes of arrivals.
    pub horizon: f64,
    pub seed: u64,
    pub sats_per_usd: f64,
    /// Respend horizon is `respend_scale / cost` blocks.
    pub respend_scale: f64,
    pub snapshot_secs: f64,
    /// Relay floor in sat/vB applied to equilibrium fees.
    pub min_fee_rate: f64,
    /// Keep mining after the horizon until the mempool is empty.
    pub drain: bool,
    /// Grid size for the planned delay schedule and the fee schedule.
    pub schedule_grid: usize,
    pub preseed: Vec<AgentSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            block_rate_mu: 0.1,
            block_capacity_wu: 4_000_000,
            arrival_rate_lambda: 600.0,
            cost_dist: Dist::LogNormal { mu: 0.05f64.ln(), sigma: 1.0 },
            value_dist: Dist::LogNormal { mu: 50f64.ln(), sigma: 0.5 },
            weight_dist: Dist::Constant { value: 560.0 },
            kappa: 0.01,
            horizon: 600.0,
            seed: 0,
            sats_per_usd: 1500.0,
            respend_scale: 0.5,
            snapshot_secs: 25.0,
            min_fee_rate: 1.0,
            drain: true,
            schedule_grid: 201,
            preseed: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.block_capacity_wu == 0 {
            return bad("block capacity must be positive");
        }
        if !(self.block_rate_mu > 0.0) || !self.block_rate_mu.is_finite() {
            return bad("block rate must be positive");
        }
        // zero arrivals are allowed so that pre-seeded mempools can be studied alone
        if !(self.arrival_rate_lambda >= 0.0) || !self.arrival_rate_lambda.is_finite() {
            return bad("arrival rate must be non-negative");
        }
        if !(self.horizon > 0.0) || !(self.kappa > 0.0) || !(self.sats_per_usd > 0.0) {
            return bad("horizon, kappa and sats_per_usd must be positive");
        }
        if !(self.snapshot_secs > 0.0) || !(self.respend_scale > 0.0) || !(self.min_fee_rate >= 0.0) {
            return bad("snapshot cadence and respend scale must be positive");
        }
        if self.schedule_grid < 2 {
            return bad("schedule grid needs at least 2 points");
        }
        self.cost_dist.validate("cost")?;
        self.value_dist.validate("value")?;
        self.weight_dist.validate("weight")?;
        for a in &self.preseed {
            if a.weight_wu == 0 || a.weight_wu > self.block_capacity_wu || !(a.cost >= 0.0) {
                return bad("pre-seeded transaction does not fit a block");
            }
        }
        Ok(())
    }
}

/// How agents choose fees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeePolicy {
    /// Fixed fee in sats per agent id (pre-seeded agents first, then arrivals).
    Exogenous(BTreeMap<u64, u64>),
    /// Fee rates drawn uniformly from `[min_rate, max_rate]` sat/vB,
    /// independent of costs (used to map out the delay schedule).
    RandomRates { min_rate: f64, max_rate: f64 },
    /// VCG schedule evaluated at each agent's cost quantile.
    #[default]
    Equilibrium,
}
