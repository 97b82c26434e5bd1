//! Priority pricing oracles: discrete externality payments, a
//! removal-and-resimulate check, and the continuous payment schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equal-size transactions in priority order (index 0 = highest priority).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticInstance {
    pub costs: Vec<f64>,
    /// Expected delay in blocks by priority position, weakly increasing.
    pub delays: Vec<f64>,
    pub slots_per_block: usize,
}

impl StaticInstance {
    /// Sorts `costs` into priority order (highest cost first) and fills
    /// blocks of `slots_per_block` transactions from the top.
    pub fn from_costs(mut costs: Vec<f64>, slots_per_block: usize) -> Result<Self> {
        if slots_per_block == 0 {
            return Err(Error::InvalidConfig("block must hold at least one transaction".into()));
        }
        costs.sort_by(|a, b| b.total_cmp(a));
        let delays = position_delays(costs.len(), slots_per_block);
        Ok(StaticInstance { costs, delays, slots_per_block })
    }

    pub fn n(&self) -> usize {
        self.costs.len()
    }

    fn check(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.n() {
            return Err(Error::OutOfRange { index: m, n: self.n() });
        }
        if self.delays.len() != self.n() {
            return Err(Error::InvalidConfig("delay vector length differs from cost vector".into()));
        }
        Ok(())
    }
}

/// Block index (1-based) of each queue position when blocks take `slots` transactions.
pub fn position_delays(n: usize, slots: usize) -> Vec<f64> {
    (0..n).map(|k| (k / slots + 1) as f64).collect()
}

/// Externality of the transaction at 1-based rank `m`:
/// `sum_{j > m} c_j (W_j - W_{j-1})`.
pub fn vcg_payment_discrete(inst: &StaticInstance, m: usize) -> Result<f64> {
    inst.check(m)?;
    let mut total = 0.0;
    for j in m..inst.n() {
        total += inst.costs[j] * (inst.delays[j] - inst.delays[j - 1]);
    }
    Ok(total)
}

/// Removes rank `m`, re-queues everyone else by priority on the same
/// position schedule, and sums the change in their delay costs.
pub fn vcg_payment_bruteforce(inst: &StaticInstance, m: usize) -> Result<f64> {
    inst.check(m)?;
    let mut with: Vec<(usize, f64)> = inst.costs.iter().copied().enumerate().collect();
    let position_with: Vec<usize> = (0..inst.n()).collect();
    with.remove(m - 1);
    // stable: equal costs keep their original relative order
    with.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut total = 0.0;
    let mut displaced: Vec<(usize, f64)> = with
        .iter()
        .enumerate()
        .map(|(pos_without, &(orig, c))| {
            let before = inst.delays[position_with[orig]];
            let after = inst.delays[pos_without];
            (orig, c * (before - after))
        })
        .collect();
    displaced.sort_by_key(|d| d.0);
    for (_, v) in displaced {
        total += v;
    }
    Ok(total)
}

/// Fee schedule `b(p) = kappa * weight * int_0^p c(q) D(q) dq` on the
/// grid `p_k = k / (grid_m - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcgSchedule {
    pub grid: Vec<f64>,
    pub fees: Vec<f64>,
    pub kappa: f64,
    pub weight: f64,
}

impl VcgSchedule {
    /// Linear interpolation between grid points.
    pub fn eval(&self, p: f64) -> f64 {
        let m = self.grid.len();
        let x = p.clamp(0.0, 1.0) * (m - 1) as f64;
        let k = (x.floor() as usize).min(m - 2);
        let t = x - k as f64;
        self.fees[k] * (1.0 - t) + self.fees[k + 1] * t
    }
}

pub fn compute_vcg_schedule(
    cost_quantile: impl Fn(f64) -> f64,
    slope: impl Fn(f64) -> f64,
    kappa: f64,
    weight: f64,
    grid_m: usize,
) -> Result<VcgSchedule> {
    if grid_m < 2 {
        return Err(Error::InvalidConfig("schedule grid needs at least 2 points".into()));
    }
    if !(kappa > 0.0) || !(weight > 0.0) {
        return Err(Error::InvalidConfig("kappa and weight must be positive".into()));
    }
    let h = 1.0 / (grid_m - 1) as f64;
    let grid: Vec<f64> = (0..grid_m).map(|k| k as f64 * h).collect();
    let mut integrand = Vec::with_capacity(grid_m);
    for &q in &grid {
        let c = cost_quantile(q);
        let d = slope(q);
        if !(c >= 0.0) {
            return Err(Error::NegativeIntegrand { what: "cost", value: c, at: q });
        }
        if !(d >= 0.0) {
            return Err(Error::NegativeIntegrand { what: "delay gradient", value: d, at: q });
        }
        integrand.push(c * d);
    }
    let scale = kappa * weight;
    let mut fees = vec![0.0; grid_m];
    let mut acc = 0.0;
    for k in 1..grid_m {
        acc += 0.5 * h * (integrand[k - 1] + integrand[k]);
        fees[k] = scale * acc;
    }
    Ok(VcgSchedule { grid, fees, kappa, weight })
}

/// `|c(p) D(p) - b'(p) / (kappa * weight)|` at interior grid points, with
/// `b'` by central differences.
pub fn foc_residuals(
    schedule: &VcgSchedule,
    cost_quantile: impl Fn(f64) -> f64,
    slope: impl Fn(f64) -> f64,
) -> Vec<(f64, f64)> {
    let g = &schedule.grid;
    let scale = schedule.kappa * schedule.weight;
    (1..g.len() - 1)
        .map(|k| {
            let db = (schedule.fees[k + 1] - schedule.fees[k - 1]) / (g[k + 1] - g[k - 1]);
            (g[k], (cost_quantile(g[k]) * slope(g[k]) - db / scale).abs())
        })
        .collect()
}
