use serde::{Deserialize, Serialize};

use super::{pava_decreasing, Forest};
use crate::error::{Error, Result};

/// Default priority grid size.
pub const DEFAULT_GRID: usize = 99;

/// A weakly decreasing delay schedule on a priority grid, read between grid
/// points by linear interpolation and held flat beyond the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneSchedule {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl MonotoneSchedule {
    /// Projects raw grid values onto the weakly decreasing cone.
    pub fn from_raw(grid: Vec<f64>, raw: &[f64]) -> Self {
        assert_eq!(grid.len(), raw.len());
        MonotoneSchedule { grid, values: pava_decreasing(raw) }
    }

    pub fn eval(&self, p: f64) -> f64 {
        let g = &self.grid;
        let last = g.len() - 1;
        if p <= g[0] {
            return self.values[0];
        }
        if p >= g[last] {
            return self.values[last];
        }
        let k = g.partition_point(|&x| x <= p) - 1;
        let t = (p - g[k]) / (g[k + 1] - g[k]);
        self.values[k] + t * (self.values[k + 1] - self.values[k])
    }

    /// Largest drop per unit of priority between adjacent grid points.
    pub fn max_grid_slope(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(g, v)| (v[0] - v[1]) / (g[1] - g[0]))
            .fold(0.0, f64::max)
    }

    pub fn is_weakly_decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] >= w[1])
    }
}

/// Interior grid `{1/(M+1), ..., M/(M+1)}`.
pub fn priority_grid(m: usize) -> Vec<f64> {
    (1..=m).map(|k| k as f64 / (m + 1) as f64).collect()
}

/// Sweeps `forest` over the priority grid with the other features held at
/// `fixed` (feature 0 is priority), then enforces monotonicity.
pub fn monotone_schedule(forest: &Forest, fixed: &[f64], grid_m: usize) -> Result<MonotoneSchedule> {
    if grid_m < 2 {
        return Err(Error::InvalidConfig("priority grid needs at least 2 points".into()));
    }
    if fixed.len() + 1 != forest.n_features() {
        return Err(Error::InvalidConfig("fixed feature vector does not match the forest".into()));
    }
    if fixed.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("fixed features must be finite".into()));
    }
    let grid = priority_grid(grid_m);
    let mut row = Vec::with_capacity(fixed.len() + 1);
    row.push(0.0);
    row.extend_from_slice(fixed);
    let raw: Vec<f64> = grid
        .iter()
        .map(|&p| {
            row[0] = p;
            forest.predict_row(&row)
        })
        .collect();
    Ok(MonotoneSchedule::from_raw(grid, &raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlopeConfig {
    /// Half-width of the symmetric difference.
    pub delta: f64,
    /// Evaluation points are clipped to `[trim, 1 - trim]`.
    pub trim: f64,
}

impl Default for SlopeConfig {
    fn default() -> Self {
        SlopeConfig { delta: 0.05, trim: 0.01 }
    }
}

/// Positive gradient `D = -dW/dp` at `p` by a clipped symmetric difference.
pub fn local_slope(schedule: &MonotoneSchedule, p: f64, cfg: &SlopeConfig) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("percentile {p} outside (0, 1)")));
    }
    let lo = cfg.trim;
    let hi = 1.0 - cfg.trim;
    let minus = (p - cfg.delta).clamp(lo, hi);
    let plus = (p + cfg.delta).clamp(lo, hi);
    if !(plus > minus) {
        return Err(Error::DegenerateSlopeWindow(p));
    }
    // interpolation rounding can leave a -1ulp difference on flat stretches
    Ok(((schedule.eval(minus) - schedule.eval(plus)) / (plus - minus)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{FeatureMatrix, ForestConfig};

    fn linear(intercept: f64, slope: f64) -> MonotoneSchedule {
        let grid = priority_grid(DEFAULT_GRID);
        let raw: Vec<f64> = grid.iter().map(|p| intercept - slope * p).collect();
        MonotoneSchedule::from_raw(grid, &raw)
    }

    #[test]
    fn linear_schedule_has_unit_slope() {
        let s = linear(2.0, 1.0);
        for p in [0.1, 0.3, 0.5, 0.77, 0.9] {
            assert!((local_slope(&s, p, &SlopeConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_schedule_has_zero_slope() {
        let s = linear(2.0, 0.0);
        assert_eq!(local_slope(&s, 0.4, &SlopeConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn clipping_near_boundary() {
        let grid = priority_grid(DEFAULT_GRID);
        let raw: Vec<f64> = grid.iter().map(|p| (1.0 - p) * (1.0 - p)).collect();
        let s = MonotoneSchedule::from_raw(grid, &raw);
        let got = local_slope(&s, 0.005, &SlopeConfig::default()).unwrap();
        let want = (s.eval(0.01) - s.eval(0.055)) / 0.045;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn collapsed_window_is_error() {
        let s = linear(1.0, 1.0);
        let cfg = SlopeConfig { delta: 0.0, trim: 0.01 };
        assert!(matches!(local_slope(&s, 0.5, &cfg), Err(Error::DegenerateSlopeWindow(_))));
    }

    #[test]
    fn forest_ignoring_priority_gives_flat_schedule() {
        let n = 400;
        let p: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let s: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let y: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let x = FeatureMatrix::from_columns(vec![p, s]).unwrap();
        let cfg = ForestConfig { n_trees: 10, max_depth: 6, min_leaf: 5, ..Default::default() };
        let forest = Forest::fit(&x, &y, &cfg, 0).unwrap();
        let sched = monotone_schedule(&forest, &[3.0], DEFAULT_GRID).unwrap();
        assert!(sched.values.iter().all(|&v| v == sched.values[0]));
        assert_eq!(sched.max_grid_slope(), 0.0);
    }

    #[test]
    fn interpolation_between_grid_points() {
        let s = MonotoneSchedule { grid: vec![0.25, 0.5, 0.75], values: vec![3.0, 2.0, 0.0] };
        assert_eq!(s.eval(0.1), 3.0);
        assert_eq!(s.eval(0.375), 2.5);
        assert_eq!(s.eval(0.625), 1.0);
        assert_eq!(s.eval(0.9), 0.0);
    }
}
