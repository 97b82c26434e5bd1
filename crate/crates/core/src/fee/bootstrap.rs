//! Epoch-block bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::quantile_sorted;
use crate::delay::mix;
use crate::error::{Error, Result};

/// One drawn epoch: its rows come from `source` and are relabelled `id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochDraw {
    pub source: usize,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub seed: u64,
    pub names: Vec<String>,
    /// Successful replicates only; `replicates.len() + failed == b`.
    pub replicates: Vec<Vec<f64>>,
    pub b: usize,
    pub failed: usize,
    /// Standard deviation of each coefficient across replicates.
    pub sd_se: Vec<f64>,
    /// 95% percentile interval width over `2 * 1.96`.
    pub percentile_se: Vec<f64>,
    pub percentile_ci: Vec<(f64, f64)>,
}

impl BootstrapResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Draws as many epochs as `epochs` holds, with replacement. Draws are
/// sorted by source; the first copy of an epoch keeps its id, further
/// copies get fresh ids above every original.
pub fn resample_epochs<R: Rng>(epochs: &[usize], rng: &mut R) -> Vec<EpochDraw> {
    let mut drawn: Vec<usize> = (0..epochs.len()).map(|_| epochs[rng.random_range(0..epochs.len())]).collect();
    drawn.sort_unstable();
    let mut next = epochs.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(drawn.len());
    for (i, &src) in drawn.iter().enumerate() {
        let id = if i > 0 && drawn[i - 1] == src {
            next += 1;
            next - 1
        } else {
            src
        };
        out.push(EpochDraw { source: src, id });
    }
    out
}

/// Runs `b` replicates of `refit` on resampled epoch sets. Replicates that
/// fail (e.g. on rank conditions) are excluded and counted.
pub fn epoch_bootstrap<F>(epochs: &[usize], names: &[String], b: usize, seed: u64, refit: F) -> Result<BootstrapResult>
where
    F: Fn(&[EpochDraw]) -> Result<Vec<f64>> + Sync,
{
    if b == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least one replicate".into()));
    }
    let mut distinct = epochs.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::NotEnoughEpochs { needed: 2, found: distinct.len() });
    }
    let results: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xB007, r as u64]));
            let draws = resample_epochs(&distinct, &mut rng);
            refit(&draws).ok().filter(|c| c.len() == names.len() && c.iter().all(|v| v.is_finite()))
        })
        .collect();
    let replicates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let failed = b - replicates.len();
    let k = names.len();
    let mut sd_se = vec![f64::NAN; k];
    let mut percentile_se = vec![f64::NAN; k];
    let mut percentile_ci = vec![(f64::NAN, f64::NAN); k];
    if replicates.len() >= 2 {
        for j in 0..k {
            let mut v: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            sd_se[j] = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            v.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975));
            percentile_ci[j] = (lo, hi);
            percentile_se[j] = (hi - lo) / (2.0 * 1.959_963_984_540_054);
        }
    }
    Ok(BootstrapResult { seed, names: names.to_vec(), replicates, b, failed, sd_se, percentile_se, percentile_ci })
}
