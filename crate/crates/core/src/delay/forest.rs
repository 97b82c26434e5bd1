//! Bagged regression trees with variance-reduction splits.
//!
//! Split search runs over per-feature presorted row lists that are stably
//! partitioned as the tree grows, so each level costs O(features * rows).
//! Candidate splits sit in the gaps between consecutive distinct values and
//! a split sends `x <= left value` left, so routing depends only on ranks and
//! predictions are invariant to strictly increasing feature transforms. Ties
//! between equally good splits go to the lowest feature index and then the
//! first gap.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features drawn as split candidates at each node.
    pub feature_subsample: f64,
    pub seed: u64,
    /// Epoch-level cross-fitting folds.
    pub n_folds: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 200, max_depth: 15, min_leaf: 20, feature_subsample: 1.0, seed: 0, n_folds: 5 }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidConfig("min_leaf must be at least 1".into()));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(Error::InvalidConfig("feature_subsample must lie in (0, 1]".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidConfig("need at least 2 cross-fitting folds".into()));
        }
        Ok(())
    }
}

/// Column-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    cols: Vec<Vec<f64>>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn from_columns(cols: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = cols.first().map_or(0, Vec::len);
        if cols.is_empty() || cols.iter().any(|c| c.len() != n_rows) {
            return Err(Error::InvalidConfig("feature columns must be nonempty and equally long".into()));
        }
        if cols.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("features must be finite".into()));
        }
        Ok(FeatureMatrix { cols, n_rows })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, f: usize) -> &[f64] {
        &self.cols[f]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let cols = self.cols.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect();
        FeatureMatrix { cols, n_rows: rows.len() }
    }
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            let node = &self.nodes[k];
            if node.feature == LEAF {
                return node.value;
            }
            k = if row[node.feature as usize] <= node.threshold { node.left } else { node.right } as usize;
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            let n = &nodes[k];
            if n.feature == LEAF {
                0
            } else {
                1 + go(nodes, n.left as usize).max(go(nodes, n.right as usize))
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    /// Normalized impurity-decrease importances, one per feature.
    pub importances: Vec<f64>,
}

impl Forest {
    /// Fits a forest. `stream` separates RNG streams between forests that
    /// share a config seed (for example one per cross-fitting fold).
    pub fn fit(x: &FeatureMatrix, y: &[f64], cfg: &ForestConfig, stream: u64) -> Result<Forest> {
        cfg.validate()?;
        if x.n_rows() == 0 || y.is_empty() {
            return Err(Error::EmptyInput("forest training set"));
        }
        if y.len() != x.n_rows() {
            return Err(Error::InvalidConfig("target length differs from feature rows".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("targets must be finite".into()));
        }
        if x.n_rows() < cfg.min_leaf {
            return Err(Error::NotEnoughRows { needed: cfg.min_leaf, found: x.n_rows() });
        }
        let sorted = Presorted::new(x);
        let trees: Vec<(Tree, Vec<f64>)> = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, stream, t as u64]));
                grow_tree(&sorted, y, cfg, &mut rng)
            })
            .collect();
        let n_features = x.n_features();
        let mut importances = vec![0.0; n_features];
        for (_, imp) in &trees {
            let total: f64 = imp.iter().sum();
            if total > 0.0 {
                for (acc, v) in importances.iter_mut().zip(imp) {
                    *acc += v / total;
                }
            }
        }
        let norm: f64 = importances.iter().sum();
        if norm > 0.0 {
            importances.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Forest { trees: trees.into_iter().map(|(t, _)| t).collect(), n_features, importances })
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.n_features);
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let mut row = vec![0.0; x.n_features()];
        (0..x.n_rows())
            .map(|i| {
                for (f, v) in row.iter_mut().enumerate() {
                    *v = x.column(f)[i];
                }
                self.predict_row(&row)
            })
            .collect()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

/// SplitMix64-style mixing of several words into one seed.
pub(crate) fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        let mut z = h ^ w.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Row order of every feature, sorted by value then row index.
struct Presorted<'a> {
    x: &'a FeatureMatrix,
    order: Vec<Vec<u32>>,
}

impl<'a> Presorted<'a> {
    fn new(x: &'a FeatureMatrix) -> Self {
        let order = (0..x.n_features())
            .map(|f| {
                let col = x.column(f);
                let mut idx: Vec<u32> = (0..x.n_rows() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { x, order }
    }
}

struct Split {
    feature: usize,
    /// Number of rows (in node order for `feature`) that go left.
    n_left: usize,
    threshold: f64,
    gain: f64,
}

fn grow_tree(sorted: &Presorted<'_>, y: &[f64], cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> (Tree, Vec<f64>) {
    let n = y.len();
    let n_features = sorted.x.n_features();
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let wy: Vec<f64> = counts.iter().zip(y).map(|(&c, &v)| c as f64 * v).collect();

    // per-feature lists of (value, row) restricted to in-bag rows
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(n_features);
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(n_features);
    for f in 0..n_features {
        let col = sorted.x.column(f);
        let r: Vec<u32> = sorted.order[f].iter().copied().filter(|&i| counts[i as usize] > 0).collect();
        vals.push(r.iter().map(|&i| col[i as usize]).collect());
        rows.push(r);
    }
    let m = rows[0].len();
    let mut go_left = vec![false; n];
    let mut scratch_rows: Vec<u32> = vec![0; m];
    let mut scratch_vals: Vec<f64> = vec![0.0; m];
    let n_try = ((cfg.feature_subsample * n_features as f64).ceil() as usize).clamp(1, n_features);

    let mut nodes: Vec<Node> = Vec::new();
    let mut importance = vec![0.0; n_features];
    // (node index, lo, hi, depth)
    let mut stack = vec![(0usize, 0usize, m, 0usize)];
    nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 });
    let min_leaf = cfg.min_leaf as f64;

    while let Some((k, lo, hi, depth)) = stack.pop() {
        let node_rows = &rows[0][lo..hi];
        let (mut sw, mut swy) = (0.0, 0.0);
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for &r in node_rows {
            let r = r as usize;
            sw += w[r];
            swy += wy[r];
            y_min = y_min.min(y[r]);
            y_max = y_max.max(y[r]);
        }
        nodes[k].value = swy / sw;
        if depth >= cfg.max_depth || sw < 2.0 * min_leaf || y_min == y_max {
            continue;
        }

        let mut features: Vec<usize> = if n_try == n_features {
            (0..n_features).collect()
        } else {
            index::sample(rng, n_features, n_try).into_vec()
        };
        features.sort_unstable();

        let parent = swy * swy / sw;
        let mut best: Option<Split> = None;
        for &f in &features {
            let fr = &rows[f][lo..hi];
            let fv = &vals[f][lo..hi];
            let (mut lw, mut lwy) = (0.0, 0.0);
            for i in 0..fr.len() - 1 {
                let r = fr[i] as usize;
                lw += w[r];
                lwy += wy[r];
                if fv[i] == fv[i + 1] || lw < min_leaf {
                    continue;
                }
                let rw = sw - lw;
                if rw < min_leaf {
                    break;
                }
                let rwy = swy - lwy;
                let gain = lwy * lwy / lw + rwy * rwy / rw - parent;
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Split { feature: f, n_left: i + 1, threshold: fv[i], gain });
                }
            }
        }
        let Some(split) = best else { continue };
        importance[split.feature] += split.gain;

        for (i, &r) in rows[split.feature][lo..hi].iter().enumerate() {
            go_left[r as usize] = i < split.n_left;
        }
        for f in 0..n_features {
            stable_partition(
                &mut rows[f][lo..hi],
                &mut vals[f][lo..hi],
                &go_left,
                &mut scratch_rows,
                &mut scratch_vals,
            );
        }
        let mid = lo + split.n_left;
        let left = nodes.len();
        nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 });
        nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: 0.0 });
        nodes[k].feature = split.feature as u32;
        nodes[k].threshold = split.threshold;
        nodes[k].left = left as u32;
        nodes[k].right = (left + 1) as u32;
        stack.push((left + 1, mid, hi, depth + 1));
        stack.push((left, lo, mid, depth + 1));
    }
    (Tree { nodes }, importance)
}

fn stable_partition(rows: &mut [u32], vals: &mut [f64], go_left: &[bool], sr: &mut [u32], sv: &mut [f64]) {
    let mut l = 0;
    let mut r = 0;
    let len = rows.len();
    for i in 0..len {
        let row = rows[i];
        if go_left[row as usize] {
            rows[l] = row;
            vals[l] = vals[i];
            l += 1;
        } else {
            sr[r] = row;
            sv[r] = vals[i];
            r += 1;
        }
    }
    rows[l..].copy_from_slice(&sr[..r]);
    vals[l..].copy_from_slice(&sv[..r]);
}
