//! Regression trees (greedy variance reduction), random forests and gradient boosting.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_leaf: 1,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes stored in an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

struct Best {
    sse: f64,
    feature: usize,
    threshold: f64,
}

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum()
}

/// Best split of `idx` on one feature: candidate thresholds are midpoints between
/// consecutive distinct values; the first minimum (lowest threshold) wins.
fn best_split_on(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    f: usize,
    min_leaf: usize,
) -> Option<(f64, f64)> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
    let n = order.len();
    // centre the targets so the running sums lose less precision
    let mean = order.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let total: f64 = order.iter().map(|&i| y[i] - mean).sum();
    let total_sq: f64 = order.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum();
    let (mut s, mut sq) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for k in 0..n - 1 {
        let yi = y[order[k]] - mean;
        s += yi;
        sq += yi * yi;
        let (lo, hi) = (x[order[k]][f], x[order[k + 1]][f]);
        let nl = k + 1;
        let nr = n - nl;
        if lo == hi || nl < min_leaf || nr < min_leaf {
            continue;
        }
        let left = sq - s * s / nl as f64;
        let right = (total_sq - sq) - (total - s) * (total - s) / nr as f64;
        let cost = left.max(0.0) + right.max(0.0);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, lo + (hi - lo) / 2.0));
        }
    }
    best
}

fn grow(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    depth: usize,
    cfg: &TreeConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    nodes.push(Node::Leaf {
        value: mean,
        samples: idx.len(),
    });
    let pure = idx.iter().all(|&i| y[i] == y[idx[0]]);
    if pure || idx.len() < 2 * cfg.min_leaf.max(1) || cfg.max_depth.is_some_and(|d| depth >= d) {
        return id;
    }
    let m = x[idx[0]].len();
    let features: Vec<usize> = match (cfg.max_features, rng.as_mut()) {
        (Some(k), Some(r)) if k < m => {
            let mut f = sample(*r, m, k).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..m).collect(),
    };
    let parent = sse(y, idx);
    let mut best: Option<Best> = None;
    for &f in &features {
        if let Some((cost, threshold)) = best_split_on(x, y, idx, f, cfg.min_leaf.max(1)) {
            if best.as_ref().is_none_or(|b| cost < b.sse) {
                best = Some(Best {
                    sse: cost,
                    feature: f,
                    threshold,
                });
            }
        }
    }
    let Some(b) = best.filter(|b| b.sse < parent) else {
        return id;
    };
    let (l, r): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| x[i][b.feature] <= b.threshold);
    let left = grow(x, y, &l, depth + 1, cfg, rng, nodes);
    let right = grow(x, y, &r, depth + 1, cfg, rng, nodes);
    nodes[id] = Node::Split {
        feature: b.feature,
        threshold: b.threshold,
        left,
        right,
    };
    id
}

fn fit_indices(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    cfg: &TreeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Tree {
    let mut nodes = Vec::new();
    let mut rng = rng;
    grow(x, y, idx, 0, cfg, &mut rng, &mut nodes);
    Tree { nodes }
}

pub fn tree_fit(x: &[Vec<f64>], y: &[f64], cfg: &TreeConfig) -> Tree {
    assert!(
        !x.is_empty() && x.len() == y.len(),
        "tree_fit needs matching non-empty x and y"
    );
    let idx: Vec<usize> = (0..x.len()).collect();
    fit_indices(x, y, &idx, cfg, None)
}

impl Tree {
    /// Routes `x ≤ threshold` left.
    pub fn predict(&self, q: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if q[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match &t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// Indented topology, one node per line.
    pub fn summary(&self, columns: &[String]) -> String {
        fn walk(t: &Tree, at: usize, depth: usize, columns: &[String], out: &mut String) {
            let pad = "  ".repeat(depth);
            match &t.nodes[at] {
                Node::Leaf { value, samples } => {
                    let _ = writeln!(out, "{pad}leaf value={value} samples={samples}");
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let name = columns
                        .get(*feature)
                        .cloned()
                        .unwrap_or_else(|| format!("x{feature}"));
                    let _ = writeln!(out, "{pad}if {name} <= {threshold}");
                    walk(t, *left, depth + 1, columns, out);
                    let _ = writeln!(out, "{pad}else");
                    walk(t, *right, depth + 1, columns, out);
                }
            }
        }
        let mut s = String::new();
        walk(self, 0, 0, columns, &mut s);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub tree: TreeConfig,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            bootstrap: true,
            tree: TreeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

/// Each tree draws its bootstrap sample and feature subsets from ChaCha stream `(seed, tree index)`.
pub fn rf_fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig) -> Forest {
    assert!(cfg.n_trees >= 1, "a forest needs at least one tree");
    assert!(
        !x.is_empty() && x.len() == y.len(),
        "rf_fit needs matching non-empty x and y"
    );
    let n = x.len();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let idx: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_indices(x, y, &idx, &cfg.tree, Some(&mut rng))
        })
        .collect();
    Forest { trees }
}

impl Forest {
    /// Unweighted mean of the tree predictions.
    pub fn predict(&self, q: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(q)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn summary(&self) -> String {
        let depths: Vec<usize> = self.trees.iter().map(Tree::depth).collect();
        let leaves: usize = self.trees.iter().map(Tree::leaves).sum();
        format!(
            "random_forest\ntrees = {}\nmax_depth = {}\nmean_leaves = {}\n",
            self.trees.len(),
            depths.iter().max().copied().unwrap_or(0),
            leaves as f64 / self.trees.len() as f64
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub tree: TreeConfig,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            n_stages: 100,
            learning_rate: 0.1,
            tree: TreeConfig {
                max_depth: Some(3),
                ..TreeConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub init: f64,
    pub learning_rate: f64,
    pub stages: Vec<Tree>,
}

/// Starts from `mean(y)` and fits each stage tree to the current residuals.
pub fn gbr_fit(x: &[Vec<f64>], y: &[f64], cfg: &BoostConfig) -> Boosted {
    assert!(
        !x.is_empty() && x.len() == y.len(),
        "gbr_fit needs matching non-empty x and y"
    );
    let init = y.iter().sum::<f64>() / y.len() as f64;
    let mut current = vec![init; y.len()];
    let mut stages = Vec::with_capacity(cfg.n_stages);
    for _ in 0..cfg.n_stages {
        let residuals: Vec<f64> = y.iter().zip(&current).map(|(a, p)| a - p).collect();
        let tree = tree_fit(x, &residuals, &cfg.tree);
        for (c, xi) in current.iter_mut().zip(x) {
            *c += cfg.learning_rate * tree.predict(xi);
        }
        stages.push(tree);
    }
    Boosted {
        init,
        learning_rate: cfg.learning_rate,
        stages,
    }
}

impl Boosted {
    pub fn predict(&self, q: &[f64]) -> f64 {
        self.init + self.learning_rate * self.stages.iter().map(|t| t.predict(q)).sum::<f64>()
    }

    /// Prediction after the first `k` stages.
    pub fn predict_stages(&self, q: &[f64], k: usize) -> f64 {
        self.init
            + self.learning_rate
                * self
                    .stages
                    .iter()
                    .take(k)
                    .map(|t| t.predict(q))
                    .sum::<f64>()
    }

    pub fn summary(&self) -> String {
        format!(
            "gradient_boosting\ninit = {}\nlearning_rate = {}\nstages = {}\n",
            self.init,
            self.learning_rate,
            self.stages.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let t = tree_fit(
            &col(&[1.0, 2.0, 3.0]),
            &[4.0, 4.0, 4.0],
            &TreeConfig::default(),
        );
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict(&[10.0]), 4.0);
    }

    #[test]
    fn step_function_splits_at_midpoint() {
        let t = tree_fit(
            &col(&[1.0, 2.0, 3.0, 4.0]),
            &[0.0, 0.0, 5.0, 5.0],
            &TreeConfig::default(),
        );
        match &t.nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => assert_eq!((*feature, *threshold), (0, 2.5)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.predict(&[2.5]), 0.0);
        assert_eq!(t.predict(&[2.6]), 5.0);
    }

    #[test]
    fn tie_prefers_lowest_feature() {
        let x = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let t = tree_fit(&x, &[0.0, 1.0], &TreeConfig::default());
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn min_leaf_and_depth_limits() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let y = [0.0, 1.0, 2.0, 3.0];
        let stump = tree_fit(
            &x,
            &y,
            &TreeConfig {
                max_depth: Some(1),
                ..Default::default()
            },
        );
        assert_eq!(stump.depth(), 1);
        let wide = tree_fit(
            &x,
            &y,
            &TreeConfig {
                min_leaf: 2,
                ..Default::default()
            },
        );
        assert_eq!(wide.leaves(), 2);
    }
}
