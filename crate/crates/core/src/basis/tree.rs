use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BasisSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub n_leaves: usize,
}

impl Tree {
    fn leaf_of(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { leaf } => return leaf,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row(feature) <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }
}

/// Regression forest grown on bootstrap resamples; each tree contributes a
/// one-hot block of leaf indicators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestState {
    pub trees: Vec<Tree>,
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
    n_leaves: usize,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { leaf: usize::MAX });
        let split = if depth < self.max_depth && rows.len() >= 2 * self.min_leaf {
            self.best_split(rows, rng)
        } else {
            None
        };
        match split {
            Some((feature, threshold)) => {
                rows.sort_by(|&a, &b| {
                    (self.x[(a, feature)] > threshold).cmp(&(self.x[(b, feature)] > threshold))
                });
                let cut = rows.partition_point(|&r| self.x[(r, feature)] <= threshold);
                let (lo, hi) = rows.split_at_mut(cut);
                let left = self.grow(lo, depth + 1, rng);
                let right = self.grow(hi, depth + 1, rng);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[id] = Node::Leaf {
                    leaf: self.n_leaves,
                };
                self.n_leaves += 1;
            }
        }
        id
    }

    /// Largest reduction in squared error over a random feature subset.
    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let d = self.x.ncols();
        let features = rand::seq::index::sample(rng, d, self.mtry.min(d)).into_vec();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let total_sq: f64 = rows.iter().map(|&r| self.y[r] * self.y[r]).sum();
        let n = rows.len() as f64;
        let parent_sse = total_sq - total * total / n;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for &f in &features {
            sorted.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]));
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for k in 0..sorted.len() - 1 {
                let yv = self.y[sorted[k]];
                left_sum += yv;
                left_sq += yv * yv;
                let nl = k + 1;
                let nr = sorted.len() - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let here = self.x[(sorted[k], f)];
                let next = self.x[(sorted[k + 1], f)];
                if here == next {
                    continue;
                }
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / nl as f64)
                    + (right_sq - right_sum * right_sum / nr as f64);
                let gain = parent_sse - sse;
                if gain > 1e-12 * parent_sse.abs().max(1e-300)
                    && best.is_none_or(|(g, _, _)| gain > g)
                {
                    best = Some((gain, f, 0.5 * (here + next)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

impl ForestState {
    pub(super) fn fit(spec: &BasisSpec, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Self {
        let n = x.nrows();
        let d = x.ncols();
        let mut trees = Vec::with_capacity(spec.n_trees);
        for t in 0..spec.n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let mut rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut grower = Grower {
                x,
                y,
                max_depth: spec.max_depth,
                min_leaf: spec.min_leaf,
                mtry: d.div_ceil(3).max(1),
                nodes: Vec::new(),
                n_leaves: 0,
            };
            grower.grow(&mut rows, 0, &mut rng);
            trees.push(Tree {
                nodes: grower.nodes,
                n_leaves: grower.n_leaves,
            });
        }
        ForestState { trees }
    }

    pub(super) fn n_leaves(&self) -> usize {
        self.trees.iter().map(|t| t.n_leaves).sum()
    }

    pub(super) fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), self.n_leaves());
        for i in 0..x.nrows() {
            let mut offset = 0;
            for tree in &self.trees {
                let leaf = tree.leaf_of(|f| x[(i, f)]);
                out[(i, offset + leaf)] = 1.0;
                offset += tree.n_leaves;
            }
        }
        out
    }
}
