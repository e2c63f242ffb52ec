//! CART regression tree: binary splits chosen to minimise the summed squared
//! error of the two children, leaves predicting the mean target.

use serde::{Deserialize, Serialize};

use super::Regressor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<Node>,
    pub n_features: usize,
}

impl TreeModel {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

impl Regressor for TreeModel {
    fn input_dim(&self) -> usize {
        self.n_features
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Best split of `idx` as (feature, threshold, children SSE).
pub(crate) fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    n_features: usize,
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let centred: Vec<f64> = order.iter().map(|&i| y[i] - mean).collect();
        let total: f64 = centred.iter().sum();
        let total_sq: f64 = centred.iter().map(|v| v * v).sum();
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        for k in 1..n {
            let v = centred[k - 1];
            sum_l += v;
            sq_l += v * v;
            if k < min_leaf || n - k < min_leaf {
                continue;
            }
            let (lo, hi) = (x[order[k - 1]][f], x[order[k]][f]);
            if lo >= hi {
                continue;
            }
            let (nl, nr) = (k as f64, (n - k) as f64);
            let sum_r = total - sum_l;
            let sq_r = total_sq - sq_l;
            let sse = (sq_l - sum_l * sum_l / nl) + (sq_r - sum_r * sum_r / nr);
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            if best.is_none_or(|(_, _, b)| sse < b) {
                best = Some((f, threshold, sse));
            }
        }
    }
    best
}

pub fn fit_tree(x: &[Vec<f64>], y: &[f64], params: TreeParams) -> TreeModel {
    let n_features = x.first().map_or(0, Vec::len);
    let min_leaf = params.min_samples_leaf.max(1);
    let mut nodes = vec![Node::Leaf {
        value: 0.0,
        samples: 0,
    }];
    // (node slot, row indices, depth)
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, (0..y.len()).collect(), 0)];
    while let Some((slot, idx, depth)) = stack.pop() {
        let mean = if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
        };
        let pure = idx.windows(2).all(|w| y[w[0]] == y[w[1]]);
        let depth_ok = params.max_depth.is_none_or(|m| depth < m);
        let split = if pure || !depth_ok {
            None
        } else {
            best_split(x, y, &idx, n_features, min_leaf)
        };
        match split {
            None => {
                nodes[slot] = Node::Leaf {
                    value: mean,
                    samples: idx.len(),
                }
            }
            Some((feature, threshold, _)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0, samples: 0 });
                nodes.push(Node::Leaf { value: 0.0, samples: 0 });
                nodes[slot] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    TreeModel { nodes, n_features }
}
