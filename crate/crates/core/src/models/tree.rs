//! CART classification tree used as a query-free proxy for feature ranking.
//!
//! Splits are exhaustive over midpoints between consecutive distinct values.
//! Candidates are scanned feature by feature in index order and a later
//! candidate must be strictly better to win, so duplicated columns credit all
//! of their importance to the lower index.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

use super::check_training_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Entropy,
}

impl Criterion {
    /// Impurity of a node with `pos` positives among `n`.
    pub fn impurity(self, pos: f64, n: f64) -> f64 {
        if n <= 0.0 {
            return 0.0;
        }
        let p = pos / n;
        let q = 1.0 - p;
        match self {
            Criterion::Gini => 1.0 - p * p - q * q,
            Criterion::Entropy => {
                let h = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
                h(p) + h(q)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum TreeNode<S: Scalar> {
    Split {
        feature: usize,
        threshold: S,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Fraction of class-1 samples reaching the leaf.
        p1: S,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ProxyTree<S: Scalar> {
    pub criterion: Criterion,
    pub nodes: Vec<TreeNode<S>>,
    /// Normalised total impurity decrease per feature; all zero if the tree
    /// never splits.
    pub importances: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_split: 2,
        }
    }
}

const MIN_GAIN: f64 = 1e-12;

struct Builder<'a, S: Scalar> {
    x: ArrayView2<'a, S>,
    y: &'a [u8],
    criterion: Criterion,
    params: TreeParams,
    n_total: f64,
    nodes: Vec<TreeNode<S>>,
    raw_importance: Vec<f64>,
    /// Scratch: side assignment of each sample during a partition.
    goes_left: Vec<bool>,
}

struct BestSplit<S> {
    gain: f64,
    feature: usize,
    threshold: S,
}

impl<S: Scalar> Builder<'_, S> {
    /// `sorted[f]` holds this node's samples ordered by feature `f`.
    fn build(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let idx = &sorted[0];
        let n = idx.len() as f64;
        let pos = idx.iter().filter(|&&i| self.y[i as usize] == 1).count() as f64;
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            p1: S::of(pos / n.max(1.0)),
        });
        let parent_imp = self.criterion.impurity(pos, n);
        let depth_ok = self.params.max_depth.map_or(true, |d| depth < d);
        if parent_imp <= 0.0 || !depth_ok || idx.len() < self.params.min_samples_split.max(2) {
            return id;
        }
        let Some(best) = self.best_split(&sorted, pos, parent_imp) else {
            return id;
        };
        self.raw_importance[best.feature] += n / self.n_total * best.gain;

        for &i in &sorted[best.feature] {
            self.goes_left[i as usize] = self.x[[i as usize, best.feature]] <= best.threshold;
        }
        let (mut left, mut right) = (Vec::with_capacity(sorted.len()), Vec::with_capacity(sorted.len()));
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&i| self.goes_left[i as usize]);
            left.push(l);
            right.push(r);
        }
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        id
    }

    fn best_split(&self, sorted: &[Vec<u32>], pos: f64, parent_imp: f64) -> Option<BestSplit<S>> {
        let n = sorted[0].len() as f64;
        let mut best: Option<BestSplit<S>> = None;
        for (f, list) in sorted.iter().enumerate() {
            let mut left_n = 0.0;
            let mut left_pos = 0.0;
            for w in 0..list.len() - 1 {
                let i = list[w] as usize;
                left_n += 1.0;
                left_pos += f64::from(self.y[i]);
                let a = self.x[[i, f]];
                let b = self.x[[list[w + 1] as usize, f]];
                if a == b {
                    continue;
                }
                let right_n = n - left_n;
                let child = left_n / n * self.criterion.impurity(left_pos, left_n)
                    + right_n / n * self.criterion.impurity(pos - left_pos, right_n);
                let gain = parent_imp - child;
                if gain > MIN_GAIN && best.as_ref().map_or(true, |b| gain > b.gain) {
                    let mut threshold = (a + b) / S::of(2.0);
                    // Midpoints can round up to `b` in narrow types.
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

pub fn train_proxy_tree<'a, S: Scalar>(
    x: ArrayView2<'a, S>,
    y: &'a [u8],
    criterion: Criterion,
    params: TreeParams,
) -> Result<ProxyTree<S>> {
    check_training_input(x, y)?;
    let d = x.ncols();
    let sorted: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.nrows() as u32).collect();
            idx.sort_by(|&a, &b| x[[a as usize, f]].partial_cmp(&x[[b as usize, f]]).unwrap());
            idx
        })
        .collect();
    let mut b = Builder {
        x,
        y,
        criterion,
        params,
        n_total: x.nrows() as f64,
        nodes: Vec::new(),
        raw_importance: vec![0.0; d],
        goes_left: vec![false; x.nrows()],
    };
    if d == 0 {
        let pos = y.iter().filter(|&&v| v == 1).count() as f64;
        return Ok(ProxyTree {
            criterion,
            nodes: vec![TreeNode::Leaf {
                p1: S::of(pos / y.len() as f64),
            }],
            importances: Vec::new(),
        });
    }
    b.build(sorted, 0);
    let total: f64 = b.raw_importance.iter().sum();
    let importances = if total > 0.0 {
        b.raw_importance.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; d]
    };
    Ok(ProxyTree {
        criterion,
        nodes: b.nodes,
        importances,
    })
}

impl<S: Scalar> ProxyTree<S> {
    pub fn n_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Split { .. }))
            .count()
    }

    pub fn predict_p1(&self, row: ArrayView1<S>) -> S {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Leaf { p1 } => return *p1,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}
