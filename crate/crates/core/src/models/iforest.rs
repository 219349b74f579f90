//! Isolation Forest anomaly scoring.
//!
//! Each tree is grown on a subsample of `psi` rows with its own random
//! stream, `seed` plus the tree index, so the forest is identical whatever
//! the thread count. Score is `2^(-E[h(x)] / c(psi))`; higher means more
//! anomalous.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average unsuccessful-search path length in a binary search tree of `n`
/// nodes.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum INode<S: Scalar> {
    Split {
        feature: usize,
        threshold: S,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ITree<S: Scalar> {
    pub nodes: Vec<INode<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IsolationForest<S: Scalar> {
    pub trees: Vec<ITree<S>>,
    /// Effective subsample size (capped at the training set size).
    pub subsample: usize,
    pub n_features: usize,
    pub seed: u64,
}

fn grow<S: Scalar, R: Rng>(
    x: ArrayView2<S>,
    rows: Vec<usize>,
    depth: usize,
    limit: usize,
    nodes: &mut Vec<INode<S>>,
    rng: &mut R,
) -> usize {
    let id = nodes.len();
    nodes.push(INode::Leaf { size: rows.len() });
    if depth >= limit || rows.len() <= 1 {
        return id;
    }
    let spans: Vec<(usize, S, S)> = (0..x.ncols())
        .filter_map(|f| {
            let (lo, hi) = rows.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), &i| {
                (lo.min(x[[i, f]]), hi.max(x[[i, f]]))
            });
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if spans.is_empty() {
        return id;
    }
    let (feature, lo, hi) = spans[rng.gen_range(0..spans.len())];
    let u = S::of(rng.gen_range(0.0..1.0));
    let mut threshold = lo + u * (hi - lo);
    if threshold >= hi {
        threshold = lo;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[[i, feature]] <= threshold);
    let left = grow(x, l, depth + 1, limit, nodes, rng);
    let right = grow(x, r, depth + 1, limit, nodes, rng);
    nodes[id] = INode::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

pub fn train_isolation_forest<S: Scalar>(
    x: ArrayView2<S>,
    n_trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<IsolationForest<S>> {
    if x.nrows() == 0 {
        return Err(Error::Model("empty isolation forest training set".into()));
    }
    if n_trees == 0 || subsample == 0 {
        return Err(Error::Config("tree count and subsample must be positive".into()));
    }
    let psi = subsample.min(x.nrows());
    let limit = (psi as f64).log2().ceil().max(1.0) as usize;
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let rows = sample(&mut rng, x.nrows(), psi).into_vec();
            let mut nodes = Vec::new();
            grow(x, rows, 0, limit, &mut nodes, &mut rng);
            ITree { nodes }
        })
        .collect();
    Ok(IsolationForest {
        trees,
        subsample: psi,
        n_features: x.ncols(),
        seed,
    })
}

impl<S: Scalar> ITree<S> {
    pub fn path_length(&self, row: ArrayView1<S>) -> f64 {
        let (mut k, mut depth) = (0, 0usize);
        loop {
            match &self.nodes[k] {
                INode::Leaf { size } => return depth as f64 + c_factor(*size),
                INode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if row[*feature] <= *threshold { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }
}

impl<S: Scalar> IsolationForest<S> {
    pub fn score_row(&self, row: ArrayView1<S>) -> f64 {
        let mean = self.trees.iter().map(|t| t.path_length(row)).sum::<f64>() / self.trees.len() as f64;
        let c = c_factor(self.subsample);
        if c == 0.0 {
            return 0.5;
        }
        2f64.powf(-mean / c)
    }

    pub fn score(&self, x: ArrayView2<S>) -> Vec<f64> {
        assert_eq!(x.ncols(), self.n_features, "isolation forest width mismatch");
        (0..x.nrows()).into_par_iter().map(|i| self.score_row(x.row(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn far_outlier_scores_highest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Array2::from_shape_fn((500, 3), |_| StandardNormal.sample(&mut rng));
        x.row_mut(250).fill(100.0);
        let f = train_isolation_forest(x.view(), 100, 256, 7).unwrap();
        let s = f.score(x.view());
        let top = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(top, 250);
    }

    #[test]
    fn repeated_point_scores_equal() {
        let x = Array2::from_elem((300, 2), 4.0f64);
        let f = train_isolation_forest(x.view(), 50, 256, 2).unwrap();
        let s = f.score(x.view());
        assert!(s.iter().all(|&v| v == s[0] && v.is_finite()));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((200, 4), |_| rng.gen_range(0.0f32..1.0));
        let a = train_isolation_forest(x.view(), 30, 64, 5).unwrap();
        let b = train_isolation_forest(x.view(), 30, 64, 5).unwrap();
        assert_eq!(a.score(x.view()), b.score(x.view()));
    }

    #[test]
    fn c_factor_small_values() {
        assert_eq!(c_factor(1), 0.0);
        assert_eq!(c_factor(2), 1.0);
        assert!((c_factor(256) - 10.2448).abs() < 1e-3);
    }
}
