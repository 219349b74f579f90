//! Histogram gradient-boosted regression trees under logistic loss.
//!
//! Features are quantised into at most `max_bins` bins per column before
//! training. Leaves take Newton steps `-G / (H + lambda)`. After each stage
//! the shrinkage is halved until the weighted training loss does not rise;
//! a stage that cannot be made non-increasing is dropped.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

use super::{check_schema, check_training_input, class_weights, degenerate_proba, single_class, BinaryClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
    pub max_bins: usize,
    /// Row fraction sampled per tree.
    pub subsample: f64,
    pub class_weighted: bool,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-3,
            max_bins: 255,
            subsample: 1.0,
            class_weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum RegNode<S: Scalar> {
    Split {
        feature: usize,
        threshold: S,
        left: usize,
        right: usize,
    },
    Leaf(S),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RegTree<S: Scalar> {
    pub nodes: Vec<RegNode<S>>,
}

impl<S: Scalar> RegTree<S> {
    pub fn predict(&self, row: ArrayView1<S>) -> S {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                RegNode::Leaf(v) => return *v,
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    fn predict_binned(&self, split_bin: &[Option<usize>], bins: &Binned, i: usize) -> S {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                RegNode::Leaf(v) => return *v,
                RegNode::Split { feature, left, right, .. } => {
                    k = if split_bin[k].unwrap_or(0) >= bins.col(*feature)[i] as usize {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Gbdt<S: Scalar> {
    pub params: GbdtParams,
    pub seed: u64,
    pub n_features: usize,
    pub base_score: S,
    pub trees: Vec<RegTree<S>>,
    /// Effective shrinkage each tree was added with.
    pub shrinkage: Vec<S>,
    /// Weighted training loss before any tree, then after each kept tree.
    pub train_loss: Vec<f64>,
    /// Set when trained on a single class: predictions are the constant
    /// clipped probability of that class.
    pub degenerate: Option<u8>,
}

/// Column-major bin codes plus per-feature thresholds: bin `b` holds values
/// in `(t[b-1], t[b]]`.
struct Binned {
    n: usize,
    codes: Vec<u8>,
}

impl Binned {
    fn col(&self, f: usize) -> &[u8] {
        &self.codes[f * self.n..(f + 1) * self.n]
    }
}

fn thresholds_for<S: Scalar>(column: ArrayView1<S>, max_bins: usize) -> Vec<S> {
    let mut v: Vec<S> = column.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut uniq = v.clone();
    uniq.dedup();
    let max_thresholds = max_bins.clamp(2, 256) - 1;
    let mid = |a: S, b: S| {
        let m = (a + b) / S::of(2.0);
        if m >= b {
            a
        } else {
            m
        }
    };
    if uniq.len() <= max_thresholds + 1 {
        return uniq.windows(2).map(|w| mid(w[0], w[1])).collect();
    }
    // Quantile edges: the largest value of each equal-count slice.
    let n = v.len();
    let mut t: Vec<S> = (1..=max_thresholds)
        .map(|q| v[(q * n / (max_thresholds + 1)).min(n - 1)])
        .collect();
    t.dedup();
    if t.last() == v.last() {
        t.pop();
    }
    t
}

fn bin_of<S: Scalar>(thresholds: &[S], x: S) -> u8 {
    thresholds.partition_point(|t| *t < x) as u8
}

fn weighted_loss<S: Scalar>(f: &[S], y: &[u8], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let s: f64 = f
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &t), &wi)| wi * (softplus(z) - S::of(f64::from(t)) * z).as_f64())
        .sum();
    s / total
}

struct TreeBuilder<'a, S: Scalar> {
    bins: &'a Binned,
    thresholds: &'a [Vec<S>],
    g: &'a [f64],
    h: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<RegNode<S>>,
    split_bin: Vec<Option<usize>>,
    leaf_of: Vec<usize>,
}

type Hist = Vec<Vec<(f64, f64)>>;

impl<S: Scalar> TreeBuilder<'_, S> {
    fn histogram(&self, rows: &[u32]) -> Hist {
        (0..self.thresholds.len())
            .into_par_iter()
            .map(|f| {
                let mut hist = vec![(0.0, 0.0); self.thresholds[f].len() + 1];
                let col = self.bins.col(f);
                for &i in rows {
                    let i = i as usize;
                    let cell = &mut hist[col[i] as usize];
                    cell.0 += self.g[i];
                    cell.1 += self.h[i];
                }
                hist
            })
            .collect()
    }

    fn build(&mut self, rows: Vec<u32>, hist: Hist, depth: usize) -> usize {
        let (gs, hs) = hist[0].iter().fold((0.0, 0.0), |a, c| (a.0 + c.0, a.1 + c.1));
        let lambda = self.params.lambda;
        let id = self.nodes.len();
        self.nodes.push(RegNode::Leaf(S::of(-gs / (hs + lambda))));
        self.split_bin.push(None);
        let leaf = |this: &mut Self| {
            for &i in &rows {
                this.leaf_of[i as usize] = id;
            }
            id
        };
        if depth >= self.params.max_depth || rows.len() < 2 {
            return leaf(self);
        }
        let parent = gs * gs / (hs + lambda);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, hf) in hist.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..hf.len().saturating_sub(1) {
                gl += hf[b].0;
                hl += hf[b].1;
                let (gr, hr) = (gs - gl, hs - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            return leaf(self);
        };
        let col = self.bins.col(f);
        let (left, right): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&i| col[i as usize] as usize <= b);
        if left.is_empty() || right.is_empty() {
            for &i in left.iter().chain(&right) {
                self.leaf_of[i as usize] = id;
            }
            return id;
        }
        // Build the smaller child's histogram; derive the other by subtraction.
        let (small, large_is_left) = if left.len() <= right.len() {
            (&left, false)
        } else {
            (&right, true)
        };
        let small_hist = self.histogram(small);
        let large_hist: Hist = hist
            .iter()
            .zip(&small_hist)
            .map(|(p, s)| p.iter().zip(s).map(|(a, b)| (a.0 - b.0, a.1 - b.1)).collect())
            .collect();
        let (lh, rh) = if large_is_left {
            (large_hist, small_hist)
        } else {
            (small_hist, large_hist)
        };
        drop(hist);
        let l = self.build(left, lh, depth + 1);
        let r = self.build(right, rh, depth + 1);
        self.nodes[id] = RegNode::Split {
            feature: f,
            threshold: self.thresholds[f][b],
            left: l,
            right: r,
        };
        self.split_bin[id] = Some(b);
        id
    }
}

pub fn train_gbdt<S: Scalar>(x: ArrayView2<S>, y: &[u8], params: &GbdtParams, seed: u64) -> Result<Gbdt<S>> {
    check_training_input(x, y)?;
    if !(params.learning_rate > 0.0) || !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(Error::Config("learning_rate must be > 0 and subsample in (0, 1]".into()));
    }
    let (n, d) = x.dim();
    if d == 0 {
        return Err(Error::Model("no feature columns".into()));
    }
    let mut model = Gbdt {
        params: params.clone(),
        seed,
        n_features: d,
        base_score: S::zero(),
        trees: Vec::new(),
        shrinkage: Vec::new(),
        train_loss: Vec::new(),
        degenerate: None,
    };
    if let Some(c) = single_class(y) {
        log::warn!("single-class training set; gbdt degenerates to constant class {c}");
        model.degenerate = Some(c);
        return Ok(model);
    }

    let cw = if params.class_weighted {
        class_weights(y)
    } else {
        [1.0, 1.0]
    };
    let w: Vec<f64> = y.iter().map(|&t| cw[t as usize]).collect();
    let wpos: f64 = y.iter().zip(&w).filter(|(t, _)| **t == 1).map(|(_, w)| w).sum();
    let wneg: f64 = w.iter().sum::<f64>() - wpos;
    model.base_score = S::of((wpos / wneg).ln());

    let thresholds: Vec<Vec<S>> = (0..d)
        .into_par_iter()
        .map(|f| thresholds_for(x.column(f), params.max_bins))
        .collect();
    let mut codes = vec![0u8; n * d];
    codes.par_chunks_mut(n.max(1)).enumerate().for_each(|(f, chunk)| {
        for (i, c) in chunk.iter_mut().enumerate() {
            *c = bin_of(&thresholds[f], x[[i, f]]);
        }
    });
    let bins = Binned { n, codes };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f_cur: Vec<S> = vec![model.base_score; n];
    let mut loss = weighted_loss(&f_cur, y, &w);
    model.train_loss.push(loss);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..params.n_trees {
        for i in 0..n {
            let p = sigmoid(f_cur[i]).as_f64();
            g[i] = w[i] * (p - f64::from(y[i]));
            h[i] = w[i] * p * (1.0 - p);
        }
        let rows: Vec<u32> = if params.subsample < 1.0 {
            let k = ((n as f64 * params.subsample).round() as usize).max(1);
            let mut r: Vec<u32> = sample(&mut rng, n, k).into_iter().map(|i| i as u32).collect();
            r.sort_unstable();
            r
        } else {
            (0..n as u32).collect()
        };
        let mut tb = TreeBuilder {
            bins: &bins,
            thresholds: &thresholds,
            g: &g,
            h: &h,
            params,
            nodes: Vec::new(),
            split_bin: Vec::new(),
            leaf_of: vec![usize::MAX; n],
        };
        let root_hist = tb.histogram(&rows);
        tb.build(rows, root_hist, 0);
        let TreeBuilder {
            nodes,
            split_bin,
            leaf_of,
            ..
        } = tb;
        let tree = RegTree { nodes };
        let raw: Vec<S> = (0..n)
            .map(|i| match leaf_of[i] {
                usize::MAX => tree.predict_binned(&split_bin, &bins, i),
                leaf => match tree.nodes[leaf] {
                    RegNode::Leaf(v) => v,
                    _ => unreachable!("rows are recorded at leaves"),
                },
            })
            .collect();

        let mut eta = S::of(params.learning_rate);
        let mut accepted = None;
        for _ in 0..=10 {
            let cand: Vec<S> = f_cur.iter().zip(&raw).map(|(&a, &r)| a + eta * r).collect();
            let l = weighted_loss(&cand, y, &w);
            if l <= loss {
                accepted = Some((cand, l));
                break;
            }
            eta = eta / S::of(2.0);
        }
        let Some((cand, l)) = accepted else {
            log::debug!("boosting stage dropped: no shrinkage lowers the loss");
            continue;
        };
        f_cur = cand;
        loss = l;
        model.trees.push(tree);
        model.shrinkage.push(eta);
        model.train_loss.push(loss);
    }
    Ok(model)
}

impl<S: Scalar> Gbdt<S> {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Raw margin after the first `stages` trees.
    pub fn margin_staged(&self, row: ArrayView1<S>, stages: usize) -> S {
        self.trees
            .iter()
            .zip(&self.shrinkage)
            .take(stages)
            .fold(self.base_score, |acc, (t, &eta)| acc + eta * t.predict(row))
    }

    pub fn margin(&self, row: ArrayView1<S>) -> S {
        self.margin_staged(row, self.trees.len())
    }
}

impl<S: Scalar> BinaryClassifier<S> for Gbdt<S> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba(&self, x: ArrayView2<S>) -> Vec<S> {
        check_schema(self.n_features, x);
        if let Some(c) = self.degenerate {
            return vec![degenerate_proba(c); x.nrows()];
        }
        (0..x.nrows())
            .into_par_iter()
            .map(|i| sigmoid(self.margin(x.row(i))))
            .collect()
    }
}
