//! Feature ranking for the class the attacker wants misclassified.
//!
//! Query-free strategies fit a proxy tree on the adversary's own data (or draw
//! features at random). The query strategy estimates Shapley values of the
//! victim's nontarget probability by permutation sampling, marginalising absent
//! features over a background sample, and sums absolute attributions over the
//! explained points.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::tree::TreeParams;
use crate::models::{train_proxy_tree, BinaryClassifier, Criterion};
use crate::scalar::Scalar;

pub const DEFAULT_TOP_K: usize = 8;
pub const MAX_EXACT_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Entropy,
    Gini,
    Shap,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Entropy, Strategy::Gini, Strategy::Shap, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::Gini => "gini",
            Strategy::Shap => "shap",
            Strategy::Random => "random",
        }
    }

    pub fn queries_model(self) -> bool {
        self == Strategy::Shap
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ImportanceScores<S: Scalar> {
    pub strategy: Strategy,
    /// One score per feature; larger means more important for the
    /// nontarget class.
    pub scores: Vec<S>,
    /// Rows sent to the victim model while computing the scores.
    pub model_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    /// Target-class points marginalising absent features.
    pub background: usize,
    /// Nontarget points whose attributions are summed.
    pub points: usize,
    pub permutations: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            background: 100,
            points: 100,
            permutations: 20,
        }
    }
}

/// Ranks features with a proxy tree fit on the adversary's data. Never touches
/// the victim model.
pub fn importance_proxy_tree<'a, S: Scalar>(x: ArrayView2<'a, S>, y: &'a [u8], criterion: Criterion) -> Result<ImportanceScores<S>> {
    let strategy = match criterion {
        Criterion::Gini => Strategy::Gini,
        Criterion::Entropy => Strategy::Entropy,
    };
    let zeros = || ImportanceScores {
        strategy,
        scores: vec![S::zero(); x.ncols()],
        model_queries: 0,
    };
    if y.is_empty() || y.iter().all(|&v| v == y[0]) {
        log::warn!("adversary data holds a single class; {strategy} importances are all zero");
        return Ok(zeros());
    }
    let tree = train_proxy_tree(x, y, criterion, TreeParams::default())?;
    Ok(ImportanceScores {
        strategy,
        scores: tree.importances.iter().map(|&v| S::of(v)).collect(),
        model_queries: 0,
    })
}

/// Value of every coalition prefix along one feature ordering: row block `k`
/// of the returned matrix has the first `k` features of `order` taken from
/// `x` and the rest from each background row.
fn prefix_batch<S: Scalar>(x: ArrayView1<S>, background: ArrayView2<S>, order: &[usize]) -> Array2<S> {
    let (b, d) = background.dim();
    let mut batch = Array2::zeros(((d + 1) * b, d));
    let mut current = background.to_owned();
    for k in 0..=d {
        if k > 0 {
            let j = order[k - 1];
            current.column_mut(j).fill(x[j]);
        }
        batch.slice_mut(ndarray::s![k * b..(k + 1) * b, ..]).assign(&current);
    }
    batch
}

fn block_means<S: Scalar>(values: &[S], block: usize) -> Vec<f64> {
    values
        .chunks(block)
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / block as f64)
        .collect()
}

/// Permutation-sampling Shapley estimate for one point. Each permutation's
/// marginal contributions telescope to `f(x) - E_bg[f]`, so efficiency holds
/// for every sample size.
pub fn shapley_sampled_point<S, F>(f: &F, x: ArrayView1<S>, background: ArrayView2<S>, n_permutations: usize, rng: &mut ChaCha8Rng) -> Vec<f64>
where
    S: Scalar,
    F: Fn(ArrayView2<S>) -> Vec<S> + ?Sized,
{
    let d = x.len();
    let b = background.nrows();
    let mut phi = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    for _ in 0..n_permutations {
        order.shuffle(rng);
        let batch = prefix_batch(x, background, &order);
        let means = block_means(&f(batch.view()), b);
        for (k, &j) in order.iter().enumerate() {
            phi[j] += means[k + 1] - means[k];
        }
    }
    phi.iter().map(|v| v / n_permutations as f64).collect()
}

/// Sums absolute sampled Shapley values of `points` per feature.
pub fn importance_shapley_sampled<S, F>(
    f: &F,
    points: ArrayView2<S>,
    background: ArrayView2<S>,
    n_permutations: usize,
    seed: u64,
) -> Result<ImportanceScores<S>>
where
    S: Scalar,
    F: Fn(ArrayView2<S>) -> Vec<S> + Sync + ?Sized,
{
    if n_permutations < 1 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    if background.nrows() == 0 {
        return Err(Error::Config("empty Shapley background sample".into()));
    }
    let d = points.ncols();
    let per_point: Vec<Vec<f64>> = (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            shapley_sampled_point(f, points.row(i), background, n_permutations, &mut rng)
        })
        .collect();
    let mut total = vec![0.0; d];
    for phi in &per_point {
        for (t, v) in total.iter_mut().zip(phi) {
            *t += v.abs();
        }
    }
    Ok(ImportanceScores {
        strategy: Strategy::Shap,
        scores: total.into_iter().map(S::of).collect(),
        model_queries: (points.nrows() * n_permutations * (d + 1) * background.nrows()) as u64,
    })
}

/// Exact Shapley values by enumerating all `2^d` coalitions. Refuses `d`
/// above [`MAX_EXACT_DIM`].
pub fn shapley_exact_oracle<S, F>(f: &F, x: ArrayView1<S>, background: ArrayView2<S>) -> Result<Vec<f64>>
where
    S: Scalar,
    F: Fn(ArrayView2<S>) -> Vec<S> + ?Sized,
{
    let d = x.len();
    if d > MAX_EXACT_DIM {
        return Err(Error::Config(format!("exact Shapley enumeration refuses d = {d} > {MAX_EXACT_DIM}")));
    }
    let b = background.nrows();
    if b == 0 {
        return Err(Error::Config("empty Shapley background sample".into()));
    }
    let n_sets = 1usize << d;
    let mut batch = Array2::zeros((n_sets * b, d));
    for mask in 0..n_sets {
        for r in 0..b {
            for j in 0..d {
                let v = if mask >> j & 1 == 1 { x[j] } else { background[[r, j]] };
                batch[[mask * b + r, j]] = v;
            }
        }
    }
    let value = block_means(&f(batch.view()), b);
    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let mut phi = vec![0.0; d];
    for mask in 0..n_sets {
        let s = mask.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                let w = fact[s] * fact[d - s - 1] / fact[d];
                *p += w * (value[mask | 1 << j] - value[mask]);
            }
        }
    }
    Ok(phi)
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn select_top_k<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `k` distinct features drawn uniformly with the run seed.
pub fn random_top_k(n_features: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, n_features, k.min(n_features)).into_vec()
}

/// Wraps a classifier and counts the rows it is asked to score.
pub struct QueryCounter<'a, S: Scalar> {
    inner: &'a (dyn BinaryClassifier<S> + Sync),
    rows: AtomicU64,
}

impl<'a, S: Scalar> QueryCounter<'a, S> {
    pub fn new(inner: &'a (dyn BinaryClassifier<S> + Sync)) -> Self {
        QueryCounter {
            inner,
            rows: AtomicU64::new(0),
        }
    }

    pub fn queries(&self) -> u64 {
        self.rows.load(Ordering::Relaxed)
    }
}

impl<S: Scalar> BinaryClassifier<S> for QueryCounter<'_, S> {
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    fn predict_proba(&self, x: ArrayView2<S>) -> Vec<S> {
        self.rows.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        self.inner.predict_proba(x)
    }
}

/// Inputs for [`compute_importance`].
pub struct AdversaryView<'a, S: Scalar> {
    pub x: ArrayView2<'a, S>,
    /// 1 = nontarget.
    pub y: &'a [u8],
}

/// Runs a strategy and returns `(scores, selected features)`. Only
/// [`Strategy::Shap`] uses `model`; the others never call it.
pub fn compute_importance<S: Scalar>(
    strategy: Strategy,
    adv: &AdversaryView<S>,
    model: Option<&(dyn BinaryClassifier<S> + Sync)>,
    shap: &ShapConfig,
    k: usize,
    seed: u64,
) -> Result<(ImportanceScores<S>, Vec<usize>)> {
    let d = adv.x.ncols();
    let scores = match strategy {
        Strategy::Entropy => importance_proxy_tree(adv.x, adv.y, Criterion::Entropy)?,
        Strategy::Gini => importance_proxy_tree(adv.x, adv.y, Criterion::Gini)?,
        Strategy::Random => {
            let chosen = random_top_k(d, k, seed);
            let mut scores = vec![S::zero(); d];
            for (rank, &j) in chosen.iter().enumerate() {
                scores[j] = S::of_usize(k - rank);
            }
            return Ok((
                ImportanceScores {
                    strategy,
                    scores,
                    model_queries: 0,
                },
                chosen,
            ));
        }
        Strategy::Shap => {
            let model = model.ok_or_else(|| Error::Config("the shap strategy needs a victim model".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let take = |class: u8, n: usize, rng: &mut ChaCha8Rng| {
                let idx: Vec<usize> = (0..adv.y.len()).filter(|&i| adv.y[i] == class).collect();
                let pick: Vec<usize> = if idx.len() <= n {
                    idx
                } else {
                    let mut p: Vec<usize> = sample(rng, idx.len(), n).into_iter().map(|i| idx[i]).collect();
                    p.sort_unstable();
                    p
                };
                adv.x.select(Axis(0), &pick)
            };
            let background = take(0, shap.background, &mut rng);
            let points = take(1, shap.points, &mut rng);
            if points.nrows() == 0 {
                return Err(Error::Attack("no nontarget points to explain".into()));
            }
            let query = |z: ArrayView2<S>| model.predict_proba(z);
            importance_shapley_sampled(&query, points.view(), background.view(), shap.permutations, seed)?
        }
    };
    let chosen = select_top_k(&scores.scores, k);
    Ok((scores, chosen))
}
