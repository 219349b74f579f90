//! Learners: victim classifiers, the proxy tree used for query-free feature
//! ranking, the auto-encoder representation and the isolation forest used as
//! the defender's anomaly detector.

pub mod autoencoder;
pub mod gbdt;
pub mod iforest;
pub mod metrics;
pub mod mlp;
pub mod nn;
pub mod tree;

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use autoencoder::{train_autoencoder, AutoEncoder, AutoEncoderParams};
pub use gbdt::{train_gbdt, Gbdt, GbdtParams};
pub use iforest::{train_isolation_forest, IsolationForest};
pub use mlp::{train_mlp, Mlp, MlpParams};
pub use tree::{train_proxy_tree, Criterion, ProxyTree};

/// Probability outputs of a degenerate single-class model are clipped here.
pub const DEGENERATE_CLIP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gb,
    Ffnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gb => "gb",
            ModelKind::Ffnn => "ffnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gb" | "gbdt" => Ok(ModelKind::Gb),
            "ffnn" | "mlp" => Ok(ModelKind::Ffnn),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// A binary classifier over fixed-width feature rows. Class 1 is the
/// nontarget (victim) class.
pub trait BinaryClassifier<S: Scalar> {
    fn n_features(&self) -> usize;

    fn predict_proba(&self, x: ArrayView2<S>) -> Vec<S>;

    fn predict_proba_row(&self, row: ArrayView1<S>) -> S {
        self.predict_proba(row.insert_axis(Axis(0)))[0]
    }

    fn predict(&self, x: ArrayView2<S>) -> Vec<u8> {
        let half = S::of(0.5);
        self.predict_proba(x)
            .into_iter()
            .map(|p| u8::from(p >= half))
            .collect()
    }
}

/// A trained victim model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "kind", rename_all = "lowercase")]
pub enum Classifier<S: Scalar> {
    Gbdt(Gbdt<S>),
    Ffnn(Mlp<S>),
    /// Auto-encoder features feeding a feed-forward head.
    Encoded {
        encoder: AutoEncoder<S>,
        head: Mlp<S>,
    },
}

impl<S: Scalar> BinaryClassifier<S> for Classifier<S> {
    fn n_features(&self) -> usize {
        match self {
            Classifier::Gbdt(m) => m.n_features(),
            Classifier::Ffnn(m) => m.n_features(),
            Classifier::Encoded { encoder, .. } => encoder.input_dim(),
        }
    }

    fn predict_proba(&self, x: ArrayView2<S>) -> Vec<S> {
        match self {
            Classifier::Gbdt(m) => m.predict_proba(x),
            Classifier::Ffnn(m) => m.predict_proba(x),
            Classifier::Encoded { encoder, head } => head.predict_proba(encoder.encode(x).view()),
        }
    }
}

impl<S: Scalar> Classifier<S> {
    pub fn train(
        kind: ModelKind,
        x: ArrayView2<S>,
        y: &[u8],
        gbdt: &GbdtParams,
        mlp: &MlpParams,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Gb => Classifier::Gbdt(train_gbdt(x, y, gbdt, seed)?),
            ModelKind::Ffnn => Classifier::Ffnn(train_mlp(x, y, mlp, seed)?),
        })
    }

    /// Fits an auto-encoder on `x` without labels, then a feed-forward head
    /// on its bottleneck codes.
    pub fn train_encoded(x: ArrayView2<S>, y: &[u8], ae: &AutoEncoderParams, mlp: &MlpParams, seed: u64) -> Result<Self> {
        check_training_input(x, y)?;
        let encoder = train_autoencoder(x, ae, seed)?;
        let head = train_mlp(encoder.encode(x).view(), y, mlp, seed)?;
        Ok(Classifier::Encoded { encoder, head })
    }
}

pub(crate) fn check_training_input<S: Scalar>(x: ArrayView2<S>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Model(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Model("empty training set".into()));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::Model("labels must be 0 or 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("non-finite feature value".into()));
    }
    Ok(())
}

pub(crate) fn check_schema<S: Scalar>(expected: usize, x: ArrayView2<S>) {
    assert_eq!(
        x.ncols(),
        expected,
        "model expects {expected} features, input has {}",
        x.ncols()
    );
}

/// The single class in `y`, if there is only one.
pub(crate) fn single_class(y: &[u8]) -> Option<u8> {
    let first = *y.first()?;
    y.iter().all(|&v| v == first).then_some(first)
}

pub(crate) fn degenerate_proba<S: Scalar>(class: u8) -> S {
    S::of(if class == 1 {
        DEGENERATE_CLIP.1
    } else {
        DEGENERATE_CLIP.0
    })
}

/// Inverse class-frequency weights, `n / (2 n_c)`.
pub fn class_weights(y: &[u8]) -> [f64; 2] {
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let neg = n - pos;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 0.0 };
    [w(neg), w(pos)]
}

/// Per-feature standardisation fit on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Standardizer<S: Scalar> {
    pub mean: Array1<S>,
    pub std: Array1<S>,
}

impl<S: Scalar> Standardizer<S> {
    pub fn fit(x: ArrayView2<S>) -> Self {
        let n = S::of_usize(x.nrows().max(1));
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<S>::zeros(x.ncols());
        for row in x.rows() {
            for (j, v) in row.iter().enumerate() {
                let d = *v - mean[j];
                var[j] += d * d;
            }
        }
        let std = var.mapv(|v| {
            let s = (v / n).sqrt();
            if s > S::zero() {
                s
            } else {
                S::one()
            }
        });
        Standardizer { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<S>) -> Array2<S> {
        (&x - &self.mean) / &self.std
    }
}

const MODEL_FORMAT: &str = "flowpoison-model";
const MODEL_VERSION: u32 = 1;

/// Versioned JSON container for trained models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModelFile<S: Scalar> {
    pub format: String,
    pub version: u32,
    pub model: StoredModel<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "type", rename_all = "snake_case")]
pub enum StoredModel<S: Scalar> {
    Classifier(Classifier<S>),
    AutoEncoder(AutoEncoder<S>),
}

pub fn save_model<S: Scalar, W: Write>(model: &StoredModel<S>, out: W) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(out, &file)?;
    Ok(())
}

pub fn load_model<S: Scalar, R: Read>(source: R) -> Result<StoredModel<S>> {
    let file: ModelFile<S> = serde_json::from_reader(source)?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model container {} v{}",
            file.format, file.version
        )));
    }
    Ok(file.model)
}
