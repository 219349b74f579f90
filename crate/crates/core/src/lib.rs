//! Clean-label, data-only backdoor poisoning of network flow classifiers.
//!
//! The crate follows a connection log through the whole attack chain:
//!
//! * [`flowlog`] parses and labels Zeek `conn.log` files and splits them into
//!   train / test / adversary sets.
//! * [`featurize`] turns connections into windowed statistical feature points
//!   (or fixed-size connection blocks) while keeping provenance back to the
//!   raw records.
//! * [`models`] holds the learners: gradient boosted trees, feed-forward
//!   networks, an auto-encoder, a proxy decision tree and an isolation forest.
//! * [`explain`] ranks features, either query-free through a proxy tree or
//!   through sampled Shapley values against a victim model.
//! * [`trigger`] builds assignment, prototype and problem-space trigger, and
//!   injects it into training and test data without touching labels.
//! * [`bayesgen`] synthesizes trigger connections from a fixed-structure
//!   Bayesian network so non-trigger fields blend in with benign traffic.
//! * [`stealth`] measures how visible the poisoning is.
//! * [`harness`] runs seeded experiments end to end and writes reports.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the `f64` instantiation used by the harness and CLI.

pub mod bayesgen;
pub mod error;
pub mod explain;
pub mod featurize;
pub mod flowlog;
pub mod harness;
pub mod models;
pub mod scalar;
pub mod stealth;
pub mod synth;
pub mod trigger;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Gradient boosted trees over `f64` features.
pub type Gbdt = models::gbdt::Gbdt<f64>;
/// Feed-forward classifier over `f64` features.
pub type Mlp = models::mlp::Mlp<f64>;
/// Auto-encoder over `f64` block encodings.
pub type AutoEncoder = models::autoencoder::AutoEncoder<f64>;
/// Isolation forest over `f64` features.
pub type IsolationForest = models::iforest::IsolationForest<f64>;
/// Proxy decision tree over `f64` features.
pub type ProxyTree = models::tree::ProxyTree<f64>;
/// Trained binary classifier (either kind) over `f64` features.
pub type Classifier = models::Classifier<f64>;
/// Feature importance vector over `f64`.
pub type ImportanceScores = explain::ImportanceScores<f64>;
/// Gaussian kernel density estimate over `f64`.
pub type Kde = bayesgen::kde::Kde<f64>;
