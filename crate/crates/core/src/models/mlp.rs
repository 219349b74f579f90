//! Feed-forward binary classifier: standardised inputs, rectifier hidden
//! layers and a sigmoid output trained with class-weighted cross-entropy.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::{sigmoid, Scalar};

use super::nn::{train_epochs, Activation, Loss, Network};
use super::{check_schema, check_training_input, class_weights, degenerate_proba, single_class, BinaryClassifier, Standardizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_weighted: bool,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: vec![64, 32],
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            class_weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<S: Scalar> {
    pub params: MlpParams,
    pub seed: u64,
    pub scaler: Standardizer<S>,
    /// Emits a single logit; the sigmoid is applied at prediction time.
    pub net: Network<S>,
    pub loss_history: Vec<f64>,
    pub degenerate: Option<u8>,
}

impl<S: Scalar> Mlp<S> {
    /// An untrained network, for shape checks and gradient tests.
    pub fn untrained(n_features: usize, params: &MlpParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![n_features];
        sizes.extend(&params.hidden);
        sizes.push(1);
        Mlp {
            params: params.clone(),
            seed,
            scaler: Standardizer {
                mean: ndarray::Array1::zeros(n_features),
                std: ndarray::Array1::ones(n_features),
            },
            net: Network::new(&sizes, Activation::Relu, Activation::Identity, &mut rng),
            loss_history: Vec::new(),
            degenerate: None,
        }
    }

    pub fn n_features(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, x: ArrayView2<S>) -> Array2<S> {
        self.net.forward(self.scaler.transform(x).view())
    }
}

pub fn train_mlp<S: Scalar>(x: ArrayView2<S>, y: &[u8], params: &MlpParams, seed: u64) -> Result<Mlp<S>> {
    check_training_input(x, y)?;
    let mut model = Mlp::untrained(x.ncols(), params, seed);
    if let Some(c) = single_class(y) {
        log::warn!("single-class training set; mlp degenerates to constant class {c}");
        model.degenerate = Some(c);
        return Ok(model);
    }
    model.scaler = Standardizer::fit(x);
    let z = model.scaler.transform(x);
    let target = Array2::from_shape_fn((y.len(), 1), |(i, _)| S::of(f64::from(y[i])));
    let cw = if params.class_weighted {
        class_weights(y)
    } else {
        [1.0, 1.0]
    };
    let w: Vec<S> = y.iter().map(|&t| S::of(cw[t as usize])).collect();
    // A separate stream from the one used for initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    model.loss_history = train_epochs(
        &mut model.net,
        z.view(),
        target.view(),
        Loss::BceWithLogits,
        Some(&w),
        params.epochs,
        params.batch_size,
        params.learning_rate,
        &mut rng,
    );
    Ok(model)
}

impl<S: Scalar> BinaryClassifier<S> for Mlp<S> {
    fn n_features(&self) -> usize {
        self.net.input_dim()
    }

    fn predict_proba(&self, x: ArrayView2<S>) -> Vec<S> {
        check_schema(self.n_features(), x);
        if let Some(c) = self.degenerate {
            return vec![degenerate_proba(c); x.nrows()];
        }
        self.logits(x).column(0).iter().map(|&z| sigmoid(z)).collect()
    }
}
