//! Unsupervised auto-encoder over connection blocks:
//! `input -> hidden -> bottleneck -> hidden -> input`, rectifier hidden
//! layers, a linear bottleneck and a sigmoid reconstruction (block
//! encodings live in `[0, 1]`).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::nn::{train_epochs, Activation, Loss, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoEncoderParams {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AutoEncoderParams {
    fn default() -> Self {
        AutoEncoderParams {
            hidden: 256,
            bottleneck: 32,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AutoEncoder<S: Scalar> {
    pub params: AutoEncoderParams,
    pub seed: u64,
    pub net: Network<S>,
    /// Reconstruction MSE before training, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Layers up to and including the bottleneck.
const ENCODER_LAYERS: usize = 2;

impl<S: Scalar> AutoEncoder<S> {
    pub fn untrained(input_dim: usize, params: &AutoEncoderParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [input_dim, params.hidden, params.bottleneck, params.hidden, input_dim];
        let mut net = Network::new(&sizes, Activation::Relu, Activation::Sigmoid, &mut rng);
        net.layers[1].act = Activation::Identity;
        AutoEncoder {
            params: params.clone(),
            seed,
            net,
            loss_history: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn bottleneck(&self) -> usize {
        self.params.bottleneck
    }

    pub fn encode(&self, x: ArrayView2<S>) -> Array2<S> {
        assert_eq!(x.ncols(), self.input_dim(), "auto-encoder input width mismatch");
        self.net.forward_prefix(x, ENCODER_LAYERS)
    }

    pub fn reconstruct(&self, x: ArrayView2<S>) -> Array2<S> {
        self.net.forward(x)
    }

    pub fn reconstruction_mse(&self, x: ArrayView2<S>) -> f64 {
        let r = self.reconstruct(x);
        let d = &r - &x;
        d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d.len().max(1) as f64
    }
}

pub fn train_autoencoder<S: Scalar>(x: ArrayView2<S>, params: &AutoEncoderParams, seed: u64) -> Result<AutoEncoder<S>> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Model("empty auto-encoder training set".into()));
    }
    if params.bottleneck == 0 || params.hidden == 0 {
        return Err(Error::Config("auto-encoder widths must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("non-finite feature value".into()));
    }
    let mut ae = AutoEncoder::untrained(x.ncols(), params, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    ae.loss_history = train_epochs(
        &mut ae.net,
        x,
        x,
        Loss::Mse,
        None,
        params.epochs,
        params.batch_size,
        params.learning_rate,
        &mut rng,
    );
    Ok(ae)
}
