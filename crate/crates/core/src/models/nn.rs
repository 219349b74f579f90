//! Dense feed-forward networks with manual backpropagation and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Identity => S::one(),
            Activation::Sigmoid => a * (S::one() - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dense<S: Scalar> {
    /// `inputs x outputs`
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<S: Scalar> {
    pub layers: Vec<Dense<S>>,
}

/// Per-layer gradients, shaped like the layers.
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar> {
    pub w: Vec<Array2<S>>,
    pub b: Vec<Array1<S>>,
}

pub struct Cache<S: Scalar> {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
}

impl<S: Scalar> Cache<S> {
    pub fn output(&self) -> &Array2<S> {
        self.inputs.last().expect("network has layers")
    }
}

impl<S: Scalar> Network<S> {
    /// Layer widths `sizes[0] -> sizes[1] -> ...`. Hidden layers use `hidden`,
    /// the last layer `output`. Weights are He-initialised for rectifiers and
    /// Glorot-initialised otherwise; biases start at zero.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let act = if i + 2 == sizes.len() { output } else { hidden };
                let std = match act {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    let n: f64 = StandardNormal.sample(rng);
                    S::of(n * std)
                });
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                    act,
                }
            })
            .collect();
        Network { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn forward_cached(&self, x: ArrayView2<S>) -> Cache<S> {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = inputs.last().unwrap().dot(&layer.w) + &layer.b;
            let a = z.mapv(|v| layer.act.apply(v));
            pre.push(z);
            inputs.push(a);
        }
        Cache { inputs, pre }
    }

    pub fn forward(&self, x: ArrayView2<S>) -> Array2<S> {
        let mut a = x.to_owned();
        for layer in &self.layers {
            a = (a.dot(&layer.w) + &layer.b).mapv(|v| layer.act.apply(v));
        }
        a
    }

    /// Output of the first `n_layers` layers.
    pub fn forward_prefix(&self, x: ArrayView2<S>, n_layers: usize) -> Array2<S> {
        let mut a = x.to_owned();
        for layer in &self.layers[..n_layers] {
            a = (a.dot(&layer.w) + &layer.b).mapv(|v| layer.act.apply(v));
        }
        a
    }

    /// Backpropagates `d_out`, the loss gradient with respect to the final
    /// layer's *outputs*.
    pub fn backward(&self, cache: &Cache<S>, d_out: Array2<S>) -> Grads<S> {
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta_a = d_out;
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let z = &cache.pre[l];
            let a = &cache.inputs[l + 1];
            let mut delta_z = delta_a;
            ndarray::Zip::from(&mut delta_z)
                .and(z)
                .and(a)
                .for_each(|d, &z, &a| *d = *d * layer.act.derivative(z, a));
            gw.push(cache.inputs[l].t().dot(&delta_z));
            gb.push(delta_z.sum_axis(Axis(0)));
            delta_a = delta_z.dot(&layer.w.t());
        }
        gw.reverse();
        gb.reverse();
        Grads { w: gw, b: gb }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend(l.w.iter().copied());
            v.extend(l.b.iter().copied());
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[S]) {
        assert_eq!(flat.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.b.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }
}

impl<S: Scalar> Grads<S> {
    pub fn flat(&self) -> Vec<S> {
        let mut v = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            v.extend(w.iter().copied());
            v.extend(b.iter().copied());
        }
        v
    }
}

/// Losses the networks are trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Weighted binary cross-entropy on a single identity-activated logit.
    BceWithLogits,
    /// Mean squared error over every output entry.
    Mse,
}

/// Loss value and gradient with respect to network outputs.
///
/// `weights` applies to `BceWithLogits` only (per-row weights, normalised by
/// their sum).
pub fn loss_and_output_grad<S: Scalar>(
    loss: Loss,
    out: &Array2<S>,
    target: ArrayView2<S>,
    weights: Option<&[S]>,
) -> (S, Array2<S>) {
    match loss {
        Loss::BceWithLogits => {
            let n = out.nrows();
            let w = |i: usize| weights.map_or(S::one(), |w| w[i]);
            let total: S = (0..n).map(w).sum();
            let mut grad = Array2::zeros(out.raw_dim());
            let mut value = S::zero();
            for i in 0..n {
                let z = out[[i, 0]];
                let y = target[[i, 0]];
                value += w(i) * (softplus(z) - y * z);
                grad[[i, 0]] = w(i) * (sigmoid(z) - y) / total;
            }
            (value / total, grad)
        }
        Loss::Mse => {
            let count = S::of_usize(out.len());
            let diff = out - &target;
            let value = diff.iter().map(|d| *d * *d).sum::<S>() / count;
            let grad = diff.mapv(|d| S::of(2.0) * d / count);
            (value, grad)
        }
    }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grad<S: Scalar>(
    net: &Network<S>,
    x: ArrayView2<S>,
    target: ArrayView2<S>,
    loss: Loss,
    weights: Option<&[S]>,
) -> (S, Grads<S>) {
    let cache = net.forward_cached(x);
    let (value, d_out) = loss_and_output_grad(loss, cache.output(), target, weights);
    (value, net.backward(&cache, d_out))
}

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    t: i32,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr: S::of(lr),
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            t: 0,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
        }
    }

    pub fn step(&mut self, net: &mut Network<S>, grads: &Grads<S>) {
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t);
        let bc2 = S::one() - self.beta2.powi(self.t);
        let mut k = 0;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let params = layer.w.iter_mut().chain(layer.b.iter_mut());
            let gs = grads.w[l].iter().chain(grads.b[l].iter());
            for (p, &g) in params.zip(gs) {
                self.m[k] = self.beta1 * self.m[k] + (S::one() - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (S::one() - self.beta2) * g * g;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Mini-batch Adam over shuffled rows. Returns the loss over the full
/// set before training and after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<S: Scalar, R: Rng>(
    net: &mut Network<S>,
    x: ArrayView2<S>,
    target: ArrayView2<S>,
    loss: Loss,
    weights: Option<&[S]>,
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let n = x.nrows();
    let batch = batch.max(1);
    let full_loss = |net: &Network<S>| {
        let out = net.forward(x);
        loss_and_output_grad(loss, &out, target, weights).0.as_f64()
    };
    let mut history = vec![full_loss(net)];
    let mut adam = Adam::new(net.n_params(), lr);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let tb = target.select(Axis(0), chunk);
            let wb: Option<Vec<S>> = weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
            let (_, g) = loss_and_grad(net, xb.view(), tb.view(), loss, wb.as_deref());
            adam.step(net, &g);
        }
        history.push(full_loss(net));
    }
    history
}

/// Relative error used by the gradient checks: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn check(net: &mut Network<f64>, x: &Array2<f64>, t: &Array2<f64>, loss: Loss, rng: &mut ChaCha8Rng) {
        let w: Vec<f64> = (0..x.nrows()).map(|_| rng.gen_range(0.5..2.0)).collect();
        let wopt = (loss == Loss::BceWithLogits).then_some(&w[..]);
        let (_, g) = loss_and_grad(net, x.view(), t.view(), loss, wopt);
        let analytic = g.flat();
        let base = net.flat_params();
        let h = 1e-6;
        for _ in 0..5 {
            let k = rng.gen_range(0..base.len());
            let mut p = base.clone();
            p[k] += h;
            net.set_flat_params(&p);
            let (lp, _) = loss_and_grad(net, x.view(), t.view(), loss, wopt);
            p[k] -= 2.0 * h;
            net.set_flat_params(&p);
            let (lm, _) = loss_and_grad(net, x.view(), t.view(), loss, wopt);
            net.set_flat_params(&base);
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                relative_error(analytic[k], numeric) < 1e-4,
                "param {k}: analytic {} numeric {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::<f64>::new(&[4, 6, 5, 1], Activation::Relu, Activation::Identity, &mut rng);
        let x = random_batch(&mut rng, 12, 4);
        let t = Array2::from_shape_fn((12, 1), |(i, _)| (i % 2) as f64);
        check(&mut net, &x, &t, Loss::BceWithLogits, &mut rng);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::<f64>::new(&[5, 3, 5], Activation::Relu, Activation::Sigmoid, &mut rng);
        let x = random_batch(&mut rng, 9, 5);
        check(&mut net, &x, &x.clone(), Loss::Mse, &mut rng);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::<f32>::new(&[3, 2, 1], Activation::Relu, Activation::Sigmoid, &mut rng);
        let p = net.flat_params();
        assert_eq!(p.len(), 3 * 2 + 2 + 2 + 1);
        let q: Vec<f32> = p.iter().map(|v| v + 1.0).collect();
        net.set_flat_params(&q);
        assert_eq!(net.flat_params(), q);
    }
}
