//! Minimal CPU neural-network layer: parameter storage, kernels and the two
//! composite blocks the segmentation models are assembled from.

pub mod ops;
mod params;

pub use ops::{ConvShape, Matrix};
pub use params::{Grads, Init, ParamEntry, ParamId, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Whether batch-norm layers use batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

pub struct MlpCache<T> {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix<T>>,
}

impl Mlp {
    /// Register an MLP with the given layer widths under `prefix`. When
    /// `zero_last` is set the output layer starts at exactly zero.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: &[usize],
        zero_last: bool,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let last = l + 1 == layers;
            let (wi, bi) = if last && zero_last {
                (Init::Zeros, Init::Zeros)
            } else {
                (
                    Init::LecunUniform { fan_in },
                    Init::LecunUniform { fan_in },
                )
            };
            weights.push(store.add(
                &format!("{prefix}.{l}.weight"),
                &[fan_out, fan_in],
                ParamKind::Learnable,
                wi,
            ));
            biases.push(store.add(
                &format!("{prefix}.{l}.bias"),
                &[fan_out],
                ParamKind::Learnable,
                bi,
            ));
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Check that the stored weights agree with the declared widths.
    pub fn validate<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        for (l, win) in self.widths.windows(2).enumerate() {
            let w = store.get(self.weights[l]).len();
            let b = store.get(self.biases[l]).len();
            if w != win[0] * win[1] || b != win[1] {
                return Err(Error::Config(format!(
                    "layer {l} has {w} weights and {b} biases, expected {}x{} and {}",
                    win[1], win[0], win[1]
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Matrix<T>) -> (Matrix<T>, MlpCache<T>) {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut h = x.clone();
        for l in 0..layers {
            let out = self.widths[l + 1];
            let y = ops::linear(&h, store.get(self.weights[l]), store.get(self.biases[l]), out);
            inputs.push(h);
            h = if l + 1 < layers { ops::relu_matrix(&y) } else { y };
        }
        (h, MlpCache { inputs })
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &MlpCache<T>,
        dy: &Matrix<T>,
        grads: &mut Grads<T>,
    ) -> Matrix<T> {
        let layers = self.weights.len();
        let mut g = dy.clone();
        for l in (0..layers).rev() {
            let lg = ops::linear_backward(&cache.inputs[l], store.get(self.weights[l]), &g);
            grads.accumulate(self.weights[l], &lg.dw);
            grads.accumulate(self.biases[l], &lg.db);
            g = if l > 0 {
                // inputs[l] is the ReLU output of layer l-1
                ops::relu_matrix_backward(&cache.inputs[l], &lg.dx)
            } else {
                lg.dx
            };
        }
        g
    }
}

/// Convolution followed by batch normalization. Bias-free convolution
/// unless requested, since batch norm absorbs it.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub shape: ConvShape,
    weight: ParamId,
    bias: Option<ParamId>,
    bn_weight: ParamId,
    bn_bias: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

pub struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: ops::BnCache<T>,
}

impl ConvBn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, shape: ConvShape) -> Self {
        let fan_in = shape.in_channels * shape.kernel * shape.kernel;
        let weight = store.add(
            &format!("{prefix}.conv.weight"),
            &[shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
            ParamKind::Learnable,
            Init::HeUniform { fan_in },
        );
        let c = shape.out_channels;
        let bn = |store: &mut ParamStore<T>, n: &str, kind, init| {
            store.add(&format!("{prefix}.bn.{n}"), &[c], kind, init)
        };
        Self {
            shape,
            weight,
            bias: None,
            bn_weight: bn(store, "weight", ParamKind::Learnable, Init::Ones),
            bn_bias: bn(store, "bias", ParamKind::Learnable, Init::Zeros),
            running_mean: bn(store, "running_mean", ParamKind::Buffer, Init::Zeros),
            running_var: bn(store, "running_var", ParamKind::Buffer, Init::Ones),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape.weight_len() + 2 * self.shape.out_channels
    }

    /// The cache is only produced in training mode.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, Option<ConvBnCache<T>>) {
        let conv = ops::conv2d(
            x,
            self.shape,
            store.get(self.weight),
            self.bias.map(|b| store.get(b)),
        );
        let (gamma, beta) = (store.get(self.bn_weight), store.get(self.bn_bias));
        match mode {
            Mode::Train => {
                let (y, bn) = ops::batch_norm_train(&conv, gamma, beta);
                (
                    y,
                    Some(ConvBnCache {
                        input: x.clone(),
                        bn,
                    }),
                )
            }
            Mode::Eval => (
                ops::batch_norm_eval(
                    &conv,
                    gamma,
                    beta,
                    store.get(self.running_mean),
                    store.get(self.running_var),
                ),
                None,
            ),
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvBnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let bg = ops::batch_norm_backward(&cache.bn, store.get(self.bn_weight), dy);
        grads.accumulate(self.bn_weight, &bg.dgamma);
        grads.accumulate(self.bn_bias, &bg.dbeta);
        let cg = ops::conv2d_backward(&cache.input, self.shape, store.get(self.weight), &bg.dx);
        grads.accumulate(self.weight, &cg.dw);
        if let Some(b) = self.bias {
            grads.accumulate(b, &cg.db);
        }
        cg.dx
    }

    pub fn update_running_stats<T: Real>(&self, store: &mut ParamStore<T>, cache: &ConvBnCache<T>) {
        let mut rm = store.get(self.running_mean).to_vec();
        let mut rv = store.get(self.running_var).to_vec();
        ops::batch_norm_update_running(&cache.bn, &mut rm, &mut rv);
        store.get_mut(self.running_mean).copy_from_slice(&rm);
        store.get_mut(self.running_var).copy_from_slice(&rv);
    }
}

/// Plain convolution with bias (the final classifier).
#[derive(Clone, Debug)]
pub struct Conv {
    pub shape: ConvShape,
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, shape: ConvShape) -> Self {
        let fan_in = shape.in_channels * shape.kernel * shape.kernel;
        Self {
            shape,
            weight: store.add(
                &format!("{prefix}.weight"),
                &[shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
                ParamKind::Learnable,
                Init::LecunUniform { fan_in },
            ),
            bias: store.add(
                &format!("{prefix}.bias"),
                &[shape.out_channels],
                ParamKind::Learnable,
                Init::LecunUniform { fan_in },
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape.weight_len() + self.shape.out_channels
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::conv2d(x, self.shape, store.get(self.weight), Some(store.get(self.bias)))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let g = ops::conv2d_backward(x, self.shape, store.get(self.weight), dy);
        grads.accumulate(self.weight, &g.dw);
        grads.accumulate(self.bias, &g.db);
        g.dx
    }
}
