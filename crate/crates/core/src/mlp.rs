//! Small fully connected networks with hand-written backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, sigmoid, softplus, sqrt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.bias[o] + dot(self.row(o), input);
        }
    }
}

/// Gradient buffers congruent with one [`Dense`] layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrad {
    /// `dW += d_out (x) input`, `db += d_out`.
    #[inline]
    pub fn accumulate(&mut self, d_out: &[f64], input: &[f64]) {
        let in_dim = input.len();
        for (o, &g) in d_out.iter().enumerate() {
            if g != 0.0 {
                axpy(g, input, &mut self.weight[o * in_dim..(o + 1) * in_dim]);
            }
            self.bias[o] += g;
        }
    }
}

/// Multi-layer perceptron. Hidden layers share one activation; the last
/// layer has its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
    output: Activation,
}

/// Pre- and post-activation values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Mlp {
    /// Zero-initialized network with layer widths `widths[0] -> ... -> widths[n]`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(alloc::format!(
                "an MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Rebuilds a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "layer {i} buffers do not match {}x{}",
                    l.out_dim,
                    l.in_dim
                )));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            let limit = sqrt(6.0 / (layer.in_dim + layer.out_dim) as f64);
            for w in &mut layer.weight {
                *w = rng.random_range(-limit..limit);
            }
            layer.bias.fill(0.0);
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn zero_grad(&self) -> Vec<DenseGrad> {
        self.layers
            .iter()
            .map(|l| DenseGrad {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(input, &mut cache).to_vec()
    }

    pub fn forward_cached<'c>(&self, input: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        assert_eq!(input.len(), self.in_dim(), "MLP input width");
        cache.input.clear();
        cache.input.extend_from_slice(input);
        cache.pre.resize(self.layers.len(), Vec::new());
        cache.post.resize(self.layers.len(), Vec::new());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let mut pre = core::mem::take(&mut cache.pre[i]);
            pre.resize(layer.out_dim, 0.0);
            {
                let x: &[f64] = if i == 0 { &cache.input } else { &cache.post[i - 1] };
                layer.forward(x, &mut pre);
            }
            let post = &mut cache.post[i];
            post.clear();
            post.extend(pre.iter().map(|&v| act.apply(v)));
            cache.pre[i] = pre;
        }
        &cache.post[self.layers.len() - 1]
    }

    /// Backpropagates `d_out` through the cached pass into `grads`; writes
    /// the input gradient to `d_input` when given.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: &[f64],
        grads: &mut [DenseGrad],
        d_input: Option<&mut [f64]>,
    ) {
        let mut delta: Vec<f64> = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            for ((d, &x), &y) in delta.iter_mut().zip(&cache.pre[i]).zip(&cache.post[i]) {
                *d *= act.derivative(x, y);
            }
            let input: &[f64] = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            grads[i].accumulate(&delta, input);
            if i == 0 && d_input.is_none() {
                break;
            }
            let layer = &self.layers[i];
            let mut next = vec![0.0; layer.in_dim];
            for (o, &g) in delta.iter().enumerate() {
                axpy(g, layer.row(o), &mut next);
            }
            delta = next;
        }
        if let Some(d_input) = d_input {
            d_input.copy_from_slice(&delta);
        }
    }
}
