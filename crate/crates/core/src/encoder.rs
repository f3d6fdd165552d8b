//! Two-layer feedforward encoder `input → hidden → embedding` with
//! hand-written backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softsign,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softsign => x / (1.0 + x.abs()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softsign => "softsign",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 64,
            embedding_dim: crate::embedding::DEFAULT_EMBEDDING_DIM,
            activation: Activation::Tanh,
        }
    }
}

/// Weights are stored output-major: `w1` is `hidden × input`, `w2` is
/// `embedding × hidden`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
    generation: u64,
}

// The generation counter is bookkeeping for cache validation, not part of the model.
impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
            && self.activation == other.activation
    }
}

/// Activations retained by [`EncoderParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: Array2<f64>,
    pre_hidden: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl EncoderParams {
    /// Uniform initialization in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || config.hidden_dim == 0 || config.embedding_dim == 0 {
            return Err(Error::domain("encoder dimensions must be positive"));
        }
        let mut layer = |out: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-s..s))
        };
        let w1 = layer(config.hidden_dim, input_dim);
        let w2 = layer(config.embedding_dim, config.hidden_dim);
        Ok(EncoderParams {
            b1: Array1::zeros(config.hidden_dim),
            b2: Array1::zeros(config.embedding_dim),
            w1,
            w2,
            activation: config.activation,
            generation: 0,
        })
    }

    pub fn from_weights(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        check_dim("encoder b1", w1.nrows(), b1.len())?;
        check_dim("encoder w2 fan-in", w1.nrows(), w2.ncols())?;
        check_dim("encoder b2", w2.nrows(), b2.len())?;
        Ok(EncoderParams {
            w1,
            b1,
            w2,
            b2,
            activation,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Encodes a batch of feature rows, keeping the activations.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_dim("encoder input", self.input_dim(), features.ncols())?;
        let pre_hidden = features.dot(&self.w1.t()) + &self.b1;
        let act = self.activation;
        let hidden = pre_hidden.mapv(|v| act.apply(v));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        Ok((
            out,
            ForwardCache {
                generation: self.generation,
                input: features.to_owned(),
                pre_hidden,
                hidden,
            },
        ))
    }

    pub fn embed(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(features).map(|(out, _)| out)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_embeddings: ArrayView2<'_, f64>) -> Result<EncoderGrads> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.generation,
            });
        }
        check_dim("encoder upstream rows", cache.hidden.nrows(), grad_embeddings.nrows())?;
        check_dim("encoder upstream dim", self.embedding_dim(), grad_embeddings.ncols())?;
        let w2 = grad_embeddings.t().dot(&cache.hidden);
        let b2 = grad_embeddings.sum_axis(Axis(0));
        let act = self.activation;
        let mut delta = grad_embeddings.dot(&self.w2);
        delta.zip_mut_with(&cache.pre_hidden, |d, &z| *d *= act.derivative(z));
        let w1 = delta.t().dot(&cache.input);
        let b1 = delta.sum_axis(Axis(0));
        Ok(EncoderGrads { w1, b1, w2, b2 })
    }

    /// `θ ← θ − lr·∇θ`; invalidates outstanding caches.
    pub fn sgd_step(&mut self, grads: &EncoderGrads, lr: f64) {
        self.w1.scaled_add(-lr, &grads.w1);
        self.b1.scaled_add(-lr, &grads.b1);
        self.w2.scaled_add(-lr, &grads.w2);
        self.b2.scaled_add(-lr, &grads.b2);
        self.generation += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    /// Inverse of [`Self::to_flat`] using `self` for the shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim("flat encoder parameters", self.to_flat().len(), flat.len())?;
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for v in out
            .w1
            .iter_mut()
            .chain(out.b1.iter_mut())
            .chain(out.w2.iter_mut())
            .chain(out.b2.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        out.generation = 0;
        Ok(out)
    }
}

impl EncoderGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }
}
