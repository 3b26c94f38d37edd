//! The full language model: n-gram encoder feeding the mixture output layer.
//!
//! Parameters are exposed as an ordered list of named flat tensors. The
//! optimizer, clipping, gradient audits and checkpoints all walk that list,
//! so a gradient set and its parameter set always enumerate identically.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::encoder::{self, EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::output_layer::{self, ForwardCache, LossValue, MixtureConfig, OutputParams};
use crate::scalar::Scalar;

/// Read-only view of one named tensor in row-major order.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one named tensor in row-major order.
#[derive(Debug)]
pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<'a, T> TensorRef<'a, T> {
    pub fn matrix(name: impl Into<String>, a: &'a Array2<T>) -> Self {
        Self {
            name: name.into(),
            shape: a.shape().to_vec(),
            data: a.as_slice().expect("parameters are kept in standard layout"),
        }
    }

    pub fn vector(name: impl Into<String>, a: &'a Array1<T>) -> Self {
        Self {
            name: name.into(),
            shape: vec![a.len()],
            data: a.as_slice().expect("parameters are kept in standard layout"),
        }
    }
}

impl<'a, T: Clone> TensorMut<'a, T> {
    pub fn matrix(name: impl Into<String>, a: &'a mut Array2<T>) -> Self {
        if !a.is_standard_layout() {
            *a = a.as_standard_layout().into_owned();
        }
        Self {
            name: name.into(),
            shape: a.shape().to_vec(),
            data: a.as_slice_mut().expect("standard layout"),
        }
    }

    pub fn vector(name: impl Into<String>, a: &'a mut Array1<T>) -> Self {
        if !a.is_standard_layout() {
            *a = a.as_standard_layout().into_owned();
        }
        Self {
            name: name.into(),
            shape: vec![a.len()],
            data: a.as_slice_mut().expect("standard layout"),
        }
    }
}

/// An ordered collection of named tensors.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn sq_norm(&self) -> T {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|&x| x * x).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig<T> {
    /// Number of preceding tokens the encoder sees.
    pub context: usize,
    /// Input embedding size.
    pub embed_dim: usize,
    pub mixture: MixtureConfig<T>,
}

impl<T: Scalar> ModelConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding size must be positive".into()));
        }
        self.mixture.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    pub config: ModelConfig<T>,
    pub encoder: EncoderParams<T>,
    pub output: OutputParams<T>,
}

/// Gradients mirroring the parameter layout of [`LanguageModel`].
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub encoder: EncoderParams<T>,
    pub output: OutputParams<T>,
    /// Kernel singularities met during the backward pass.
    pub singular: usize,
}

#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    pub encoder: EncoderCache<T>,
    pub output: ForwardCache<T>,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn init<R: Rng>(config: ModelConfig<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = &config.mixture;
        let encoder = EncoderParams::init(config.context, config.embed_dim, m.d, m.vocab, rng)?;
        let output = OutputParams::init(m, rng);
        Ok(Self {
            config,
            encoder,
            output,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.mixture.vocab
    }

    pub fn forward(&self, windows: ArrayView2<usize>) -> Result<ModelCache<T>> {
        let enc = encoder::forward(&self.encoder, windows)?;
        let out = output_layer::forward(&self.config.mixture, &self.output, enc.h.view())?;
        Ok(ModelCache {
            encoder: enc,
            output: out,
        })
    }

    /// `ln p(v | window)` for every window, `B×V`.
    pub fn log_probs(&self, windows: ArrayView2<usize>) -> Result<Array2<T>> {
        Ok(self.forward(windows)?.output.log_posterior)
    }

    pub fn loss(&self, windows: ArrayView2<usize>, targets: &[usize]) -> Result<(LossValue<T>, ModelCache<T>)> {
        let enc = encoder::forward(&self.encoder, windows)?;
        let (value, out) = output_layer::loss(&self.config.mixture, &self.output, enc.h.view(), targets)?;
        Ok((
            value,
            ModelCache {
                encoder: enc,
                output: out,
            },
        ))
    }

    pub fn backward(
        &self,
        windows: ArrayView2<usize>,
        cache: &ModelCache<T>,
        targets: &[usize],
    ) -> Result<ModelGrads<T>> {
        let out = output_layer::backward(&self.config.mixture, &self.output, &cache.output, targets)?;
        let enc = encoder::backward(&self.encoder, windows, &cache.encoder, out.d_inputs.view())?;
        Ok(ModelGrads {
            encoder: enc,
            output: out.params,
            singular: out.singular,
        })
    }

    pub fn loss_and_grad(
        &self,
        windows: ArrayView2<usize>,
        targets: &[usize],
    ) -> Result<(LossValue<T>, ModelGrads<T>, ModelCache<T>)> {
        let (value, cache) = self.loss(windows, targets)?;
        let grads = self.backward(windows, &cache, targets)?;
        Ok((value, grads, cache))
    }

    /// Re-imposes parameter constraints after an update.
    pub fn project(&mut self) {
        self.output.project(&self.config.mixture);
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            encoder: self.encoder.zeros_like(),
            output: self.output.zeros_like(),
            singular: 0,
        }
    }
}

impl<T: Scalar> Parameters<T> for LanguageModel<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = self.encoder.tensors();
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}

impl<T: Scalar> Parameters<T> for ModelGrads<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = self.encoder.tensors();
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}
