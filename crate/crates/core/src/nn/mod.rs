//! Minimal convolutional network engine with hand-written backward passes.

mod layers;
mod optim;
mod tensor;

use base64::Engine as _;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use layers::{Cache, Conv2d, Layer, Padding};
pub use optim::{Adam, AdamState};
pub use tensor::Tensor;

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name.into());
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self, i: usize) -> &[T] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads { tensors: self.values.iter().map(|v| vec![T::zero(); v.len()]).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.iter_scalars().all(|v| v.is_finite())
    }

    pub fn to_record(&self) -> Vec<TensorRecord> {
        (0..self.len())
            .map(|i| {
                let mut bytes = Vec::with_capacity(self.values[i].len() * T::BYTES);
                self.values[i].iter().for_each(|v| v.write_le(&mut bytes));
                TensorRecord {
                    name: self.names[i].clone(),
                    shape: self.shapes[i].clone(),
                    dtype: T::NAME.to_string(),
                    data: base64::engine::general_purpose::STANDARD.encode(bytes),
                }
            })
            .collect()
    }

    /// Overwrites the values from a record; names and shapes must match.
    pub fn load_record(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.name != self.names[i] || r.shape != self.shapes[i] {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    self.names[i], self.shapes[i], r.name, r.shape
                )));
            }
            if r.dtype != T::NAME {
                return Err(Error::CorruptCheckpoint(format!("tensor {} has dtype {}, expected {}", r.name, r.dtype, T::NAME)));
            }
            self.values[i] = decode_values(&r.data, self.values[i].len())
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor {}: {e}", r.name)))?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn decode_values<T: Scalar>(b64: &str, expected: usize) -> std::result::Result<Vec<T>, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| e.to_string())?;
    if bytes.len() != expected * T::BYTES {
        return Err(format!("{} bytes for {expected} values", bytes.len()));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

pub(crate) fn encode_values<T: Scalar>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    values.iter().for_each(|v| v.write_le(&mut bytes));
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Serialized parameter tensor: little-endian values, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

/// Gradient buffers mirroring a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = T::zero()));
    }

    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert!(a < b);
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = T> + '_ {
        self.tensors.iter().flatten().copied()
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, std)` weights, zero biases.
    Normal(f64),
    /// `N(0, sqrt(2 / fan_in))` weights, zero biases.
    He,
}

/// Incrementally assembles layers and their parameters.
pub struct Builder<'r, T, R> {
    params: ParamSet<T>,
    rng: &'r mut R,
    init: Init,
}

impl<'r, T: Scalar, R: Rng> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R, init: Init) -> Self {
        Self { params: ParamSet::new(), rng, init }
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, padding: Padding) -> Layer {
        let fan_in = in_c * kernel * kernel;
        let std = match self.init {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("valid init std");
        let idx = self.params.len();
        let weights = (0..out_c * fan_in).map(|_| T::c(normal.sample(&mut *self.rng))).collect();
        let weight = self.params.push(format!("conv{idx}.weight"), vec![out_c, in_c, kernel, kernel], weights);
        let bias = self.params.push(format!("conv{idx}.bias"), vec![out_c], vec![T::zero(); out_c]);
        Layer::Conv(Conv2d { weight, bias, in_channels: in_c, out_channels: out_c, kernel, stride, pad, padding })
    }

    pub fn finish(self, layers: Vec<Layer>) -> Network<T> {
        Network { layers, params: self.params }
    }
}

/// Caches recorded by one training-mode forward pass.
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// A feed-forward stack of layers plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer>,
    params: ParamSet<T>,
}

impl<T: Scalar> Network<T> {
    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Output `(channels, height, width)` for an input, `None` if too small.
    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let mut d = (c, h, w);
        for l in &self.layers {
            d = l.output_dims(d.0, d.1, d.2)?;
            if d.1 == 0 || d.2 == 0 {
                return None;
            }
        }
        Some(d)
    }

    /// Inference pass; nothing is retained.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&self.params, h, false).0;
        }
        h
    }

    /// Training pass, returning the trace needed by [`Network::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Trace<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (next, cache) = l.forward(&self.params, h, true);
            h = next;
            caches.push(cache.expect("training forward records a cache"));
        }
        (h, Trace { caches })
    }

    /// Propagates `dy` back to the input; parameter gradients are
    /// accumulated into `grads` when given.
    pub fn backward(&self, trace: Trace<T>, dy: Tensor<T>, mut grads: Option<&mut Grads<T>>) -> Tensor<T> {
        let mut g = dy;
        for (l, c) in self.layers.iter().zip(trace.caches).rev() {
            g = l.backward(&self.params, c, g, grads.as_deref_mut());
        }
        g
    }

    /// Like [`Network::backward`] when the input gradient is not needed.
    pub fn backward_params(&self, trace: Trace<T>, dy: Tensor<T>, grads: &mut Grads<T>) {
        let mut g = dy;
        let mut caches = trace.caches;
        let Some(first) = (!caches.is_empty()).then(|| caches.remove(0)) else { return };
        for (l, c) in self.layers[1..].iter().zip(caches).rev() {
            g = l.backward(&self.params, c, g, Some(grads));
        }
        self.layers[0].backward_params(&self.params, first, g, grads);
    }
}

#[cfg(test)]
mod tests;
