use serde::{Deserialize, Serialize};

use super::{decode_values, encode_values, Grads, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |_| (0..params.len()).map(|i| vec![T::zero(); params.values(i).len()]).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let bc1 = T::one() - T::c(self.beta1.powi(t));
        let bc2 = T::one() - T::c(self.beta2.powi(t));
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        for i in 0..params.len() {
            let g = grads.get(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.values_mut(i).iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m: self.m.iter().map(|x| encode_values(x)).collect(),
            v: self.v.iter().map(|x| encode_values(x)).collect(),
        }
    }

    pub fn restore(params: &ParamSet<T>, state: &AdamState) -> Result<Self> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::CorruptCheckpoint("optimizer state does not match parameters".into()));
        }
        let decode = |src: &[String]| -> Result<Vec<Vec<T>>> {
            src.iter()
                .enumerate()
                .map(|(i, s)| decode_values(s, params.values(i).len()).map_err(Error::CorruptCheckpoint))
                .collect()
        };
        Ok(Self {
            lr: state.lr,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            t: state.t,
            m: decode(&state.m)?,
            v: decode(&state.v)?,
        })
    }
}
