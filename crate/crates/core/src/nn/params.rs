use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Scalar, Tensor};

/// A trainable tensor with its accumulated gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Ordered collection of parameters; ids are insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn get(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Add one backward pass worth of gradients onto the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(grads.param_slots()) {
            if let Some(g) = g {
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Flat copy of every value, in id order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for p in params.iter_mut() {
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Glorot/Xavier uniform draw on `(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
/// For a matrix the fans are `(rows, cols)`; vectors use their length for both.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [.., r, c] => (*r, *c),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data file, in elements.
    pub offset: usize,
}

pub const PARAMS_FILE: &str = "params.bin";

/// Write every parameter value as little-endian `f32` into `dir/params.bin` and
/// return the manifest entries describing the layout.
pub fn write_params<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::with_capacity(store.num_weights() * 4);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        for &x in p.value.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        offset += p.value.len();
    }
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Load values written by [`write_params`] into an existing store whose names and
/// shapes must match `entries` exactly.
pub fn read_params<T: Scalar>(
    store: &mut ParamStore<T>,
    entries: &[TensorEntry],
    dir: &Path,
) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if entries.len() != store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest lists {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    let total: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 4 {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            total * 4
        )));
    }
    for (p, e) in store.iter_mut().zip(entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` {:?} does not match model tensor `{}` {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let end = e.offset + n;
        if end * 4 > bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` runs past end of file",
                e.name
            )));
        }
        for (i, chunk) in bytes[e.offset * 4..end * 4].chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            p.value.data_mut()[i] = T::lit(x as f64);
        }
    }
    Ok(())
}
