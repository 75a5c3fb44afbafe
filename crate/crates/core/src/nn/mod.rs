//! Parameter storage, forward-pass context, layers and optimiser.

mod layers;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use crate::autograd::{Grads, Graph, ParamKey, Var};
use crate::error::{DtcError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use layers::{BatchNorm2d, Conv2d, Embedding, Gru, Linear, SnConv2d, SnLinear};
pub use optim::{Adam, AdamConfig};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named parameters of one network plus its non-trainable state (running
/// statistics, power-iteration vectors).
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: RwLock<Vec<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            buffer_names: self.buffer_names.clone(),
            buffers: RwLock::new(self.buffers.read().expect("buffer lock").clone()),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: RwLock::new(Vec::new()),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_names.contains(&name), "duplicate buffer {name}");
        self.buffer_names.push(name);
        let buffers = self.buffers.get_mut().expect("buffer lock");
        buffers.push(value);
        BufferId(buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> Tensor<T> {
        self.buffers.read().expect("buffer lock")[id.0].clone()
    }

    pub fn set_buffer(&self, id: BufferId, value: Tensor<T>) {
        self.buffers.write().expect("buffer lock")[id.0] = value;
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        (self.uid, id.0)
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Parameters then buffers, in registration order, with buffer names
    /// prefixed by `@`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        let buffers = self.buffers.read().expect("buffer lock");
        out.extend(
            self.buffer_names
                .iter()
                .map(|n| format!("@{n}"))
                .zip(buffers.iter().cloned()),
        );
        out
    }

    /// Overwrites every parameter and buffer from `lookup`; shapes must match.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = lookup(name)
                .ok_or_else(|| DtcError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != value.shape() {
                return Err(DtcError::Checkpoint(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    value.shape(),
                    t.shape()
                )));
            }
            *value = t;
        }
        let buffers = self.buffers.get_mut().expect("buffer lock");
        for (name, value) in self.buffer_names.iter().zip(buffers.iter_mut()) {
            let key = format!("@{name}");
            let t = lookup(&key)
                .ok_or_else(|| DtcError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != value.shape() {
                return Err(DtcError::Checkpoint(format!("buffer {name}: shape mismatch")));
            }
            *value = t;
        }
        Ok(())
    }

    /// Content hash of every parameter and buffer (used to prove immutability).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }

    /// Gradients for this store's parameters, zero-filled where absent.
    pub fn collect_grads(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        (0..self.values.len())
            .map(|i| {
                grads
                    .param((self.uid, i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.values[i].shape()))
            })
            .collect()
    }

    /// Parameters only, in registration order.
    pub fn params(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// `self ← decay·self + (1 − decay)·src` for parameters; buffers are copied.
    pub fn ema_update(&mut self, src: &ParamStore<T>, decay: f64) {
        assert_eq!(self.names, src.names, "EMA over different networks");
        let (d, r) = (T::lit(decay), T::lit(1.0 - decay));
        for (a, b) in self.values.iter_mut().zip(&src.values) {
            *a = a.zip_map(b, |x, y| d * x + r * y);
        }
        *self.buffers.get_mut().expect("buffer lock") = src.buffers.read().expect("buffer lock").clone();
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: RwLock::new(
                self.buffers
                    .read()
                    .expect("buffer lock")
                    .iter()
                    .map(Tensor::cast)
                    .collect(),
            ),
        }
    }
}

/// How a forward pass treats parameters and state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Parameters receive gradients; batch statistics; running state updated.
    Train,
    /// Like `Train` but parameters are constants (value-only training-mode pass).
    TrainNoGrad,
    /// Running statistics, frozen state, constant parameters.
    Eval,
    /// Running statistics and frozen state, but parameters receive gradients.
    EvalGrad,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::TrainNoGrad)
    }

    pub fn param_grads(self) -> bool {
        matches!(self, Mode::Train | Mode::EvalGrad)
    }
}

/// Forward-pass context binding a graph to one parameter store.
pub struct Ctx<'g, 's, T: Scalar> {
    pub g: &'g Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
}

impl<'g, 's, T: Scalar> Ctx<'g, 's, T> {
    pub fn new(g: &'g Graph<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx { g, store, mode }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.g
            .param(self.store.key(id), self.store.get(id), self.mode.param_grads())
    }
}

/// He-normal initialisation for a fan-in.
pub(crate) fn he_normal<T: Scalar, R: rand::Rng>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier-uniform initialisation.
pub(crate) fn xavier<T: Scalar, R: rand::Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}
