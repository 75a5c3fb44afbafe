use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{DtcError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one instance per parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .named_tensors()
            .into_iter()
            .take(store.len())
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((p, g), (m, v)) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] = pd[i] - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }

    /// Moment tensors and the step counter for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "step".to_string(),
            Tensor::scalar(T::lit(self.step as f64)),
        )];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("m.{i}"), m.clone()));
            out.push((format!("v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let missing = |n: &str| DtcError::Checkpoint(format!("optimizer state {n} missing"));
        self.step = lookup("step").ok_or_else(|| missing("step"))?.item().as_f64() as u64;
        for i in 0..self.m.len() {
            let m = lookup(&format!("m.{i}")).ok_or_else(|| missing("m"))?;
            let v = lookup(&format!("v.{i}")).ok_or_else(|| missing("v"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(DtcError::Checkpoint(format!("optimizer slot {i} shape mismatch")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
