use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::error::{DiffError, Result};
use super::tape::Gradients;
use super::tensor::Tensor;
use super::Trainable;
use crate::scalar::Scalar;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct Adam<T: Scalar = f64> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step_count: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates, in place, every parameter of `model` that has a gradient.
    ///
    /// Parameters without a gradient entry (frozen slots) are left alone.
    pub fn step<M: Trainable<T> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &Gradients<T>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut err = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != param.shape() {
                err.get_or_insert(DiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
                return;
            }
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        err.map_or(Ok(()), Err)
    }
}
