//! First-order optimizers over the trainable entries of a [`ParamStore`].

use std::collections::HashMap;

use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub trait Optimizer<T: Scalar> {
    /// Applies one update from the accumulated gradients. Non-trainable
    /// entries are left untouched.
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()>;
}

/// Stochastic gradient descent with heavy-ball momentum and L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self { lr, momentum, weight_decay, velocity: HashMap::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(value.shape()));
            for ((p, &g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                let g = g + self.weight_decay * *p;
                *vel = self.momentum * *vel + g;
                *p -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// RMSProp without momentum.
#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub lr: T,
    pub alpha: T,
    pub eps: T,
    square_avg: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, alpha: T::lit(0.99), eps: T::lit(1e-8), square_avg: HashMap::new() }
    }
}

impl<T: Scalar> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let s = self.square_avg.entry(id).or_insert_with(|| Tensor::zeros(value.shape()));
            for ((p, &g), sq) in value.data_mut().iter_mut().zip(grad.data()).zip(s.data_mut()) {
                *sq = self.alpha * *sq + (T::one() - self.alpha) * g * g;
                *p -= self.lr * g / (sq.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), t: 0, moments: HashMap::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
