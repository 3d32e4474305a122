//! Parameter storage and the AdamW optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    /// Whether weight decay applies (off for biases and norm gains).
    pub decay: bool,
}

/// Named parameters with their Adam moment accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), step: 0 }
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            decay,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same parameters at another precision; moments are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast(), p.decay);
        }
        out.step = self.step;
        out
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    /// Parameters without a gradient still decay.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (id, g) in grads.params() {
            if g.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    store.get(id).name,
                    store.value(id).shape()
                )));
            }
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.param_norm().as_f64();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let clip = T::of(clip);
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.decay && self.weight_decay > 0.0 {
                let f = T::of(1.0 - lr * self.weight_decay);
                for x in p.value.data_mut() {
                    *x = *x * f;
                }
            }
            let Some(g) = grads.param(ParamId(i)) else { continue };
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for (((x, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                let gi = gi * clip;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *x = *x - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}
