//! Named trainable parameters and the adaptive-moment optimizer that updates them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bias-corrected adaptive-moment settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter, plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    pub step: u64,
}

/// Ordered, uniquely named parameters. Iteration order is insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
    optimizer: OptimizerState<S>,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            optimizer: OptimizerState {
                first_moment: Vec::new(),
                second_moment: Vec::new(),
                step: 0,
            },
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.optimizer
            .first_moment
            .push(vec![S::zero(); tensor.len()]);
        self.optimizer
            .second_moment
            .push(vec![S::zero(); tensor.len()]);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn optimizer_state(&self) -> &OptimizerState<S> {
        &self.optimizer
    }

    pub fn set_optimizer_state(&mut self, state: OptimizerState<S>) -> Result<()> {
        let fits = |moments: &[Vec<S>]| {
            moments.len() == self.tensors.len()
                && moments
                    .iter()
                    .zip(&self.tensors)
                    .all(|(m, t)| m.len() == t.len())
        };
        if !fits(&state.first_moment) || !fits(&state.second_moment) {
            return Err(Error::config(
                "optimizer moments do not match parameter shapes",
            ));
        }
        self.optimizer = state;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn has_gradients(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = S::of(max_norm / norm);
            for t in &mut self.tensors {
                if let Some(g) = t.grad() {
                    let scaled: Vec<S> = g.iter().map(|&x| x * scale).collect();
                    t.clear_grad();
                    t.accumulate_grad(&scaled);
                }
            }
        }
        norm
    }

    /// One bias-corrected adaptive-moment step (minimization), then clears gradients.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn adam_step(&mut self, config: &AdamConfig) -> Result<()> {
        if !self.has_gradients() {
            return Err(Error::usage(
                "optimizer step without any populated gradient",
            ));
        }
        self.optimizer.step += 1;
        let t = self.optimizer.step as i32;
        let b1 = S::of(config.beta1);
        let b2 = S::of(config.beta2);
        let one = S::one();
        let correction1 = S::of(1.0 - config.beta1.powi(t));
        let correction2 = S::of(1.0 - config.beta2.powi(t));
        let lr = S::of(config.learning_rate);
        let eps = S::of(config.epsilon);
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            let grad = tensor.grad().map(<[S]>::to_vec);
            let m = &mut self.optimizer.first_moment[i];
            let v = &mut self.optimizer.second_moment[i];
            let values = tensor.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Copy at another precision. Optimizer moments are converted as well.
    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let conv = |m: &Vec<Vec<S>>| -> Vec<Vec<T>> {
            m.iter()
                .map(|row| row.iter().map(|x| T::of(x.as_f64())).collect())
                .collect()
        };
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            optimizer: OptimizerState {
                first_moment: conv(&self.optimizer.first_moment),
                second_moment: conv(&self.optimizer.second_moment),
                step: self.optimizer.step,
            },
        }
    }
}
