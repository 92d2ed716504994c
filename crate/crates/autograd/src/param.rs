//! Named, trainable parameters and the Adam optimizer.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::tensor::Tensor;
use crate::var::Var;

/// A named trainable tensor. Reading hands out the current leaf; an
/// optimizer step swaps in a fresh leaf, so readers never observe a
/// half-written update.
pub struct Param {
    name: String,
    var: RwLock<Var>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Arc<Param> {
        Arc::new(Param { name: name.into(), var: RwLock::new(Var::leaf(value)) })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current leaf, for use in a forward pass.
    pub fn var(&self) -> Var {
        self.var.read().expect("parameter lock poisoned").clone()
    }

    pub fn value(&self) -> Tensor {
        self.var().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var().shape().to_vec()
    }

    pub fn set(&self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.shape().as_slice(),
            "parameter {} cannot change shape",
            self.name
        );
        *self.var.write().expect("parameter lock poisoned") = Var::leaf(value);
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

/// Ordered collection of parameters, built up by module constructors.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Arc<Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Arc<Param> {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name() != name),
            "duplicate parameter name {name}"
        );
        let p = Param::new(name, value);
        self.params.push(Arc::clone(&p));
        p
    }

    pub fn params(&self) -> &[Arc<Param>] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Param>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name().to_string(), p.value())).collect()
    }

    /// Restores values from a snapshot; every stored parameter must be present.
    pub fn restore(&self, values: &HashMap<String, Tensor>) -> Result<(), String> {
        for p in &self.params {
            let v = values.get(p.name()).ok_or_else(|| p.name().to_string())?;
            if v.shape() != p.shape().as_slice() {
                return Err(p.name().to_string());
            }
        }
        for p in &self.params {
            p.set(values[p.name()].clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// Adam with bias correction, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step: 0, second: first.clone(), first }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn set_state(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) {
        assert_eq!(first.len(), self.first.len());
        assert_eq!(second.len(), self.second.len());
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// Applies one update. `grads[i]` belongs to `store.params()[i]`; `None` counts as zero.
    pub fn step(&mut self, store: &ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params().iter().enumerate() {
            let value = p.value();
            let zeros;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(value.shape().to_vec());
                    &zeros
                }
            };
            let m = self.first[i].zip_with(g, |m, g| beta1 * m + (1.0 - beta1) * g);
            let v = self.second[i].zip_with(g, |v, g| beta2 * v + (1.0 - beta2) * g * g);
            let update = m.zip_with(&v, |m, v| lr * (m / bc1) / ((v / bc2).sqrt() + eps));
            p.set(value.sub(&update));
            self.first[i] = m;
            self.second[i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0, 0.9), &store);
        opt.step(&store, &[Some(Tensor::new(vec![2], vec![3.0, -0.5]))]);
        let v = p.value();
        assert!((v.data()[0] - 0.9).abs() < 1e-7);
        assert!((v.data()[1] + 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::new(vec![1], vec![2.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0, 0.9), &store);
        opt.step(&store, &[None]);
        assert_eq!(p.value().item(), 2.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::new(vec![1], vec![5.0]));
        let mut opt = Adam::new(AdamConfig::new(0.05, 0.0, 0.9), &store);
        for _ in 0..500 {
            let g = p.value().scale(2.0);
            opt.step(&store, &[Some(g)]);
        }
        assert!(p.value().item().abs() < 0.1);
    }
}
