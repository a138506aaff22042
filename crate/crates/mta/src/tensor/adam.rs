//! Named parameter collections and the Adam optimizer.

use indexmap::IndexMap;

use crate::error::{MtaError, Result};

use super::Tensor;

/// Ordered collection of named parameter tensors. Iteration follows insertion
/// order, which fixes both the optimizer update order and the serialization
/// layout.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    items: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { items: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.items.contains_key(&name), "duplicate parameter {name}");
        self.items.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.items.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.items.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.items.keys()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn total_params(&self) -> usize {
        self.items.values().map(Tensor::numel).sum()
    }

    /// Total scalars among parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.items
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub(crate) fn replace(&mut self, name: &str, t: Tensor) {
        *self.items.get_mut(name).expect("replace of unknown parameter") = t;
    }

    pub fn zero_grads(&self) {
        for t in self.items.values() {
            t.zero_grad();
        }
    }

    /// Replace every tensor with a detached constant: the values stay, the
    /// graph tracking stops. Frozen sets cannot be trained further but still
    /// let gradients flow through them to other tensors.
    pub fn freeze(&mut self) {
        let names: Vec<String> = self.items.keys().cloned().collect();
        for name in names {
            let d = self.items[&name].detached();
            self.replace(&name, d);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.items.values().all(|t| !t.requires_grad())
    }

    /// Order-sensitive FNV-1a digest over names, shapes, and value bytes.
    /// Used to verify that "frozen" really means untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x1_0000_01b3);
            }
        };
        for (name, t) in &self.items {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// Adam with bias correction. Moment buffers are aligned to the parameter
/// set's insertion order, so the same set must be passed to every step.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Reads the gradient accumulated on every parameter,
    /// replaces each tensor with its updated value, and clears gradients
    /// (the new tensors start without any). Errors if a parameter has no
    /// gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for (i, name) in names.iter().enumerate() {
            let tensor = params.get(name).expect("parameter disappeared");
            let grad = tensor.grad().ok_or_else(|| {
                MtaError::Graph(format!("adam step: parameter {name} has no gradient"))
            })?;
            let mut data = tensor.data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            let shape = tensor.shape().to_vec();
            params.replace(name, Tensor::param(data, &shape)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::param(vec![value], &[1]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_almost_lr() {
        // With g=1 the bias-corrected moments are both exactly 1 on step 1,
        // so the update is lr/(1+eps), within 1e-9 of lr.
        let mut params = single_param(1.0);
        params.get("w").unwrap().accum_grad(&[1.0]);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params).unwrap();
        let got = params.get("w").unwrap().data()[0];
        assert!((got - (1.0 - cfg.lr)).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single_param(0.75);
        params.get("w").unwrap().accum_grad(&[0.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.75);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = single_param(0.5);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params).unwrap_err();
        assert!(matches!(err, MtaError::Graph(_)));
    }

    #[test]
    fn update_sequence_is_deterministic() {
        let run = || {
            let mut params = single_param(0.3);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &params);
            for k in 0..25 {
                params.get("w").unwrap().accum_grad(&[(k as f64 * 0.37).sin()]);
                adam.step(&mut params).unwrap();
            }
            params.get("w").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn checksum_changes_with_values() {
        let a = single_param(1.0);
        let b = single_param(1.0 + 1e-15);
        assert_eq!(a.checksum(), single_param(1.0).checksum());
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn freeze_stops_tracking_but_keeps_values() {
        let mut p = single_param(0.9);
        assert!(!p.is_frozen());
        p.freeze();
        assert!(p.is_frozen());
        assert_eq!(p.get("w").unwrap().data()[0], 0.9);
    }
}
