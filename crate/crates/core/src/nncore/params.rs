//! Named parameter collection and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nncore::tensor::Tensor;

/// Handle into a [`ParamSet`]; stable for the life of the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// A learned weight with its gradient and Adam moment estimates, all of
/// equal shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

/// Insertion-ordered, name-indexed collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let shape = value.shape().to_vec();
        let idx = self.items.len();
        self.by_name.insert(name.clone(), idx);
        self.items.push(Param {
            name,
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
        });
        ParamId(idx)
    }

    /// Convenience: adds a tensor initialized uniformly in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.items[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.items[id.0].value
    }

    pub fn grad_add(&mut self, id: ParamId, delta: &Tensor) {
        self.items[id.0].grad.add_assign(delta);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.fill(0.0);
        }
    }

    /// Parameter names in sorted order, the canonical checkpoint order.
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.items.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names
    }

    /// Replaces a parameter's tensors, e.g. when growing an embedding
    /// table. Value, moments, and grad are all replaced; shapes must agree.
    pub fn replace(&mut self, id: ParamId, value: Tensor, adam_m: Tensor, adam_v: Tensor) {
        let shape = value.shape().to_vec();
        assert_eq!(adam_m.shape(), &shape[..]);
        assert_eq!(adam_v.shape(), &shape[..]);
        let p = &mut self.items[id.0];
        p.grad = Tensor::zeros(&shape);
        p.value = value;
        p.adam_m = adam_m;
        p.adam_v = adam_v;
    }
}

/// Adam hyperparameters plus the shared step counter used for bias
/// correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CoreError::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::invalid("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter. Gradients are
/// zeroed afterwards and the step counter advances exactly once.
pub fn adam_step(set: &mut ParamSet, cfg: &mut AdamConfig) -> Result<()> {
    adam_step_filtered(set, cfg, |_| true)
}

/// Adam update restricted to parameters whose name passes `include`;
/// excluded parameters keep their values and moments but still have their
/// gradients cleared.
pub fn adam_step_filtered(
    set: &mut ParamSet,
    cfg: &mut AdamConfig,
    include: impl Fn(&str) -> bool,
) -> Result<()> {
    cfg.validate()?;
    for p in set.iter() {
        if !p.grad.all_finite() {
            return Err(CoreError::numeric(format!(
                "non-finite gradient in parameter '{}'",
                p.name
            )));
        }
    }
    let t = cfg.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in &mut set.items {
        if include(&p.name) {
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let g = p.grad.data();
            let val = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                val[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        p.grad.fill(0.0);
    }
    cfg.step_count = t;
    Ok(())
}

/// Scales all gradients so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. `max_norm == 0` disables
/// clipping.
pub fn clip_global_norm(set: &mut ParamSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in set.iter() {
        for &g in p.grad.data() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for p in &mut set.items {
            p.grad.scale(scale);
        }
    }
    norm
}
