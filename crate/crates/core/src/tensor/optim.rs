use std::collections::BTreeMap;

use super::element::Element;
use super::{Result, Tensor, TensorError};

/// Named model parameter. A parameter with `trainable == false` is never
/// touched by the optimizer (bitwise identical before and after any step).
#[derive(Debug, Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Ordered parameter collection keyed by hierarchical name. Iteration is
/// always in sorted name order, which the checkpoint format and the frozen
/// digest rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Element> {
    params: BTreeMap<String, Parameter<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>, trainable: bool) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<E> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Total element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Total element count across trainable parameters only.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily at zero; the step counter is shared across parameters.
pub struct Adam<E: Element> {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update using the `grad` buffers stored on each trainable
    /// parameter. Parameters without a gradient are skipped entirely;
    /// non-trainable parameters are never touched.
    pub fn step(&mut self, params: &mut ParamSet<E>) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let beta1 = E::from_f64(c.beta1);
        let beta2 = E::from_f64(c.beta2);
        let one_m_beta1 = E::from_f64(1.0 - c.beta1);
        let one_m_beta2 = E::from_f64(1.0 - c.beta2);
        let lr = E::from_f64(c.lr);
        let eps = E::from_f64(c.eps);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);

        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            if grad.len() != p.tensor.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.tensor.shape().to_vec(),
                    right: vec![grad.len()],
                });
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![E::ZERO; grad.len()], vec![E::ZERO; grad.len()]));
            let data = p.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + one_m_beta1 * g;
                v[i] = beta2 * v[i] + one_m_beta2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
