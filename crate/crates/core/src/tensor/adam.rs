use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter in place and clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = grad.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value));
        s.param_mut("w").unwrap().grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let mut s = store_with(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        let w = s.get("w").unwrap().item();
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
        assert!(s.param("w").unwrap().grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(0.7, 0.0);
        Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn missing_grad_names_param() {
        let mut s = ParamStore::new();
        s.insert("encoder.stem.weight", Tensor::scalar(1.0));
        let err = Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("encoder.stem.weight"));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = ParamStore::new();
        s.insert("book", Tensor::scalar(1.0));
        s.set_trainable("book", false);
        Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("book").unwrap().item(), 1.0);
    }

    #[test]
    fn descends_a_quadratic() {
        // loss = (w - 3)²
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig::default());
        let loss = |w: f64| (w - 3.0).powi(2);
        let mut prev = loss(0.0);
        for _ in 0..2 {
            let w = s.get("w").unwrap().item();
            s.param_mut("w").unwrap().grad = Some(Tensor::scalar(2.0 * (w - 3.0)));
            adam.step(&mut s, 0.01).unwrap();
            let now = loss(s.get("w").unwrap().item());
            assert!(now < prev);
            prev = now;
        }
    }
}
