use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one [`ParamSet`], keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()));
            v.insert(name, Tensor::zeros(t.shape()));
        }
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &HashMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = T::lit(c.learning_rate * bc2.sqrt() / bc1);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps * bc2.sqrt()));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        if c.learning_rate == 0.0 {
            return;
        }
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
            }
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= step_size * mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap(),
        );
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        let grads = HashMap::from([(
            "w".to_string(),
            Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.5]).unwrap(),
        )]);
        opt.update(&mut ps, &grads);
        let w = ps.get("w").unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::scalar(0.25));
        let before = ps.clone();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
            &ps,
        );
        opt.update(
            &mut ps,
            &HashMap::from([("w".to_string(), Tensor::scalar(1.0))]),
        );
        assert_eq!(ps, before);
    }
}
