use serde::{Deserialize, Serialize};
use vesselseg_autograd::Tensor;

use super::stored;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// First and second moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    #[serde(with = "stored")]
    pub m: Vec<Tensor<f32>>,
    #[serde(with = "stored")]
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64, cfg: &AdamConfig) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.eps * c2.sqrt()) as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, (m, v)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                *m = b1 * *m + (1.0 - b1) * gd[i];
                *v = b2 * *v + (1.0 - b2) * gd[i] * gd[i];
                pd[i] -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut p = vec![Tensor::from_fn([2, 3, 1, 1], |[a, b, _, _]| (a * 3 + b) as f32 * 0.1 - 0.2)];
        let before = p.clone();
        let g = vec![Tensor::full([2, 3, 1, 1], 0.5f32)];
        let mut st = AdamState::new(&p);
        st.update(&mut p, &g, 0.0, &AdamConfig::default());
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::full([1, 1, 1, 4], 1.0f32)];
        let g = vec![Tensor::new([1, 1, 1, 4], vec![2.0, -3.0, 0.5, 1e-3])];
        AdamState::new(&p).update(&mut p, &g, 0.01, &AdamConfig { beta1: 0.5, beta2: 0.9, eps: 1e-12 });
        for (v, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0, -1.0]) {
            assert!((v - (1.0 + 0.01 * s)).abs() < 1e-6, "{v}");
        }
    }
}
