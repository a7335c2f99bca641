//! Adam with inverse-square-root warmup.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`; zero at step 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { peak: 6.8e-4, warmup: 4000 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step == 0 {
            return 0.0;
        }
        let (s, w) = (step as f64, self.warmup.max(1) as f64);
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err("adam", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if let Some((i, j)) = grads.iter().enumerate().find_map(|(i, g)| g.first_non_finite().map(|j| (i, j))) {
            return Err(Error::NonFinite { context: format!("gradient of {}", store.name(store.ids().nth(i).unwrap())), index: j });
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let step_size = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(cfg.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[i].data();
            if g.len() != p.len() {
                return Err(shape_err("adam", format!("gradient {i} has {} values for {}", g.len(), p.len())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = b1t * m[k] + ob1 * g[k];
                v[k] = b2t * v[k] + ob2 * g[k] * g[k];
                p[k] -= step_size * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(4000) - 6.8e-4).abs() < 1e-15);
        assert!((s.at(16000) - 3.4e-4).abs() < 1e-15);
        assert!((s.at(2000) - 3.4e-4).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut st = AdamState::new(&store);
        let g = vec![Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap()];
        st.update(&mut store, &g, 0.1, &AdamConfig::default()).unwrap();
        let x = store.tensors()[0].data();
        assert!((x[0] - 0.9).abs() < 1e-9 && (x[1] + 0.9).abs() < 1e-9, "{x:?}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[3]));
        let mut st = AdamState::new(&store);
        let g = vec![Tensor::from_f64(&[3], &[0.0, f64::NAN, 0.0]).unwrap()];
        let err = st.update(&mut store, &g, 0.1, &AdamConfig::default()).unwrap_err().to_string();
        assert!(err.contains('w') && err.contains('1'), "{err}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g: Vec<Tensor<f64>> = vec![Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
