use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 6.25e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { config, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients must be finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Length(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (g, t) in grads.iter().zip(params.tensors()) {
            if g.len() != t.numel() {
                return Err(Error::Length(format!("gradient of {} for parameter of {}", g.len(), t.numel())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (lr, b1, b2, eps) = (T::of(c.lr), T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                *p = *p * decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", Tensor::scalar(p));
        s
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: wd, ..AdamWConfig::default() }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        for _ in 0..5 {
            opt.step(&mut s, &[vec![0.0]]).unwrap();
        }
        assert_eq!(s.get(0).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        opt.step(&mut s, &[vec![1.0]]).unwrap();
        // m̂ = v̂ = 1, so the update is lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(0).data()[0] - want).abs() < 1e-15);
        assert!((s.get(0).data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(cfg(0.1, 0.01), &s);
        for _ in 0..3 {
            opt.step(&mut s, &[vec![0.0]]).unwrap();
        }
        let want = 2.0 * (1.0 - 0.1 * 0.01f64).powi(3);
        assert!((s.get(0).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &s);
        let err = opt.step(&mut s, &[vec![f64::NAN]]).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient");
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
