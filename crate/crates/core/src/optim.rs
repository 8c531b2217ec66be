//! Decoupled weight-decay adaptive-moment optimizer with linear warmup and
//! cosine decay.

use crate::model::{Grads, ParamSet};
use crate::tensor::{elem, Element, Tensor};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Hyper {
    pub fn new(lr: f64, weight_decay: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Hyper {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate at 1-based step `t`: linear warmup, then cosine decay
    /// to zero.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return self.lr * t as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let progress =
            (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW state: first/second moments parallel to the parameter set, plus the
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub hyper: Hyper,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &ParamSet<T>, hyper: Hyper) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let v = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamW {
            m,
            v,
            step: 0,
            hyper,
        }
    }

    /// One update. Weight decay is decoupled and applies only to parameters
    /// registered with decay (projection matrices; not biases, norms or the
    /// mask token).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<f64> {
        self.step += 1;
        let t = self.step;
        let lr = self.hyper.lr_at(t);
        let b1 = elem::<T>(self.hyper.beta1);
        let b2 = elem::<T>(self.hyper.beta2);
        let one = T::one();
        let eps = elem::<T>(self.hyper.eps);
        let bc1 = elem::<T>(1.0 / (1.0 - self.hyper.beta1.powi(t as i32)));
        let bc2 = elem::<T>(1.0 / (1.0 - self.hyper.beta2.powi(t as i32)));
        let lr_t = elem::<T>(lr);
        let wd = elem::<T>(lr * self.hyper.weight_decay);
        for i in 0..params.len() {
            let g = match grads.get(i) {
                Some(g) => g,
                None => continue,
            };
            let decay = params.decay_flag(i);
            let w = params.tensor_mut_by_index(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((wj, gj), (mj, vj)) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mj = b1 * *mj + (one - b1) * *gj;
                *vj = b2 * *vj + (one - b2) * *gj * *gj;
                let mhat = *mj * bc1;
                let vhat = *vj * bc2;
                let mut upd = lr_t * mhat / (vhat.sqrt() + eps);
                if decay {
                    upd = upd + wd * *wj;
                }
                *wj = *wj - upd;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(v), true);
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut params = single_param(0.7);
        let mut opt = AdamW::new(&params, Hyper::new(0.1, 0.0, 0, 100));
        let mut grads = Grads::new(params.len());
        grads.accumulate(0, &Tensor::scalar(0.0)).unwrap();
        for _ in 0..10 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.tensor_by_index(0).data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_shrinks_weight() {
        // zero gradient, decay lambda, lr eta: w <- w (1 - eta * lambda)
        // (schedule held flat so the raw update rule is visible)
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(&params, Hyper::new(0.1, 0.5, 0, u64::MAX));
        let mut grads = Grads::new(params.len());
        grads.accumulate(0, &Tensor::scalar(0.0)).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert!((params.tensor_by_index(0).data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        // adaptive-moment limit: with constant g, m_hat / sqrt(v_hat) -> 1
        let mut params = single_param(0.0);
        let hyper = Hyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-12,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: u64::MAX,
        };
        let mut opt = AdamW::new(&params, hyper);
        let mut grads = Grads::new(params.len());
        grads.accumulate(0, &Tensor::scalar(3.0)).unwrap();
        let mut prev = params.tensor_by_index(0).data()[0];
        let mut last_delta = 0.0;
        for _ in 0..500 {
            opt.step(&mut params, &grads).unwrap();
            let cur = params.tensor_by_index(0).data()[0];
            last_delta = (prev - cur).abs();
            prev = cur;
        }
        assert!(
            (last_delta - 0.01).abs() < 1e-4,
            "late update magnitude {last_delta}"
        );
    }

    #[test]
    fn warmup_then_cosine() {
        let h = Hyper::new(1.0, 0.0, 10, 110);
        assert!((h.lr_at(1) - 0.1).abs() < 1e-12);
        assert!((h.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(h.lr_at(60) < 1.0);
        assert!(h.lr_at(110) < 1e-12);
    }
}
