use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multiplicative step decay: `base · factor^⌊epoch / period⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub period: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.period == 0 {
            return self.base;
        }
        self.base * self.factor.powi((epoch / self.period) as i32)
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let f = v.to_f64_lossy();
            f * f
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}

/// Adds `grads` into `acc`, initializing it on first use.
pub fn accumulate<T: Scalar>(acc: &mut Vec<Tensor<T>>, grads: Vec<Tensor<T>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    assert_eq!(acc.len(), grads.len(), "gradient lists differ in length");
    for (a, g) in acc.iter_mut().zip(&grads) {
        a.add_assign(g);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_is_exact_power_of_factor() {
        let s = StepDecay { base: 1e-3, factor: 0.5, period: 200 };
        for k in 0..8 {
            assert_eq!(s.lr(k * 200), 1e-3 * 0.5f64.powi(k as i32));
            assert_eq!(s.lr(k * 200 + 199), s.lr(k * 200));
        }
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![Tensor::<f64>::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("x", Tensor::scalar(5.0));
        let mut opt = Adam::new(&ps);
        for _ in 0..2000 {
            let x = ps.get(id).data()[0];
            let g = vec![Tensor::scalar(2.0 * (x - 1.5))];
            opt.step(&mut ps, &g, 0.05);
        }
        assert!((ps.get(id).data()[0] - 1.5).abs() < 1e-3);
    }
}
