//! Adam and SGD-with-momentum over a list of parameter tensors.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state. Moment buffers are created on the first step and bound
/// to the parameter order and shapes seen then.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(
            OptimizerKind::Sgd {
                momentum,
                weight_decay: 0.0,
            },
            lr,
        )
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that requires grad. Gradients are
    /// left in place; clear them with [`Tensor::zero_grad`].
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::OptimizerState {
                index: params.len().min(self.first.len()),
                detail: format!("{} buffers for {} parameters", self.first.len(), params.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].len() != p.numel() {
                return Err(Error::OptimizerState {
                    index: i,
                    detail: format!("buffer has {} elements, parameter {:?}", self.first[i].len(), p.shape()),
                });
            }
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGrad { index: i });
            }
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = T::lit(1.0 - beta1.powi(t));
                let bc2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                for (i, p) in params.iter_mut().enumerate() {
                    if !p.requires_grad() {
                        continue;
                    }
                    let g = p.grad().expect("checked above").to_vec();
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *x -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                let mu = T::lit(momentum);
                let wd = T::lit(weight_decay);
                for (i, p) in params.iter_mut().enumerate() {
                    if !p.requires_grad() {
                        continue;
                    }
                    let g = p.grad().expect("checked above").to_vec();
                    let buf = &mut self.first[i];
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let gj = g[j] + wd * *x;
                        buf[j] = mu * buf[j] + gj;
                        *x -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global l2 norm of the gradients of `params`.
pub fn grad_norm<T: Real>(params: &[&mut Tensor<T>]) -> T {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
}

/// Rescales all gradients so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [&mut Tensor<T>], max_norm: f64) -> T {
    let norm = grad_norm(params);
    let max = T::lit(max_norm);
    if norm > max {
        let s = max / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut p = Tensor::scalar(v).with_requires_grad(true);
        p.accumulate_grad(&[g]).unwrap();
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(1.0, 1.0);
        let mut opt = Optimizer::adam(0.05);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-6, "{}", p.data()[0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd_momentum()] {
            let mut p = param(1.0, 0.0);
            let mut opt = Optimizer::new(kind, 0.1);
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.data()[0], 1.0);
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut p = param(0.0, g);
        let mut opt = Optimizer::sgd(lr, 0.9);
        opt.step(&mut [&mut p]).unwrap();
        let d1 = -p.data()[0];
        opt.step(&mut [&mut p]).unwrap();
        let d2 = -p.data()[0] - d1;
        assert!((d1 - lr * g).abs() < 1e-12);
        assert!((d2 - lr * 1.9 * g).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::<f64>::scalar(1.0).with_requires_grad(true);
        let mut opt = Optimizer::adam(0.1);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::MissingGrad { index: 0 })));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = param(0.0, 3.0);
        let mut b = param(0.0, 4.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 0.1);
        assert!((before - 5.0).abs() < 1e-12);
        let after = grad_norm(&[&mut a, &mut b]);
        assert!(after <= 0.1 + 1e-12);
    }
}
