use crate::{Error, Real, Result};

use super::param::{ParamGrads, ParamRole, ParamStore};

/// One SGD update with L2 folded into the gradient:
/// `g = grad + wd * param; buf = momentum * buf + g; param -= lr * buf`.
pub fn sgd_step<T: Real>(
    param: &mut [T],
    buffer: &mut [T],
    grad: &[T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != buffer.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            detail: alloc::format!("param {} grad {} buffer {}", param.len(), grad.len(), buffer.len()),
        });
    }
    for ((p, b), &g) in param.iter_mut().zip(buffer.iter_mut()).zip(grad) {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

/// Exponential decay applied at epoch boundaries: `lr0 * gamma^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * libm::pow(gamma, epoch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// When false, batchnorm affine parameters and biases are not decayed.
    pub decay_bias_and_norm: bool,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 0.005, decay_bias_and_norm: true }
    }
}

impl Sgd {
    /// Parameters without a gradient are left untouched, momentum included.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        grads.check_against(store)?;
        let lr = T::from_f64(lr);
        let momentum = T::from_f64(self.momentum);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads.get(super::ParamId(i)) else { continue };
            let wd = if self.decay_bias_and_norm || p.role == ParamRole::Weight {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            sgd_step(p.tensor.values_mut(), &mut p.momentum_buffer, g, lr, momentum, wd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_a_no_op() {
        let mut p = [1.5f64, -2.0];
        let mut b = [0.0; 2];
        sgd_step(&mut p, &mut b, &[0.0, 0.0], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = [1.0f64];
        let mut b = [0.0];
        sgd_step(&mut p, &mut b, &[1.0], 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn three_step_trace_matches_recurrence() {
        // hand-rolled recurrence with a constant gradient of 0.5
        let (lr, mu, wd) = (0.1f64, 0.9, 0.005);
        let mut p = [2.0f64];
        let mut b = [0.0];
        let (mut ep, mut eb) = (2.0f64, 0.0f64);
        for _ in 0..3 {
            sgd_step(&mut p, &mut b, &[0.5], lr, mu, wd).unwrap();
            let g = 0.5 + wd * ep;
            eb = mu * eb + g;
            ep -= lr * eb;
        }
        // step1: g=0.51 b=0.51 p=1.949; step2: g=0.509745 b=0.968745 p=1.8521255
        // step3: g=0.5092606275 b=1.3811311275 p=1.71401238725
        assert!((ep - 1.714_012_387_25).abs() < 1e-12);
        assert_eq!(p[0], ep);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = [1.0f64, 2.0];
        let mut b = [0.0; 2];
        assert!(sgd_step(&mut p, &mut b, &[1.0], 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 0.1, 0.9), 0.1);
        assert!((lr_schedule(1, 0.1, 0.9) - 0.09).abs() < 1e-15);
    }
}
