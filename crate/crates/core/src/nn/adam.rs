//! Adam optimizer with bias correction.

use super::Param;
use crate::scalar::Scalar;
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step_count: u64,
    /// First/second moment per parameter slot, keyed by position in the
    /// parameter list handed to `step` (the list order must be stable).
    state: Vec<Option<(ArrayD<F>, ArrayD<F>)>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F) -> Self {
        Adam {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step_count: 0,
            state: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every trainable parameter.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        self.step_count += 1;
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        let t = self.step_count as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (slot, param) in self.state.iter_mut().zip(params.iter_mut()) {
            if !param.trainable {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| {
                (ArrayD::zeros(param.value.raw_dim()), ArrayD::zeros(param.value.raw_dim()))
            });
            debug_assert_eq!(m.shape(), param.value.shape(), "Adam state shape drift");
            let one_m_b1 = F::one() - self.beta1;
            let one_m_b2 = F::one() - self.beta2;
            ndarray::Zip::from(&mut param.value)
                .and(&param.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, mi, vi| {
                    *mi = self.beta1 * *mi + one_m_b1 * g;
                    *vi = self.beta2 * *vi + one_m_b2 * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w = *w - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn zero_grads(params: &mut [&mut Param<F>]) {
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (w - 3)^2
        let mut p = Param::new("w", ndarray::arr1(&[0.0f64]).into_dyn());
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let w = p.value.as_slice().unwrap()[0];
            p.grad.as_slice_mut().unwrap()[0] = 2.0 * (w - 3.0);
            adam.step(&mut [&mut p]);
        }
        assert!((p.value.as_slice().unwrap()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut p = Param::new("w", ndarray::arr1(&[1.0f64]).into_dyn());
        p.trainable = false;
        p.grad.as_slice_mut().unwrap()[0] = 100.0;
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p]);
        assert_eq!(p.value.as_slice().unwrap()[0], 1.0);
    }
}
