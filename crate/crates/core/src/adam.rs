//! Adam with bias correction.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Moment buffers and step counter for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
    step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(shape: &[usize]) -> Self {
        Self::with_hyperparameters(shape, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_hyperparameters(shape: &[usize], beta1: T, beta2: T, epsilon: T) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Tensor<T> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor<T> {
        &self.second_moment
    }

    /// Applies one update to `param` in place.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
        param.expect_same_shape(grad)?;
        if param.shape() != self.first_moment.shape() {
            return Err(dim_err!(
                "optimizer state shaped {:?}, parameter {:?}",
                self.first_moment.shape(),
                param.shape()
            ));
        }
        if !(lr > T::zero()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);

        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    state.step(param, grad, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-written scalar Adam, independent of the tensor path.
    fn scalar_adam(mut p: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            trace.push(p);
        }
        trace
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, 3.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let mut st = AdamState::new(&[1]);
        adam_step(&mut p, &Tensor::from_f64(&[1], &[1.0]).unwrap(), &mut st, 3.0).unwrap();
        let expected = scalar_adam(0.0, &[1.0], 3.0)[0];
        assert_eq!(p.data()[0], expected);
        assert!((p.data()[0] + 3.0).abs() < 1e-6);
    }

    #[test]
    fn three_step_trace_matches_scalar_reference() {
        let grads = [0.7, -1.3, 0.2];
        let expected = scalar_adam(0.25, &grads, 0.1);
        let mut p = Tensor::from_f64(&[1], &[0.25]).unwrap();
        let mut st = AdamState::new(&[1]);
        for (g, e) in grads.iter().zip(&expected) {
            st.step(&mut p, &Tensor::from_f64(&[1], &[*g]).unwrap(), 0.1).unwrap();
            assert!((p.data()[0] - e).abs() < 1e-15);
        }
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn shape_mismatch_and_bad_lr() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        assert!(st.step(&mut p, &Tensor::zeros(&[3]), 0.1).is_err());
        let mut st3 = AdamState::new(&[3]);
        assert!(st3.step(&mut p, &Tensor::zeros(&[2]), 0.1).is_err());
        assert!(st.step(&mut p, &Tensor::zeros(&[2]), 0.0).is_err());
    }
}
