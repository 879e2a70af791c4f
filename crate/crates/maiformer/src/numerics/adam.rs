//! Bias-corrected Adam over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use super::real::{c, Real};
use super::tensor::Tensor;
use super::NumericsError;

/// Adam hyperparameters. Defaults are the standard ones.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub learning_rate: f64,
    step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>], hyper: AdamHyper, learning_rate: f64) -> Self {
        Self {
            hyper,
            learning_rate,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuild from checkpointed moments.
    pub fn restore(
        hyper: AdamHyper,
        learning_rate: f64,
        step: u64,
        first_moment: Vec<Tensor<T>>,
        second_moment: Vec<Tensor<T>>,
    ) -> Self {
        Self {
            hyper,
            learning_rate,
            step,
            first_moment,
            second_moment,
        }
    }

    /// One optimizer step. Gradients must match parameter shapes and be
    /// finite; the step counter advances by exactly one.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), NumericsError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumericsError::InvalidShape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NumericsError::GradShapeMismatch { index: i });
            }
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient { index: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1: T = c(self.hyper.beta1);
        let b2: T = c(self.hyper.beta2);
        let eps: T = c(self.hyper.epsilon);
        let lr: T = c(self.learning_rate);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for ((pi, &gi), (mi, vi)) in
                pd.iter_mut().zip(g.data()).zip(md.iter_mut().zip(vd.iter_mut()))
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::<f64>::from_fn(vec![2, 2], |i| i as f64)];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(vec![2, 2])];
        let mut state = AdamState::new(&params, AdamHyper::default(), 1e-3);
        state.step(&mut params, &grads).unwrap();
        assert!(params[0].bit_eq(&before));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_roughly_lr() {
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let grads = vec![Tensor::scalar(0.3)];
        let lr = 1e-2;
        let mut state = AdamState::new(&params, AdamHyper::default(), lr);
        state.step(&mut params, &grads).unwrap();
        // With bias correction, m̂ = g and v̂ = g², so the update is
        // lr·g/(|g|+ε) ≈ lr for any nonzero g.
        let delta = 1.0 - params[0].data()[0];
        assert!((delta - lr).abs() < 1e-8);
    }

    #[test]
    fn three_steps_match_hand_unrolled_recurrence() {
        let g0 = -0.7;
        let lr = 5e-3;
        let h = AdamHyper::default();
        let mut params = vec![Tensor::<f64>::scalar(2.0)];
        let grads = vec![Tensor::scalar(g0)];
        let mut state = AdamState::new(&params, h, lr);
        for _ in 0..3 {
            state.step(&mut params, &grads).unwrap();
        }

        // Hand-unrolled scalar Adam with a constant gradient.
        let mut theta = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            m = h.beta1 * m + (1.0 - h.beta1) * g0;
            v = h.beta2 * v + (1.0 - h.beta2) * g0 * g0;
            let m_hat = m / (1.0 - h.beta1.powi(t));
            let v_hat = v / (1.0 - h.beta2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        assert!((params[0].data()[0] - theta).abs() < 1e-15);
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut state = AdamState::new(&params, AdamHyper::default(), 1e-3);
        let err = state.step(&mut params, &grads);
        assert!(matches!(err, Err(NumericsError::NonFiniteGradient { index: 0 })));
        assert_eq!(state.step_count(), 0);
        assert_eq!(params[0].data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f64>::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params, AdamHyper::default(), 1e-3);
        assert!(matches!(
            state.step(&mut params, &grads),
            Err(NumericsError::GradShapeMismatch { index: 0 })
        ));
    }
}
