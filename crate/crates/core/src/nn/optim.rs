use super::NnError;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v <- momentum * v + g`, `w <- w - lr * v`.
///
/// Velocity components that fall below the smallest normal `f32` are set to zero.
#[derive(Debug, Clone)]
pub struct SgdState {
    learning_rate: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl SgdState {
    /// Zero velocity for each of the given parameter shapes.
    pub fn new<'a>(
        learning_rate: f32,
        momentum: f32,
        param_shapes: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Self, NnError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NnError::Hyperparameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::Hyperparameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: param_shapes.into_iter().map(Tensor::zeros).collect(),
        })
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update in place. `params`, `grads` and the velocity
    /// buffers must line up one-to-one with identical shapes.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NnError> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(NnError::ParamCount {
                expected: self.velocity.len(),
                params: params.len(),
                grads: grads.len(),
            });
        }
        for ((param, grad), vel) in params.iter().zip(grads).zip(&self.velocity) {
            if param.shape() != vel.shape() || grad.shape() != vel.shape() {
                return Err(NnError::ParamMismatch {
                    layer: "sgd".into(),
                    expected: vel.shape().to_vec(),
                    actual: if param.shape() != vel.shape() {
                        param.shape().to_vec()
                    } else {
                        grad.shape().to_vec()
                    },
                });
            }
        }
        let (lr, m) = (self.learning_rate, self.momentum);
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                let nv = m * *v + g;
                // Subnormal velocities are flushed to zero; decaying buffers
                // would otherwise spend many steps on the slow subnormal path.
                *v = if nv.abs() < f32::MIN_POSITIVE { 0.0 } else { nv };
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnormal_velocity_is_flushed() {
        let mut w = one(1.0);
        let mut sgd = SgdState::new(1.0, 0.5, [w.shape()]).unwrap();
        sgd.step(&mut [&mut w], &[&one(f32::MIN_POSITIVE)]).unwrap();
        assert_eq!(sgd.velocity()[0].data(), &[f32::MIN_POSITIVE]);
        sgd.step(&mut [&mut w], &[&one(0.0)]).unwrap();
        assert_eq!(sgd.velocity()[0].data(), &[0.0]);
    }

    fn one(v: f32) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut w = one(1.0);
        let mut sgd = SgdState::new(0.1, 0.0, [w.shape()]).unwrap();
        sgd.step(&mut [&mut w], &[&one(2.0)]).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_unrolls_over_two_steps() {
        let mut w = one(0.0);
        let mut sgd = SgdState::new(1.0, 0.6, [w.shape()]).unwrap();
        sgd.step(&mut [&mut w], &[&one(1.0)]).unwrap();
        assert_eq!(w.data()[0], -1.0);
        sgd.step(&mut [&mut w], &[&one(1.0)]).unwrap();
        assert!((w.data()[0] - (-2.6)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::from_vec(vec![0.25, -3.0]);
        let mut sgd = SgdState::new(0.5, 0.6, [w.shape()]).unwrap();
        sgd.step(&mut [&mut w], &[&Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w.data(), &[0.25, -3.0]);
    }

    #[test]
    fn misaligned_shapes_are_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let mut sgd = SgdState::new(0.5, 0.6, [w.shape()]).unwrap();
        assert!(sgd.step(&mut [&mut w], &[&Tensor::zeros(&[3])]).is_err());
        assert!(sgd.step(&mut [], &[]).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(SgdState::new(0.0, 0.5, []).is_err());
        assert!(SgdState::new(0.1, 1.0, []).is_err());
        assert!(SgdState::new(0.1, -0.1, []).is_err());
    }
}
