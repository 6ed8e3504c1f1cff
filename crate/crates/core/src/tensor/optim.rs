//! Parameter update rules.

use super::{Result, Scalar, Tensor, TensorError};

fn check<T: Scalar>(op: &'static str, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::Argument {
            op,
            msg: format!("{} params but {} grads", params.len(), grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::Argument {
                op,
                msg: format!("param {i}: shape {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    Ok(())
}

/// Momentum buffers for [`sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct SgdState<T> {
    velocity: Vec<Tensor<T>>,
}

/// `v = momentum·v + g; p -= lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut SgdState<T>, lr: f64, momentum: f64) -> Result<()> {
    check("sgd_step", params, grads)?;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
    Ok(())
}

/// First/second moment estimates and step count for [`adam_step`].
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u32,
}

impl<T> AdamState<T> {
    pub fn steps(&self) -> u32 {
        self.step
    }
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check("adam_step", params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one, lr, eps) = (T::one(), T::of(lr), T::of(eps));
    let (c1, c2) = (T::of(c1), T::of(c2));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_unit_rate_subtracts_gradient() {
        let mut p = vec![t(&[1.0, 2.0])];
        sgd_step(&mut p, &[t(&[0.5, -1.0])], &mut SgdState::default(), 1.0, 0.0).unwrap();
        assert_eq!(p[0].data(), &[0.5, 3.0]);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![t(&[1.0, 2.0])];
        sgd_step(&mut p, &[t(&[0.0, 0.0])], &mut SgdState::default(), 0.1, 0.9).unwrap();
        assert_eq!(p[0].data(), &[1.0, 2.0]);
        adam_step(&mut p, &[t(&[0.0, 0.0])], &mut AdamState::default(), 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_two_steps_on_quadratic() {
        // f(x) = x^2, x0 = 1, lr 0.1, hand-unrolled.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![t(&[1.0])];
        let mut st = AdamState::default();
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for step in 1..=2 {
            let g = 2.0 * x;
            let grad = [t(&[2.0 * p[0].data()[0]])];
            adam_step(&mut p, &grad, &mut st, lr, b1, b2, eps).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(step));
            let vh = v / (1.0 - b2.powi(step));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0].data()[0] - x).abs() < 1e-15, "step {step}");
        }
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![t(&[1.0, 2.0])];
        assert!(sgd_step(&mut p, &[t(&[1.0])], &mut SgdState::default(), 1.0, 0.0).is_err());
        assert!(adam_step(&mut p, &[], &mut AdamState::default(), 1.0, 0.9, 0.99, 1e-8).is_err());
    }
}
