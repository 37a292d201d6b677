//! Adam with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// First and second moments, index-aligned with the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// alone. A non-finite gradient anywhere rejects the whole step and leaves
/// parameters, moments and the step counter untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [Parameter<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if m.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        if let Some(g) = &p.grad {
            if g.data().iter().any(|x| !x.is_finite()) {
                log::warn!("rejecting Adam step: non-finite gradient in {}", p.name);
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = &p.grad else { continue };
        let values = p.value.data_mut();
        let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((x, &dx), (mi, vi)) in values.iter_mut().zip(grad.data()).zip(moments) {
            let g = dx + wd * *x;
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: Option<f64>) -> Parameter<f64> {
        Parameter {
            name: "x".into(),
            value: Tensor::new([1], vec![x]).unwrap(),
            grad: g.map(|g| Tensor::new([1], vec![g]).unwrap()),
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar_param(0.5, Some(1.0))];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &mut st, &cfg).unwrap();
        let moved = 0.5 - p[0].value.data()[0];
        assert!((moved - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![scalar_param(0.5, Some(0.0))];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            adam_step(&mut p, &mut st, &cfg).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![scalar_param(0.5, Some(f64::NAN))];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        assert_eq!(st.step, 0);
        assert_eq!(p[0].value.data()[0], 0.5);
        assert_eq!(st.m[0].data()[0], 0.0);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut p = vec![scalar_param(0.5, None), scalar_param(1.0, Some(2.0))];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].value.data()[0], 0.5);
        assert!(p[1].value.data()[0] < 1.0);
    }
}
