use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a fixed parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} parameters, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.shapes[i].as_slice() {
                return Err(shape_err!(
                    "adam: parameter {i} has shape {:?}, state expects {:?}",
                    p.shape(),
                    self.shapes[i]
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let mut data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = g[j].wide();
                let mj = beta1 * m[j].wide() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].wide() + (1.0 - beta2) * gj * gj;
                m[j] = T::cast(mj);
                v[j] = T::cast(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                data[j] = T::cast(data[j].wide() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(value: f32, grad: f32) -> Tensor<f32> {
        let p = Tensor::param(vec![value; 3], &[3]).unwrap();
        let loss = p.scale(grad).sum();
        loss.backward().unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = param_with_grad(0.5, 0.0);
        let mut st = AdamState::new(AdamConfig::default(), std::slice::from_ref(&p));
        st.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![0.5; 3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for (g, dir) in [(1.0f32, -1.0), (-1.0, 1.0)] {
            let p = param_with_grad(0.0, g);
            let mut st = AdamState::new(AdamConfig::default(), std::slice::from_ref(&p));
            st.step(std::slice::from_ref(&p)).unwrap();
            for v in p.to_vec() {
                assert!((v as f64 - dir * 1e-4 / (1.0 + 1e-8)).abs() < 1e-9, "{v}");
            }
            assert_eq!(st.step_count(), 1);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let p = param_with_grad(0.0, 1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[p]);
        let other = Tensor::<f32>::param(vec![0.0; 4], &[4]).unwrap();
        assert!(st.step(&[other]).is_err());
    }
}
