//! Adam on plain tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    /// One bias-corrected Adam update of `param`; `step` is 1-based.
    fn apply(&mut self, param: &mut Tensor, grad: &Tensor, cfg: &AdamConfig, step: u64) {
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Adam state for a single tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub moments: Moments,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            moments: Moments::zeros(shape),
            step: 0,
        }
    }

    pub fn update(&mut self, param: &mut Tensor, grad: &Tensor, cfg: &AdamConfig) -> Result<()> {
        check_grad(param, grad, "tensor")?;
        self.step += 1;
        self.moments.apply(param, grad, cfg, self.step);
        Ok(())
    }
}

/// Adam state for a named parameter collection.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamAdam {
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
}

impl ParamAdam {
    pub fn for_params(params: &BTreeMap<String, Tensor>) -> Self {
        Self {
            moments: params
                .iter()
                .map(|(k, v)| (k.clone(), Moments::zeros(v.shape())))
                .collect(),
            step: 0,
        }
    }

    /// Updates every parameter that has a gradient; all gradients are
    /// validated before anything is modified.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (k, g) in grads {
            let p = params
                .get(k)
                .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter `{k}`")))?;
            check_grad(p, g, k)?;
        }
        self.step += 1;
        for (k, g) in grads {
            let p = params.get_mut(k).expect("checked above");
            let m = self
                .moments
                .entry(k.clone())
                .or_insert_with(|| Moments::zeros(g.shape()));
            m.apply(p, g, cfg, self.step);
        }
        Ok(())
    }
}

fn check_grad(param: &Tensor, grad: &Tensor, name: &str) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Internal(format!(
            "gradient shape {:?} does not match `{name}` {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::numeric(format!("non-finite gradient for `{name}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]);
        let g = Tensor::new(vec![3], vec![5.0, -0.5, 1e-3]);
        let mut s = AdamState::new(&[3]);
        s.update(&mut p, &g, &AdamConfig::with_lr(0.1)).unwrap();
        let step = |g: f64| 0.1 * g / (g.abs() + 1e-8);
        let expect = [0.0 - step(5.0), 1.0 - step(-0.5), 2.0 - step(1e-3)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_leaves_param_untouched() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]);
        let mut s = ParamAdam::for_params(&params);
        let err = s.update(&mut params, &grads, &AdamConfig::with_lr(0.1));
        assert!(matches!(err, Err(Error::Numeric { .. })));
        assert_eq!(params["w"].item(), 1.0);
        assert_eq!(s.step, 0);
    }
}
