use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Optimizer family and hyperparameters; recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Stateful optimizer. Adam keeps first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moments (empty before the first Adam step).
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved optimizer state.
    pub fn restore(config: OptimizerConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Format("optimizer moment lists differ in length".into()));
        }
        Ok(Optimizer { config, step, m, v })
    }

    /// Applies one update using the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr = T::from_f64(lr);
                for p in params.iter_mut() {
                    let g = p.grad.as_ref().expect("checked above");
                    for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * gv;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.m.len() != params.len() {
                    self.m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let step_size = T::from_f64(lr / bc1);
                let bc2_sqrt = T::from_f64(bc2.sqrt());
                let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let g = p.grad.as_ref().expect("checked above");
                    for (((w, &gv), mv), vv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let denom = vv.sqrt() / bc2_sqrt + eps;
                        *w = *w - step_size * *mv / denom;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut s = store_with_grad(1.25, 0.0);
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).step(&mut s).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).value.data(), &[1.25]);
    }

    #[test]
    fn sgd_single_step() {
        let mut s = store_with_grad(1.0, 1.0);
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).step(&mut s).unwrap();
        assert!((s.value(s.id("p").unwrap()).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // scalar recurrence: m1 = (1-b1) g, v1 = (1-b2) g^2,
        // update = lr * (m1/(1-b1)) / (sqrt(v1/(1-b2)) + eps) = lr * g / (|g| + eps)
        for g in [0.5, -3.0, 1e-2] {
            let lr = 1e-3;
            let mut s = store_with_grad(0.0, g);
            Optimizer::new(OptimizerConfig::adam(lr)).step(&mut s).unwrap();
            let expected = -lr * g / (g.abs() + 1e-8);
            let got = s.value(s.id("p").unwrap()).data()[0];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            assert!((got.abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let err = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }
}
