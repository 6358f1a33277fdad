use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::{Error, Result};

/// Momentum-free adaptive optimizer (RMSProp with bias-corrected second
/// moment): `p -= lr * g / (sqrt(v_hat) + eps)`.
#[derive(Debug)]
pub struct RmsProp {
    params: Vec<(String, Var)>,
    second: Vec<Option<Tensor>>,
    step: u64,
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        let n = params.len();
        Ok(Self {
            params,
            second: vec![None; n],
            step: 0,
            lr,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let correction = 1.0 - self.beta2.powi(self.step as i32);
        for ((_, var), v) in self.params.iter().zip(self.second.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let sq = g.sqr()?;
            let next = match v.as_ref() {
                Some(prev) => ((prev * self.beta2)? + (sq * (1.0 - self.beta2))?)?,
                None => (sq * (1.0 - self.beta2))?,
            };
            let denom = ((&next / correction)?.sqrt()? + self.eps)?;
            let update = ((g / denom)? * self.lr)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            *v = Some(next);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var.clone())], 0.01).unwrap();
        let loss = (var.as_tensor() * Tensor::new(&[3.0f64, -1.0, 0.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        // bias-corrected v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert!((got[0] - 0.99).abs() < 1e-9);
        assert!((got[1] + 1.99).abs() < 1e-9);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let var = Var::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::new(&[0.3f64, -0.2, 0.1, 0.05], &Device::Cpu).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var.clone())], 0.01).unwrap();
        for _ in 0..500 {
            let loss = (var.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let err = (var.as_tensor() - &target).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 0.02, "{err}");
        assert!(RmsProp::new(vec![], 0.0).is_err());
    }
}
