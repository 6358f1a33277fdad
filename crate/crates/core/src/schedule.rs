//! Noise levels, mean injection and loss weighting for the mean-reverting
//! diffusion in scaled space: `x = y + alpha * sigma * mu + sigma * eps`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{gaussian_vec, gaussian_vec_f64};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Number of sampling steps `N`.
    pub steps: usize,
    pub rho: f64,
    /// Mean response rate.
    pub alpha: f64,
    pub sigma_data: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            sigma_max: 10.0,
            sigma_min: 0.01,
            steps: 4,
            rho: 7.0,
            alpha: 0.1,
            sigma_data: 0.5,
        }
    }
}

impl Schedule {
    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(self.sigma_max > 0.0 && self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::config("schedule needs 0 < sigma_min <= sigma_max"));
        }
        if self.steps > 1 && self.sigma_min == self.sigma_max {
            return Err(Error::config("sigma_min == sigma_max cannot give a strictly decreasing schedule"));
        }
        if !(self.rho > 0.0 && self.sigma_data > 0.0 && self.alpha >= 0.0) {
            return Err(Error::config("schedule needs rho > 0, sigma_data > 0, alpha >= 0"));
        }
        Ok(())
    }

    /// `sigma_i` for `0 <= i <= N`, with `sigma_N = 0`.
    pub fn sigma_at(&self, i: usize) -> Result<f64> {
        let n = self.steps;
        if i > n {
            return Err(Error::OutOfRange(format!("step {i} outside 0..={n}")));
        }
        if i == n {
            return Ok(0.0);
        }
        if n == 1 {
            return Ok(self.sigma_max);
        }
        Ok(self.warp(i as f64 / (n - 1) as f64))
    }

    /// Continuous extension of the discretisation on `u in [0, 1]`.
    pub fn warp(&self, u: f64) -> f64 {
        let inv = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv);
        let lo = self.sigma_min.powf(inv);
        (hi + u * (lo - hi)).powf(self.rho)
    }

    /// All `N + 1` levels.
    pub fn sigmas(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.sigma_at(i).expect("in range")).collect()
    }

    /// EDM effective weight `(sigma^2 + sigma_d^2) / (sigma * sigma_d)^2`.
    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Numeric(format!("loss weight undefined at sigma = {sigma}")));
        }
        let sd = self.sigma_data;
        Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
    }

    /// Log-uniform draw on `[sigma_min, sigma_max]` for training.
    pub fn sample_training_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        (lo + rng.random::<f64>() * (hi - lo)).exp()
    }

    /// Preconditioning coefficients `(c_skip, c_out, c_in)`.
    pub fn preconditioning(&self, sigma: f64) -> (f64, f64, f64) {
        let sd2 = self.sigma_data * self.sigma_data;
        let norm = (sigma * sigma + sd2).sqrt();
        (sd2 / (sigma * sigma + sd2), sigma * self.sigma_data / norm, 1.0 / norm)
    }

    /// Initial sampler state `alpha * sigma_0 * mu + sigma_0 * eps`.
    pub fn init_sample<R: Rng + ?Sized>(&self, mu: &Tensor, rng: &mut R) -> Result<Tensor> {
        let sigma0 = self.sigma_at(0)?;
        let eps = gaussian_like(mu, rng)?;
        Ok(((mu * (self.alpha * sigma0))? + (eps * sigma0)?)?)
    }

    pub fn forward_perturb(&self, y: &Tensor, mu: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor> {
        forward_perturb(y, mu, self.alpha, sigma, eps)
    }
}

/// `x = y + alpha * sigma * mu + sigma * eps`.
pub fn forward_perturb(y: &Tensor, mu: &Tensor, alpha: f64, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    if y.dims() != mu.dims() || y.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "forward_perturb: y {:?}, mu {:?}, eps {:?}",
            y.dims(),
            mu.dims(),
            eps.dims()
        )));
    }
    if sigma < 0.0 {
        return Err(Error::OutOfRange(format!("sigma {sigma} < 0")));
    }
    let x = ((y + (mu * (alpha * sigma))?)? + (eps * sigma)?)?;
    Ok(x)
}

/// Standard normal tensor with the shape, dtype and device of `like`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    gaussian(like.dims(), like.dtype(), like.device(), rng)
}

pub fn gaussian<R: Rng + ?Sized>(dims: &[usize], dtype: DType, device: &Device, rng: &mut R) -> Result<Tensor> {
    let n = dims.iter().product();
    let t = match dtype {
        DType::F64 => Tensor::from_vec(gaussian_vec_f64(rng, n), dims, device)?,
        _ => Tensor::from_vec(gaussian_vec(rng, n), dims, device)?.to_dtype(dtype)?,
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn five_step() -> Schedule {
        Schedule {
            steps: 5,
            sigma_max: 10.0,
            sigma_min: 0.01,
            rho: 7.0,
            ..Default::default()
        }
    }

    #[test]
    fn endpoints() {
        let s = Schedule::default();
        assert!((s.sigma_at(0).unwrap() - s.sigma_max).abs() < 1e-12);
        assert_eq!(s.sigma_at(s.steps).unwrap(), 0.0);
        assert!(s.sigma_at(s.steps + 1).is_err());
    }

    #[test]
    fn five_step_golden_levels() {
        // evaluated independently in double precision
        let golden = [10.000000000000002, 3.0302437557880584, 0.7177132302454148, 0.11680486116055308, 0.010000000000000009, 0.0];
        let s = five_step();
        for (i, g) in golden.iter().enumerate() {
            let v = s.sigma_at(i).unwrap();
            assert!((v - g).abs() <= 1e-12 * g.max(1.0), "sigma_{i} = {v}, expected {g}");
        }
        let sig = s.sigmas();
        assert!(sig.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::default().with_steps(1);
        assert_eq!(s.sigmas(), vec![10.0, 0.0]);
    }

    #[test]
    fn loss_weight_values() {
        let s = Schedule::default();
        let sd = s.sigma_data;
        assert!((s.loss_weight(sd).unwrap() - 2.0 / (sd * sd)).abs() < 1e-12);
        assert!(s.loss_weight(0.1).unwrap() > s.loss_weight(1.0).unwrap());
        let big: Vec<f64> = [10.0, 100.0, 1000.0].iter().map(|&x| s.loss_weight(x).unwrap()).collect();
        assert!(big.windows(2).all(|w| w[0] > w[1]));
        assert!((big[2] - 1.0 / (sd * sd)).abs() < 1e-5);
        assert!(s.loss_weight(0.0).is_err());
    }

    #[test]
    fn forward_perturb_cases() {
        let d = Device::Cpu;
        let y = Tensor::new(&[0.3f32, -0.2, 0.7], &d).unwrap();
        let mu = Tensor::new(&[0.5f32, 0.5, 0.5], &d).unwrap();
        let eps = Tensor::new(&[1.0f32, -1.0, 0.25], &d).unwrap();
        let x = forward_perturb(&y, &mu, 0.1, 0.0, &eps).unwrap();
        assert_eq!(x.to_vec1::<f32>().unwrap(), y.to_vec1::<f32>().unwrap());

        let zero = Tensor::zeros(3, DType::F32, &d).unwrap();
        let x = forward_perturb(&zero, &mu, 1.0, 2.0, &zero).unwrap();
        assert_eq!(x.to_vec1::<f32>().unwrap(), vec![1.0; 3]);

        let short = Tensor::zeros(2, DType::F32, &d).unwrap();
        assert!(forward_perturb(&y, &mu, 0.1, 1.0, &short).is_err());
    }

    #[test]
    fn forward_perturb_moments() {
        // Monte-Carlo oracle: mean y + alpha*sigma*mu, variance sigma^2.
        let d = Device::Cpu;
        let n = 10_000;
        let (yv, mv, alpha, sigma) = (0.2f64, 0.6f64, 0.3, 1.0);
        let y = Tensor::full(yv, n, &d).unwrap();
        let mu = Tensor::full(mv, n, &d).unwrap();
        let eps = gaussian(&[n], DType::F64, &d, &mut stream(5, &[])).unwrap();
        let x: Vec<f64> = forward_perturb(&y, &mu, alpha, sigma, &eps).unwrap().to_vec1().unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect_mean = yv + alpha * sigma * mv;
        let se_mean = sigma / (n as f64).sqrt();
        let se_var = sigma * sigma * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - sigma * sigma).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn marginal_consistency() {
        // perturb to sigma_j directly vs. sigma_i then top up; compare moments
        let d = Device::Cpu;
        let n = 10_000;
        let s = Schedule::default().with_steps(6);
        let (si, sj) = (s.sigma_at(4).unwrap(), s.sigma_at(2).unwrap());
        let y = Tensor::full(0.1f64, n, &d).unwrap();
        let mu = Tensor::full(-0.4f64, n, &d).unwrap();
        let mut rng = stream(9, &[]);
        let e1 = gaussian(&[n], DType::F64, &d, &mut rng).unwrap();
        let e2 = gaussian(&[n], DType::F64, &d, &mut rng).unwrap();
        let e3 = gaussian(&[n], DType::F64, &d, &mut rng).unwrap();
        let direct: Vec<f64> = s.forward_perturb(&y, &mu, sj, &e1).unwrap().to_vec1().unwrap();
        let first = s.forward_perturb(&y, &mu, si, &e2).unwrap();
        let top = ((e3 * (sj * sj - si * si).sqrt()).unwrap() + (&mu * (s.alpha * (sj - si))).unwrap()).unwrap();
        let two: Vec<f64> = (first + top).unwrap().to_vec1().unwrap();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
        };
        let (m1, v1) = stats(&direct);
        let (m2, v2) = stats(&two);
        let se_m = sj * (2.0 / n as f64).sqrt();
        let se_v = sj * sj * (4.0 / (n - 1) as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_m, "{m1} vs {m2}");
        assert!((v1 - v2).abs() < 3.0 * se_v, "{v1} vs {v2}");
    }

    #[test]
    fn init_sample_cases() {
        let d = Device::Cpu;
        let mu = Tensor::full(0.5f32, (2, 3, 4, 4), &d).unwrap();
        let s = Schedule::default();
        let a = s.init_sample(&mu, &mut stream(1, &[])).unwrap();
        let b = s.init_sample(&mu, &mut stream(1, &[])).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());

        let zero_sigma = Schedule {
            sigma_max: 0.0,
            ..s
        };
        let z = zero_sigma.init_sample(&mu, &mut stream(1, &[])).unwrap();
        assert!(z.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));

        let no_mean = Schedule { alpha: 0.0, ..s };
        let big = Tensor::full(0.5f32, 20_000, &d).unwrap();
        let x: Vec<f32> = no_mean.init_sample(&big, &mut stream(2, &[])).unwrap().to_vec1().unwrap();
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
        assert!(m.abs() < 3.0 * 10.0 / (x.len() as f64).sqrt());
        assert!((sd - 10.0).abs() < 3.0 * 10.0 / (2.0 * x.len() as f64).sqrt());
    }
}
