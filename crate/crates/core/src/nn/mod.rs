//! Minimal layer toolkit on top of candle with seeded initialisation.

mod attention;
mod optim;

pub use attention::{
    multi_head_attention, neighborhood_attention, neighborhood_index, scaled_dot_attention, split_heads,
    merge_heads,
};
pub use optim::RmsProp;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};

use crate::rng::stream;
use crate::schedule::gaussian;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Normal(f64),
}

fn name_key(name: &str) -> u64 {
    // FNV-1a, stable across platforms and runs
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Named trainable tensors, created on first request with a seed derived
/// from `(store seed, name)`.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != dims {
                return Err(Error::shape(format!("parameter {name} re-requested as {dims:?}, has {:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(dims, self.dtype, &self.device)?,
            Init::Ones => Tensor::ones(dims, self.dtype, &self.device)?,
            Init::Fan { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (gaussian(dims, self.dtype, &self.device, &mut stream(self.seed, &[name_key(name)]))? * std)?
            }
            Init::Normal(std) => {
                (gaussian(dims, self.dtype, &self.device, &mut stream(self.seed, &[name_key(name)]))? * std)?
            }
        };
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites parameter values (e.g. from a checkpoint). Every stored
    /// parameter must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Snapshot of every parameter (detached copies).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }
}

/// Shared handle used while building a model; hands out prefixed names.
#[derive(Clone)]
pub struct Builder {
    store: Rc<RefCell<ParamStore>>,
    prefix: String,
}

impl Builder {
    pub fn new(store: ParamStore) -> Self {
        Self {
            store: Rc::new(RefCell::new(store)),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn param(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.borrow_mut().create(&full, dims, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.store.borrow().device.clone()
    }

    /// Returns the store once every other handle has been dropped.
    pub fn finish(self) -> ParamStore {
        match Rc::try_unwrap(self.store) {
            Ok(cell) => cell.into_inner(),
            Err(rc) => {
                let store = rc.borrow();
                ParamStore {
                    vars: store.vars.clone(),
                    dtype: store.dtype,
                    device: store.device.clone(),
                    seed: store.seed,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &Builder, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(b, fan_in, fan_out, Init::Fan { fan_in, gain: 1.0 })
    }

    pub fn zeroed(b: &Builder, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(b, fan_in, fan_out, Init::Zeros)
    }

    pub fn with_init(b: &Builder, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[fan_out, fan_in], init)?,
            bias: b.param("bias", &[fan_out], Init::Zeros)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Self::with_init(b, c_in, c_out, kernel, Init::Fan { fan_in, gain: 1.0 })
    }

    pub fn zeroed(b: &Builder, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_init(b, c_in, c_out, kernel, Init::Zeros)
    }

    pub fn with_init(b: &Builder, c_in: usize, c_out: usize, kernel: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[c_out, c_in, kernel, kernel], init)?,
            bias: b.param("bias", &[c_out], Init::Zeros)?,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.weight.dim(2)? == 1 {
            // 1x1: a channel matmul is much cheaper than im2col
            let (n, c, h, w) = x.dims4()?;
            let co = self.weight.dim(0)?;
            let wm = self.weight.reshape((co, c))?;
            x.reshape((n, c, h * w))?
                .transpose(1, 2)?
                .broadcast_matmul(&wm.t()?)?
                .transpose(1, 2)?
                .reshape((n, co, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, 1, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0 && channels / g >= 2).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Ones)?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            groups: groups_for(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xs = x.reshape((n, g, (c / g) * h * w))?;
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centred = xs.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Ones)?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centred
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
