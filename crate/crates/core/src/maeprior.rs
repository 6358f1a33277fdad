//! A tiny ViT masked autoencoder used as a frozen structural prior.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dresample::StructuralPrior;
use crate::nn::{multi_head_attention, Builder, Init, LayerNorm, Linear, ParamStore, RmsProp};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    /// Weight of the visible-patch reconstruction term relative to the
    /// masked-patch term.
    pub visible_weight: f64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            mask_ratio: 0.75,
            channels: 3,
            encoder_dim: 64,
            encoder_depth: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            heads: 4,
            visible_weight: 0.25,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.channels == 0 {
            return Err(Error::config("patch_size and channels must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        for (name, dim) in [("encoder_dim", self.encoder_dim), ("decoder_dim", self.decoder_dim)] {
            if dim == 0 || dim % 4 != 0 || dim % self.heads.max(1) != 0 || self.heads == 0 {
                return Err(Error::config(format!("{name} {dim} must be a multiple of 4 and of heads {}", self.heads)));
            }
        }
        if self.encoder_depth == 0 {
            return Err(Error::config("encoder_depth must be >= 1"));
        }
        if !(self.visible_weight >= 0.0) {
            return Err(Error::config("visible_weight must be >= 0"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Number of masked patches out of `l`.
    pub fn masked_count(&self, l: usize) -> usize {
        (self.mask_ratio * l as f64 + 1e-9).floor() as usize
    }
}

/// `[N, C, H, W] -> [N, L, p*p*C]`, patches in row-major order, values
/// ordered `(dy, dx, c)` within a patch.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(img
        .reshape((n, c, gh, p, gw, p))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((n, gh * gw, p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, l, d) = seq.dims3()?;
    if p == 0 || h % p != 0 || w % p != 0 || l != (h / p) * (w / p) || d != p * p * c {
        return Err(Error::shape(format!("{l} patches of {d} values do not tile {c}x{h}x{w} with patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(seq
        .reshape((n, gh, gw, p, p, c))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((n, c, h, w))?)
}

/// Fixed 2-D sine-cosine position embeddings `[gh*gw, dim]`.
pub fn position_embedding(gh: usize, gw: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let q = dim / 4;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for i in 0..gh {
        for j in 0..gw {
            for pos in [i as f64, j as f64] {
                for k in 0..q {
                    let f = 1.0 / 10000f64.powf(k as f64 / q as f64);
                    out.push((pos * f).sin());
                }
                for k in 0..q {
                    let f = 1.0 / 10000f64.powf(k as f64 / q as f64);
                    out.push((pos * f).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (gh * gw, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

impl Block {
    fn new(b: &Builder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim)?,
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&b.pp("proj"), dim, dim)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim)?,
            fc1: Linear::new(&b.pp("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&b.pp("fc2"), 2 * dim, dim)?,
            heads,
            dim,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let d = self.dim;
        let (q, k, v) = (qkv.narrow(2, 0, d)?, qkv.narrow(2, d, d)?, qkv.narrow(2, 2 * d, d)?);
        let x = (x + self.proj.forward(&multi_head_attention(&q, &k, &v, self.heads)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.silu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Network {
    embed: Linear,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    to_decoder: Linear,
    mask_token: Tensor,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
}

/// Patch split produced by one masking draw.
#[derive(Debug, Clone)]
pub struct PatchMask {
    /// Per item: visible patch indices, then masked ones.
    pub order: Vec<Vec<usize>>,
    pub visible: usize,
}

impl PatchMask {
    pub fn none(n: usize, l: usize) -> Self {
        Self {
            order: vec![(0..l).collect(); n],
            visible: l,
        }
    }

    pub fn random(n: usize, l: usize, masked: usize, seed: u64, key: u64) -> Self {
        let order = (0..n)
            .map(|i| {
                let mut idx: Vec<usize> = (0..l).collect();
                idx.shuffle(&mut stream(seed, &[key, i as u64]));
                idx
            })
            .collect();
        Self { order, visible: l - masked }
    }

    pub fn masked(&self) -> usize {
        self.order.first().map_or(0, |o| o.len()) - self.visible
    }

    /// `[N, L]` with 1 on masked patches.
    pub fn indicator(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (n, l) = (self.order.len(), self.order[0].len());
        let mut m = vec![0f32; n * l];
        for (i, o) in self.order.iter().enumerate() {
            for &k in &o[self.visible..] {
                m[i * l + k] = 1.0;
            }
        }
        Ok(Tensor::from_vec(m, (n, l), device)?.to_dtype(dtype)?)
    }
}

fn gather_tokens(x: &Tensor, idx: &[Vec<usize>], count: usize) -> Result<Tensor> {
    let (n, _, d) = x.dims3()?;
    let flat: Vec<u32> = idx.iter().flat_map(|o| o[..count].iter().flat_map(|&k| std::iter::repeat_n(k as u32, d))).collect();
    let index = Tensor::from_vec(flat, (n, count, d), x.device())?;
    Ok(x.contiguous()?.gather(&index, 1)?)
}

/// The autoencoder. Trainable until frozen; a frozen prior only reconstructs.
#[derive(Debug)]
pub struct MaePrior {
    config: MaeConfig,
    store: ParamStore,
    net: Network,
    frozen: bool,
}

impl MaePrior {
    pub fn new(config: MaeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let b = Builder::new(ParamStore::new(seed, dtype, device.clone()));
        let (de, dd) = (config.encoder_dim, config.decoder_dim);
        let net = Network {
            embed: Linear::new(&b.pp("embed"), config.patch_len(), de)?,
            encoder: (0..config.encoder_depth)
                .map(|i| Block::new(&b.pp(format!("enc{i}")), de, config.heads))
                .collect::<Result<_>>()?,
            enc_norm: LayerNorm::new(&b.pp("enc_norm"), de)?,
            to_decoder: Linear::new(&b.pp("to_decoder"), de, dd)?,
            mask_token: b.param("mask_token", &[dd], Init::Normal(0.02))?,
            decoder: (0..config.decoder_depth)
                .map(|i| Block::new(&b.pp(format!("dec{i}")), dd, config.heads))
                .collect::<Result<_>>()?,
            dec_norm: LayerNorm::new(&b.pp("dec_norm"), dd)?,
            head: Linear::new(&b.pp("head"), dd, config.patch_len())?,
        };
        Ok(Self {
            config,
            store: b.finish(),
            net,
            frozen: false,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_images(&self, img: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = img.dims4()?;
        let p = self.config.patch_size;
        if c != self.config.channels {
            return Err(Error::shape(format!("{c} channels, prior expects {}", self.config.channels)));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!("{h}x{w} image is not divisible by patch {p}")));
        }
        Ok((n, c, h, w))
    }

    /// Predicted patches `[N, L, p*p*C]` for images `[N, C, H, W]`.
    pub fn forward(&self, img: &Tensor, mask: &PatchMask) -> Result<Tensor> {
        let (n, _, h, w) = self.check_images(img)?;
        let p = self.config.patch_size;
        let (gh, gw) = (h / p, w / p);
        let l = gh * gw;
        let (dtype, dev) = (img.dtype(), img.device());
        let pos_e = position_embedding(gh, gw, self.config.encoder_dim, dtype, dev)?;
        let pos_d = position_embedding(gh, gw, self.config.decoder_dim, dtype, dev)?;

        let tokens = self.net.embed.forward(&patchify(img, p)?)?.broadcast_add(&pos_e)?;
        let mut x = gather_tokens(&tokens, &mask.order, mask.visible)?;
        for blk in &self.net.encoder {
            x = blk.forward(&x)?;
        }
        let x = self.net.to_decoder.forward(&self.net.enc_norm.forward(&x)?)?;
        let dd = self.config.decoder_dim;
        let masked = l - mask.visible;
        let full = if masked > 0 {
            let tok = self.net.mask_token.reshape((1, 1, dd))?.broadcast_as((n, masked, dd))?;
            Tensor::cat(&[&x, &tok], 1)?
        } else {
            x
        };
        // undo the shuffle: position k lives at slot inverse[k]
        let inverse: Vec<Vec<usize>> = mask
            .order
            .iter()
            .map(|o| {
                let mut inv = vec![0; l];
                for (slot, &k) in o.iter().enumerate() {
                    inv[k] = slot;
                }
                inv
            })
            .collect();
        let mut y = gather_tokens(&full, &inverse, l)?.broadcast_add(&pos_d)?;
        for blk in &self.net.decoder {
            y = blk.forward(&y)?;
        }
        self.net.head.forward(&self.net.dec_norm.forward(&y)?)
    }

    /// Masked-patch MSE plus the weighted visible-patch MSE.
    pub fn loss(&self, img: &Tensor, mask: &PatchMask) -> Result<(Tensor, f64)> {
        let pred = self.forward(img, mask)?;
        let target = patchify(img, self.config.patch_size)?;
        let per_patch = (pred - target)?.sqr()?.mean(2)?;
        let m = mask.indicator(img.dtype(), img.device())?;
        let masked_mse = ((&per_patch * &m)?.sum_all()? / m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0))?;
        let vis = (1.0 - &m)?;
        let nv = vis.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let loss = if self.config.visible_weight > 0.0 && nv > 0.0 {
            let vis_mse = ((&per_patch * &vis)?.sum_all()? / nv)?;
            (&masked_mse + (vis_mse * self.config.visible_weight)?)?
        } else {
            masked_mse.clone()
        };
        let mv = masked_mse.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok((loss, mv))
    }

    /// One optimizer update on a batch; refuses once frozen.
    pub fn train_step(&self, opt: &mut RmsProp, img: &Tensor, seed: u64, key: u64) -> Result<f64> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let (n, _, h, w) = self.check_images(img)?;
        let l = (h / self.config.patch_size) * (w / self.config.patch_size);
        let mask = PatchMask::random(n, l, self.config.masked_count(l), seed, key);
        let (loss, _) = self.loss(img, &mask)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("prior loss {value} at step key {key}")));
        }
        opt.step(&loss.backward()?)?;
        Ok(value)
    }

    pub fn optimizer(&self, lr: f64) -> Result<RmsProp> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        RmsProp::new(self.store.named_vars(), lr)
    }

    /// Full-visibility reconstruction of `[N, C, H, W]` images.
    pub fn reconstruct_images(&self, img: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.check_images(img)?;
        let p = self.config.patch_size;
        let l = (h / p) * (w / p);
        let out = self.forward(img, &PatchMask::none(n, l))?;
        Ok(unpatchify(&out, p, c, h, w)?.detach())
    }

    /// Masked-patch MSE on a fixed evaluation mask.
    pub fn heldout_loss(&self, img: &Tensor, seed: u64) -> Result<f64> {
        let (n, _, h, w) = self.check_images(img)?;
        let l = (h / self.config.patch_size) * (w / self.config.patch_size);
        let mask = PatchMask::random(n, l, self.config.masked_count(l), seed, u64::MAX);
        Ok(self.loss(img, &mask)?.1)
    }
}

impl StructuralPrior for MaePrior {
    fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::GuideUnavailable("prior must be frozen before guiding".into()));
        }
        let dtype = self.store.dtype();
        Ok(self.reconstruct_images(&images.to_dtype(dtype)?)?.to_dtype(images.dtype())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeEpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub heldout_loss: f64,
}

/// Stacks `[C, H, W]` images in `[0, 1]` into `[N, C, H, W]`.
pub fn stack_images(images: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::data("<corpus>", "no images"))?;
    let (c, h, w) = first.dim();
    let mut flat = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::shape(format!("mixed image sizes {:?} and {:?}", img.dim(), (c, h, w))));
        }
        flat.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Trains a prior on cloud-free images and freezes it. The log starts with
/// the untrained held-out loss at epoch 0.
pub fn train_mae(
    corpus: &[Array3<f32>],
    heldout: &[Array3<f32>],
    cfg: &MaeConfig,
    train: &MaeTrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<(MaePrior, Vec<MaeEpochLog>)> {
    if corpus.is_empty() {
        return Err(Error::data("<corpus>", "empty training corpus"));
    }
    if train.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut prior = MaePrior::new(cfg.clone(), train.seed, dtype, device)?;
    let mut opt = prior.optimizer(train.lr)?;
    let held = if heldout.is_empty() {
        None
    } else {
        Some(stack_images(&heldout.iter().collect::<Vec<_>>(), dtype, device)?)
    };
    let eval = |p: &MaePrior| -> Result<f64> { held.as_ref().map_or(Ok(f64::NAN), |h| p.heldout_loss(h, train.seed)) };
    let mut log = vec![MaeEpochLog { epoch: 0, train_loss: None, heldout_loss: eval(&prior)? }];
    let mut step = 0u64;
    for epoch in 1..=train.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut stream(train.seed, &[0x4d41_45, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let imgs: Vec<&Array3<f32>> = chunk.iter().map(|&i| &corpus[i]).collect();
            let batch = stack_images(&imgs, dtype, device)?;
            total += prior.train_step(&mut opt, &batch, train.seed, step)?;
            step += 1;
            batches += 1;
        }
        let train_loss = Some(total / batches as f64);
        log::info!("mae epoch {epoch}: train {:.5}", total / batches as f64);
        log.push(MaeEpochLog { epoch, train_loss, heldout_loss: eval(&prior)? });
    }
    prior.freeze();
    Ok((prior, log))
}
