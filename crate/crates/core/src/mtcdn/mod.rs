//! The multi-temporal conditional denoiser: a small U-Net backbone driven by
//! a per-frame conditional encoder, with temporal fusion at full resolution
//! and hybrid global/neighbourhood attention at the bottleneck.

mod blocks;
mod cond;

pub use blocks::{
    from_tokens, temporal_attention, to_tokens, Gammas, Gate, HaBlock, HaBranches, NoiseEmbedding, ResBlock, Tae,
    TaeOutput, TemporalKv, TfBlock, TfBranches,
};
pub use cond::{CondEncoder, ConditionalFeatures};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{Builder, Conv2d, GroupNorm, ParamStore};
use crate::schedule::Schedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtcdnConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub neighborhood_window: usize,
    pub frames: usize,
    pub in_channels: usize,
    pub aux_channels: usize,
    pub out_channels: usize,
    pub embed_dim: usize,
    pub use_tf_block: bool,
    pub use_ha_block: bool,
    /// Learned temporal position encoding inside the TAE.
    pub temporal_position: bool,
}

impl Default for MtcdnConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            heads: 4,
            neighborhood_window: 5,
            frames: 3,
            in_channels: 3,
            aux_channels: 0,
            out_channels: 3,
            embed_dim: 64,
            use_tf_block: true,
            use_ha_block: true,
            temporal_position: true,
        }
    }
}

impl MtcdnConfig {
    /// Width of backbone stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels * (1 << s.min(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.depth < 1 {
            return fail("depth must be >= 1".into());
        }
        if self.neighborhood_window == 0 || self.neighborhood_window % 2 == 0 {
            return fail(format!("neighborhood_window must be odd, got {}", self.neighborhood_window));
        }
        if self.heads == 0 || self.base_channels == 0 {
            return fail("heads and base_channels must be positive".into());
        }
        for s in 0..self.depth {
            if self.stage_channels(s) % self.heads != 0 {
                return fail(format!("{} channels at stage {s} do not split into {} heads", self.stage_channels(s), self.heads));
            }
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim must be even and >= 2, got {}", self.embed_dim));
        }
        if self.frames == 0 || self.in_channels == 0 {
            return fail("frames and in_channels must be positive".into());
        }
        if self.out_channels != self.in_channels {
            return fail(format!(
                "out_channels ({}) must equal in_channels ({}) for the skip path",
                self.out_channels, self.in_channels
            ));
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives the downsampling stages and
    /// that the neighbourhood window fits the bottleneck.
    pub fn validate_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(format!("{h}x{w} input is not divisible by {f} (depth {})", self.depth)));
        }
        let (bh, bw) = (h / f, w / f);
        if self.use_ha_block && self.neighborhood_window > bh.min(bw) {
            return Err(Error::config(format!(
                "neighborhood_window {} exceeds the {bh}x{bw} bottleneck",
                self.neighborhood_window
            )));
        }
        Ok(())
    }
}

/// Conditioning inputs for one batch, all `[B, T, ., H, W]` in training space.
#[derive(Debug, Clone)]
pub struct Condition {
    /// Diffusion mean: the temporal mean of the cloudy frames, repeated over T.
    pub mean: Tensor,
    /// Per-frame cloudy observations.
    pub frames: Tensor,
    pub aux: Option<Tensor>,
}

impl Condition {
    pub fn new(frames: Tensor, aux: Option<Tensor>) -> Result<Self> {
        let mean = frames.mean_keepdim(1)?.broadcast_as(frames.dims())?.contiguous()?;
        Ok(Self { mean, frames, aux })
    }

    /// Uses an explicit diffusion mean instead of the temporal mean.
    pub fn with_mean(mean: Tensor, frames: Tensor, aux: Option<Tensor>) -> Result<Self> {
        if mean.dims() != frames.dims() {
            return Err(Error::shape(format!("mean {:?} vs frames {:?}", mean.dims(), frames.dims())));
        }
        Ok(Self { mean, frames, aux })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        Ok(self.mean.dims5()?)
    }

    /// Sub-batch `[start, start + len)`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            mean: self.mean.narrow(0, start, len)?,
            frames: self.frames.narrow(0, start, len)?,
            aux: self.aux.as_ref().map(|a| a.narrow(0, start, len)).transpose()?,
        })
    }
}

/// Anything that maps a noisy state at level `sigma` to a clean estimate.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Condition) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct EncStage {
    res: ResBlock,
    cond_proj: Conv2d,
}

#[derive(Debug, Clone)]
struct Network {
    input: Conv2d,
    emb: NoiseEmbedding,
    cond: CondEncoder,
    enc: Vec<EncStage>,
    tf: Option<(TfBlock, Conv2d)>,
    mid1: ResBlock,
    ha: Option<HaBlock>,
    mid2: ResBlock,
    dec: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Network {
    fn new(b: &Builder, cfg: &MtcdnConfig) -> Result<Self> {
        let c0 = cfg.stage_channels(0);
        let e = cfg.embed_dim;
        let input = Conv2d::new(&b.pp("input"), 2 * cfg.in_channels + cfg.aux_channels, c0, 3)?;
        let mut enc = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            let c_prev = if s == 0 { c0 } else { cfg.stage_channels(s - 1) };
            let cs = cfg.stage_channels(s);
            let p = b.pp(format!("enc{s}"));
            enc.push(EncStage {
                res: ResBlock::new(&p.pp("res"), c_prev, cs, e)?,
                cond_proj: Conv2d::new(&p.pp("cond_proj"), cs, cs, 1)?,
            });
        }
        let tf = if cfg.use_tf_block {
            Some((
                TfBlock::new(&b.pp("tf"), c0, c0, cfg.heads)?,
                Conv2d::new(&b.pp("tae_proj"), c0, c0, 1)?,
            ))
        } else {
            None
        };
        let cl = cfg.stage_channels(cfg.depth - 1);
        let ha = if cfg.use_ha_block {
            Some(HaBlock::new(&b.pp("ha"), cl, e, cfg.heads, cfg.neighborhood_window)?)
        } else {
            None
        };
        let mut dec = Vec::with_capacity(cfg.depth);
        for s in (0..cfg.depth).rev() {
            let c_in = if s + 1 == cfg.depth { cl } else { cfg.stage_channels(s + 1) };
            let cs = cfg.stage_channels(s);
            dec.push(ResBlock::new(&b.pp(format!("dec{s}")), c_in + cs, cs, e)?);
        }
        Ok(Self {
            input,
            emb: NoiseEmbedding::new(&b.pp("emb"), e)?,
            cond: CondEncoder::new(&b.pp("cond"), cfg)?,
            enc,
            tf,
            mid1: ResBlock::new(&b.pp("mid1"), cl, cl, e)?,
            ha,
            mid2: ResBlock::new(&b.pp("mid2"), cl, cl, e)?,
            dec,
            out_norm: GroupNorm::new(&b.pp("out.norm"), c0)?,
            out_conv: Conv2d::zeroed(&b.pp("out.conv"), c0, cfg.out_channels, 3)?,
        })
    }

    /// `x_in`: scaled, de-meaned state `[B, T, C, H, W]`; returns `F_theta`.
    fn forward(
        &self,
        x_in: &Tensor,
        sigmas: &[f64],
        cond: &Condition,
        feats: &ConditionalFeatures,
        gate: Gate,
        gammas: Gammas,
    ) -> Result<Tensor> {
        let (b, t, c, h, w) = x_in.dims5()?;
        let mut parts = vec![x_in.clone(), cond.mean.clone()];
        if let Some(a) = &cond.aux {
            parts.push(a.clone());
        }
        let inp = Tensor::cat(&parts, 2)?;
        let ci = inp.dim(2)?;
        let emb = self.emb.forward(sigmas, x_in)?;
        let e = emb.dim(1)?;
        let emb = emb.unsqueeze(1)?.broadcast_as((b, t, e))?.reshape((b * t, e))?;

        let mut hcur = self.input.forward(&inp.reshape((b * t, ci, h, w))?)?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for (s, stage) in self.enc.iter().enumerate() {
            if s > 0 {
                hcur = hcur.avg_pool2d(2)?;
            }
            hcur = stage.res.forward(&hcur, &emb)?;
            hcur = (hcur + stage.cond_proj.forward(&feats.scales[s])?)?;
            if s == 0 {
                if let Some((tf, tae_proj)) = &self.tf {
                    let (_, cs, hs, ws) = hcur.dims4()?;
                    let h5 = hcur.reshape((b, t, cs, hs, ws))?;
                    let f_tf = tf.forward(&h5, &feats.tae.kv, gate)?;
                    let f_tae = tae_proj.forward(&feats.tae.fused)?.unsqueeze(1)?;
                    hcur = (h5 + f_tf)?.broadcast_add(&f_tae)?.reshape((b * t, cs, hs, ws))?;
                }
            }
            skips.push(hcur.clone());
        }
        hcur = self.mid1.forward(&hcur, &emb)?;
        if let Some(ha) = &self.ha {
            hcur = (&hcur + ha.forward(&hcur, &emb, gammas)?)?;
        }
        hcur = self.mid2.forward(&hcur, &emb)?;
        let depth = self.enc.len();
        for (k, block) in self.dec.iter().enumerate() {
            let s = depth - 1 - k;
            hcur = block.forward(&Tensor::cat(&[&hcur, &skips[s]], 1)?, &emb)?;
            if s > 0 {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = hcur.upsample_nearest2d(hh * 2, ww * 2)?;
            }
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&hcur)?.silu()?)?;
        Ok(out.reshape((b, t, c, h, w))?)
    }
}

/// The conditional denoiser with its parameters and preconditioning.
#[derive(Debug)]
pub struct Mtcdn {
    config: MtcdnConfig,
    schedule: Schedule,
    store: ParamStore,
    net: Network,
    gate: Gate,
    gammas: Gammas,
}

fn column(vals: &[f64], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(vals.to_vec(), (vals.len(), 1, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

impl Mtcdn {
    pub fn new(config: MtcdnConfig, schedule: Schedule, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let b = Builder::new(ParamStore::new(seed, dtype, device.clone()));
        let net = Network::new(&b, &config)?;
        Ok(Self {
            config,
            schedule,
            store: b.finish(),
            net,
            gate: Gate::Learned,
            gammas: Gammas::Learned,
        })
    }

    pub fn config(&self) -> &MtcdnConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store.vars().values().cloned().collect()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn set_gate(&mut self, gate: Gate) {
        self.gate = gate;
    }

    pub fn set_gammas(&mut self, gammas: Gammas) {
        self.gammas = gammas;
    }

    pub fn encode_condition(&self, cond: &Condition) -> Result<ConditionalFeatures> {
        self.net.cond.forward(&cond.frames, cond.aux.as_ref())
    }

    fn check_inputs(&self, x: &Tensor, cond: &Condition) -> Result<()> {
        let (b, t, c, h, w) = x.dims5()?;
        if cond.mean.dims() != x.dims() || cond.frames.dims() != x.dims() {
            return Err(Error::shape(format!(
                "state {:?}, mean {:?}, frames {:?}",
                x.dims(),
                cond.mean.dims(),
                cond.frames.dims()
            )));
        }
        if c != self.config.in_channels {
            return Err(Error::shape(format!("{c} channels, model expects {}", self.config.in_channels)));
        }
        if self.config.temporal_position && t != self.config.frames {
            return Err(Error::shape(format!("{t} frames, model built for {}", self.config.frames)));
        }
        let _ = b;
        self.config.validate_spatial(h, w)?;
        check_finite(x, "noisy state")?;
        check_finite(&cond.mean, "diffusion mean")?;
        check_finite(&cond.frames, "conditional frames")
    }

    /// Differentiable denoiser with one noise level per batch item.
    pub fn forward(&self, x: &Tensor, sigmas: &[f64], cond: &Condition) -> Result<Tensor> {
        self.check_inputs(x, cond)?;
        let b = x.dim(0)?;
        if sigmas.len() != b {
            return Err(Error::shape(format!("{} noise levels for batch {b}", sigmas.len())));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Numeric(format!("noise level must be positive and finite, got {s}")));
        }
        let (mut skip, mut out, mut inn, mut shift) = (vec![], vec![], vec![], vec![]);
        for &s in sigmas {
            let (cs, co, ci) = self.schedule.preconditioning(s);
            skip.push(cs);
            out.push(co);
            inn.push(ci);
            shift.push(self.schedule.alpha * s);
        }
        let x_dm = (x - cond.mean.broadcast_mul(&column(&shift, x)?)?)?;
        let x_in = x_dm.broadcast_mul(&column(&inn, x)?)?;
        let feats = self.encode_condition(cond)?;
        let f = self.net.forward(&x_in, sigmas, cond, &feats, self.gate, self.gammas)?;
        Ok((x_dm.broadcast_mul(&column(&skip, x)?)? + f.broadcast_mul(&column(&out, x)?)?)?)
    }
}

impl Denoiser for Mtcdn {
    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Condition) -> Result<Tensor> {
        let b = x.dim(0)?;
        Ok(self.forward(x, &vec![sigma; b], cond)?.detach())
    }
}

#[cfg(test)]
mod tests;
