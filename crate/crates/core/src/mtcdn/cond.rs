use candle_core::Tensor;

use super::blocks::{Tae, TaeOutput};
use super::MtcdnConfig;
use crate::nn::{Builder, Conv2d};
use crate::{Error, Result};

/// Per-scale conditional features plus the fused temporal summary.
#[derive(Debug, Clone)]
pub struct ConditionalFeatures {
    /// One `[B*T, ch_s, H/2^s, W/2^s]` map per backbone stage.
    pub scales: Vec<Tensor>,
    pub tae: TaeOutput,
    pub batch: usize,
    pub frames: usize,
}

/// Encodes each conditional frame `X_t ⊕ A_t` independently, then fuses the
/// first-scale features across time.
#[derive(Debug, Clone)]
pub struct CondEncoder {
    stem: Conv2d,
    stages: Vec<Conv2d>,
    tae: Tae,
    in_channels: usize,
    aux_channels: usize,
}

impl CondEncoder {
    pub fn new(b: &Builder, cfg: &MtcdnConfig) -> Result<Self> {
        let c0 = cfg.stage_channels(0);
        let stem = Conv2d::new(&b.pp("stem"), cfg.in_channels + cfg.aux_channels, c0, 3)?;
        let stages = (0..cfg.depth)
            .map(|s| {
                let c_prev = if s == 0 { c0 } else { cfg.stage_channels(s - 1) };
                Conv2d::new(&b.pp(format!("stage{s}")), c_prev, cfg.stage_channels(s), 3)
            })
            .collect::<Result<Vec<_>>>()?;
        let tae = Tae::new(&b.pp("tae"), c0, cfg.frames, cfg.heads, cfg.temporal_position)?;
        Ok(Self {
            stem,
            stages,
            tae,
            in_channels: cfg.in_channels,
            aux_channels: cfg.aux_channels,
        })
    }

    /// `frames`: `[B, T, C, H, W]`; `aux`: `[B, T, C_a, H, W]` when configured.
    pub fn forward(&self, frames: &Tensor, aux: Option<&Tensor>) -> Result<ConditionalFeatures> {
        let (b, t, c, h, w) = frames.dims5()?;
        if c != self.in_channels {
            return Err(Error::shape(format!("condition has {c} channels, model expects {}", self.in_channels)));
        }
        let input = match (aux, self.aux_channels) {
            (_, 0) => frames.clone(),
            (None, ca) => return Err(Error::config(format!("model expects {ca} auxiliary channels, none given"))),
            (Some(a), ca) => {
                let (ab, at, ac, ah, aw) = a.dims5()?;
                if (ab, at, ac, ah, aw) != (b, t, ca, h, w) {
                    return Err(Error::shape(format!(
                        "auxiliary input {:?} does not match [{b}, {t}, {ca}, {h}, {w}]",
                        a.dims()
                    )));
                }
                Tensor::cat(&[frames, a], 2)?
            }
        };
        let mut x = self.stem.forward(&input.reshape((b * t, c + self.aux_channels, h, w))?)?.silu()?;
        let mut scales = Vec::with_capacity(self.stages.len());
        for (s, conv) in self.stages.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = conv.forward(&x)?.silu()?;
            scales.push(x.clone());
        }
        let first = &scales[0];
        let (_, c0, _, _) = first.dims4()?;
        let tae = self.tae.forward(&first.reshape((b, t, c0, h, w))?)?;
        Ok(ConditionalFeatures {
            scales,
            tae,
            batch: b,
            frames: t,
        })
    }
}
