//! Cloud-thickness weighting, cloud-free masking and the cloud-aware
//! training objective with its YUV brightness term.

use std::sync::Once;

use candle_core::{Tensor, D};
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Guard for the transparency division.
pub const ALPHA_DELTA: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub lambda_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 3.0,
            lambda_u: 1.0,
            lambda_b: 2.0,
        }
    }
}

impl LossWeights {
    /// Plain (unmasked) MSE expressed through the cloud term with `M_A = 1`.
    pub fn plain_mse() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_u: 0.0,
            lambda_b: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_u, self.lambda_b];
        if all.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_c: self.lambda_c * k,
            lambda_u: self.lambda_u * k,
            lambda_b: self.lambda_b * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudMasks {
    /// Thickness weight map `[H, W]` in `[0, 1]`.
    pub m_a: Array2<f32>,
    /// Cloud-free binary mask `[H, W]`.
    pub m_ua: Array2<f32>,
    /// `|y - x_mu|` per frame `[T, C, H, W]`.
    pub v_d: Array4<f32>,
    /// Estimated transparency `[T, H, W]`.
    pub alpha_est: Array3<f32>,
}

/// `V_d = |y - x_mu|` for every frame of `x_mu` (`[T, C, H, W]`).
pub fn diff_map(y: &Array3<f32>, x_mu: &Array4<f32>) -> Result<Array4<f32>> {
    let (_, c, h, w) = x_mu.dim();
    if y.dim() != (c, h, w) {
        return Err(Error::shape(format!("target {:?} vs frames {:?}", y.dim(), x_mu.dim())));
    }
    let mut v = x_mu.clone();
    for mut frame in v.outer_iter_mut() {
        frame.zip_mut_with(y, |a, &b| *a = (*a - b).abs());
    }
    Ok(v)
}

/// Inverts the compositing model per pixel:
/// `alpha = clamp(V_d / max(I_cloud - y, delta), 0, 1)`, averaged over channels.
pub fn estimate_alpha(v_d: &Array4<f32>, y: &Array3<f32>, cloud_radiance: f32) -> Result<Array3<f32>> {
    let (t, c, h, w) = v_d.dim();
    if y.dim() != (c, h, w) {
        return Err(Error::shape(format!("target {:?} vs V_d {:?}", y.dim(), v_d.dim())));
    }
    let mut alpha = Array3::<f32>::zeros((t, h, w));
    for k in 0..t {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f32;
                for ch in 0..c {
                    let denom = (cloud_radiance - y[(ch, i, j)]).max(ALPHA_DELTA);
                    acc += (v_d[(k, ch, i, j)] / denom).clamp(0.0, 1.0);
                }
                alpha[(k, i, j)] = acc / c as f32;
            }
        }
    }
    Ok(alpha)
}

/// Per-frame min-max normalisation, temporal mean, then `M_UA = [M_A <= tau]`.
pub fn build_masks(alpha_est: &Array3<f32>, tau: f32) -> Result<(Array2<f32>, Array2<f32>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("mask threshold {tau} outside (0, 1)")));
    }
    let (t, h, w) = alpha_est.dim();
    let mut m_a = Array2::<f32>::zeros((h, w));
    for frame in alpha_est.outer_iter() {
        let (lo, hi) = frame.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > lo {
            m_a.zip_mut_with(&frame, |m, &a| *m += (a - lo) / (hi - lo));
        }
    }
    m_a.mapv_inplace(|v| v / t as f32);
    let m_ua = m_a.mapv(|v| if v <= tau { 1.0 } else { 0.0 });
    Ok((m_a, m_ua))
}

/// Masks for one training sample; depends only on the data.
pub fn cloud_masks(y: &Array3<f32>, frames: &Array4<f32>, cloud_radiance: f32, tau: f32) -> Result<CloudMasks> {
    let v_d = diff_map(y, frames)?;
    let alpha_est = estimate_alpha(&v_d, y, cloud_radiance)?;
    let (m_a, m_ua) = build_masks(&alpha_est, tau)?;
    Ok(CloudMasks {
        m_a,
        m_ua,
        v_d,
        alpha_est,
    })
}

pub const YUV_MATRIX: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.492 * 0.299, -0.492 * 0.587, 0.492 * (1.0 - 0.114)],
    [0.877 * (1.0 - 0.299), -0.877 * 0.587, -0.877 * 0.114],
];

/// BT.601 RGB to YUV on the channel axis, which must be the third from last.
pub fn rgb_to_yuv(img: &Tensor) -> Result<Tensor> {
    let rank = img.rank();
    if rank < 3 || img.dim(rank - 3)? != 3 {
        return Err(Error::shape(format!("rgb_to_yuv expects 3 channels at dim -3, got {:?}", img.dims())));
    }
    let cdim = rank - 3;
    let chans: Vec<Tensor> = (0..3).map(|c| img.narrow(cdim, c, 1)).collect::<candle_core::Result<_>>()?;
    let rows = YUV_MATRIX
        .iter()
        .map(|row| {
            let a = (&chans[0] * row[0])?;
            let b = (&chans[1] * row[1])?;
            let c = (&chans[2] * row[2])?;
            (a + b)? + c
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, cdim)?)
}

/// Differentiable total loss plus the unweighted per-term batch means.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub cloud: f64,
    pub uncloud: f64,
    pub brightness: f64,
    pub total_value: f64,
}

static BRIGHTNESS_NOTICE: Once = Once::new();

fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

/// `w_t * (l_c * L_cloud + l_u * L_uncloud + l_b * L_brightness)` averaged
/// over the batch.
///
/// `y_hat` and `y` are `[B, ..., C, H, W]`; `m_a` and `m_ua` broadcast to
/// them (typically `[B, 1, 1, H, W]`); `w_t` is `[B]`.
pub fn total_loss(
    y_hat: &Tensor,
    y: &Tensor,
    m_a: &Tensor,
    m_ua: &Tensor,
    weights: &LossWeights,
    w_t: &Tensor,
) -> Result<LossBreakdown> {
    if y_hat.dims() != y.dims() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", y_hat.dims(), y.dims())));
    }
    let rank = y.rank();
    if rank < 4 {
        return Err(Error::shape(format!("expected [B, ..., C, H, W], got {:?}", y.dims())));
    }
    let channels = y.dim(rank - 3)?;
    let mut lambda_b = weights.lambda_b;
    if channels != 3 && lambda_b != 0.0 {
        BRIGHTNESS_NOTICE.call_once(|| {
            log::info!("brightness term needs RGB input; disabled for {channels}-channel data");
        });
        lambda_b = 0.0;
    }
    let sq = (y_hat - y)?.sqr()?;
    let l_cloud = per_sample_mean(&sq.broadcast_mul(m_a)?)?;
    let l_uncloud = per_sample_mean(&sq.broadcast_mul(m_ua)?)?;
    let l_bright = if channels == 3 {
        let d = (rgb_to_yuv(y_hat)? - rgb_to_yuv(y)?)?.sqr()?.sum_keepdim(rank - 3)?;
        per_sample_mean(&d)?
    } else {
        l_cloud.zeros_like()?
    };
    let inner = (((&l_cloud * weights.lambda_c)? + (&l_uncloud * weights.lambda_u)?)? + (&l_bright * lambda_b)?)?;
    let total = (inner * w_t.to_dtype(y.dtype())?)?.mean_all()?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let total_value = scalar(&total)?;
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total_value}")));
    }
    Ok(LossBreakdown {
        cloud: scalar(&l_cloud)?,
        uncloud: scalar(&l_uncloud)?,
        brightness: scalar(&l_bright)?,
        total,
        total_value,
    })
}

/// Lifts an `[H, W]` mask to `[1, 1, 1, H, W]`.
pub fn mask_tensor(mask: &Array2<f32>, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let (h, w) = mask.dim();
    let data: Vec<f32> = mask.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Temporal union of ground-truth cloud support, for diagnostics.
pub fn cloud_union(alpha_true: &Array3<f32>) -> Array2<f32> {
    alpha_true.map_axis(Axis(0), |a| if a.iter().any(|&v| v > 0.0) { 1.0 } else { 0.0 })
}
