use candle_core::{Device, Tensor, D};

use super::softmax_last;
use crate::{Error, Result};

/// `softmax(q k^T / sqrt(d)) v` on `[B, Lq, d]`, `[B, Lk, d]`, `[B, Lk, dv]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    Ok(softmax_last(&scores)?.matmul(&v.contiguous()?)?)
}

/// `[B, L, H*dh] -> [B*H, L, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::shape(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(x.reshape((b, l, heads, c / heads))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * heads, l, c / heads))?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, l, dh) = x.dims3()?;
    Ok(x.reshape((bh / heads, heads, l, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((bh / heads, l, heads * dh))?)
}

/// Multi-head attention on already projected `[B, L, C]` tensors.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let out = scaled_dot_attention(&split_heads(q, heads)?, &split_heads(k, heads)?, &split_heads(v, heads)?)?;
    merge_heads(&out, heads)
}

/// Flat key indices `[h*w*window*window]` of each query's neighbourhood.
///
/// Windows are clamped at the border so every query attends to exactly
/// `window^2` keys; a window covering the whole map reduces to global
/// attention.
pub fn neighborhood_index(h: usize, w: usize, window: usize, device: &Device) -> Result<Tensor> {
    if window == 0 || window > h || window > w {
        return Err(Error::config(format!(
            "neighbourhood window {window} does not fit a {h}x{w} feature map"
        )));
    }
    let r = window / 2;
    let mut idx = Vec::with_capacity(h * w * window * window);
    for i in 0..h {
        let si = i.saturating_sub(r).min(h - window);
        for j in 0..w {
            let sj = j.saturating_sub(r).min(w - window);
            for di in 0..window {
                for dj in 0..window {
                    idx.push(((si + di) * w + sj + dj) as u32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(idx, h * w * window * window, device)?)
}

/// Local attention of each pixel over its `window x window` neighbourhood.
/// Inputs are `[B, h*w, d]` in row-major pixel order.
pub fn neighborhood_attention(q: &Tensor, k: &Tensor, v: &Tensor, h: usize, w: usize, window: usize) -> Result<Tensor> {
    let (b, l, d) = q.dims3()?;
    if l != h * w {
        return Err(Error::shape(format!("{l} tokens for a {h}x{w} map")));
    }
    let dv = v.dim(2)?;
    let idx = neighborhood_index(h, w, window, q.device())?;
    let n = window * window;
    let kg = k.contiguous()?.index_select(&idx, 1)?.reshape((b, l, n, d))?;
    let vg = v.contiguous()?.index_select(&idx, 1)?.reshape((b, l, n, dv))?;
    let scores = (kg.broadcast_mul(&q.unsqueeze(2)?)?.sum(D::Minus1)? / (d as f64).sqrt())?;
    let attn = softmax_last(&scores)?;
    Ok(vg.broadcast_mul(&attn.unsqueeze(3)?)?.sum(2)?)
}
