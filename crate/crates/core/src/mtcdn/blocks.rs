use candle_core::{Tensor, D};

use crate::nn::{
    merge_heads, multi_head_attention, neighborhood_attention, sigmoid, softmax_last, softplus, split_heads, Builder,
    Conv2d, GroupNorm, Init, Linear,
};
use crate::{Error, Result};

/// Fourier features of `c_noise = ln(sigma) / 4` through a two-layer MLP.
#[derive(Debug, Clone)]
pub struct NoiseEmbedding {
    freqs: Vec<f64>,
    fc1: Linear,
    fc2: Linear,
}

impl NoiseEmbedding {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::config(format!("embed_dim must be even and >= 2, got {dim}")));
        }
        let half = dim / 2;
        let freqs = (0..half)
            .map(|k| (k as f64 / (half.max(2) - 1) as f64 * 100f64.ln()).exp())
            .collect();
        Ok(Self {
            freqs,
            fc1: Linear::new(&b.pp("fc1"), dim, dim)?,
            fc2: Linear::new(&b.pp("fc2"), dim, dim)?,
        })
    }

    pub fn c_noise(sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }

    /// `[B]` levels to `[B, dim]` embeddings.
    pub fn forward(&self, sigmas: &[f64], like: &Tensor) -> Result<Tensor> {
        let half = self.freqs.len();
        let mut feats = Vec::with_capacity(sigmas.len() * half * 2);
        for &s in sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Numeric(format!("noise level {s} has no embedding")));
            }
            let c = Self::c_noise(s);
            feats.extend(self.freqs.iter().map(|f| (c * f).sin()));
            feats.extend(self.freqs.iter().map(|f| (c * f).cos()));
        }
        let x = Tensor::from_vec(feats, (sigmas.len(), 2 * half), like.device())?.to_dtype(like.dtype())?;
        Ok(self.fc2.forward(&self.fc1.forward(&x)?.silu()?)?)
    }
}

/// Pre-norm residual block with an additive noise-embedding shift.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(b: &Builder, c_in: usize, c_out: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, c_out, 3)?,
            emb: Linear::new(&b.pp("emb"), embed_dim, c_out)?,
            norm2: GroupNorm::new(&b.pp("norm2"), c_out)?,
            conv2: Conv2d::with_init(&b.pp("conv2"), c_out, c_out, 3, Init::Fan { fan_in: c_out * 9, gain: 0.5 })?,
            skip: (c_in != c_out).then(|| Conv2d::new(&b.pp("skip"), c_in, c_out, 1)).transpose()?,
        })
    }

    /// `x`: `[N, C, H, W]`, `emb`: `[N, E]`.
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let shift = self.emb.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// `[B, T, C, H, W] -> [B*H*W, T, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = x.dims5()?;
    Ok(x.permute((0, 3, 4, 1, 2))?.contiguous()?.reshape((b * h * w, t, c))?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, t, c) = x.dims3()?;
    Ok(x.reshape((b, h, w, t, c))?.permute((0, 3, 4, 1, 2))?.contiguous()?)
}

/// Multi-head attention over a handful of tokens (frames), computed with
/// broadcasts rather than many tiny matmuls. `[M, Lq, C]`, `[M, Lk, C]`.
pub fn temporal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (m, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    if c % heads != 0 {
        return Err(Error::shape(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;
    let q = q.reshape((m, lq, heads, dh))?.transpose(1, 2)?; // [M, nh, Lq, dh]
    let k = k.reshape((m, lk, heads, dh))?.transpose(1, 2)?;
    let v = v.reshape((m, lk, heads, dh))?.transpose(1, 2)?;
    let scores = (q.unsqueeze(3)?.broadcast_mul(&k.unsqueeze(2)?)?.sum(D::Minus1)? / (dh as f64).sqrt())?;
    let attn = softmax_last(&scores)?; // [M, nh, Lq, Lk]
    let out = attn.unsqueeze(4)?.broadcast_mul(&v.unsqueeze(2)?)?.sum(3)?; // [M, nh, Lq, dh]
    Ok(out.transpose(1, 2)?.reshape((m, lq, c))?)
}

/// Keys and values produced by the temporal attention encoder, `[B, T, C, H, W]`.
#[derive(Debug, Clone)]
pub struct TemporalKv {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Output of the temporal attention encoder.
#[derive(Debug, Clone)]
pub struct TaeOutput {
    /// Attention-pooled features `[B, C, H, W]`.
    pub fused: Tensor,
    pub kv: TemporalKv,
    /// Pooling weights `[B*H*W, heads, T]`.
    pub weights: Tensor,
}

/// Temporal attention encoder: a query derived from the temporal mean pools
/// per-frame features, head by head.
#[derive(Debug, Clone)]
pub struct Tae {
    key: Linear,
    query: Linear,
    position: Option<Tensor>,
    heads: usize,
}

impl Tae {
    pub fn new(b: &Builder, channels: usize, frames: usize, heads: usize, position: bool) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::config(format!("{channels} channels do not split into {heads} heads")));
        }
        let position = position
            .then(|| b.param("position", &[frames, channels], Init::Normal(0.1)))
            .transpose()?;
        Ok(Self {
            key: Linear::new(&b.pp("key"), channels, channels)?,
            query: Linear::new(&b.pp("query"), channels, channels)?,
            position,
            heads,
        })
    }

    pub fn forward(&self, feats: &Tensor) -> Result<TaeOutput> {
        let (b, t, c, h, w) = feats.dims5()?;
        let tokens = to_tokens(feats)?; // [M, T, C]
        let m = tokens.dim(0)?;
        let positioned = match &self.position {
            Some(p) => {
                if p.dim(0)? != t {
                    return Err(Error::shape(format!("position encoding for {} frames, got {t}", p.dim(0)?)));
                }
                tokens.broadcast_add(&p.unsqueeze(0)?)?
            }
            None => tokens.clone(),
        };
        let dh = c / self.heads;
        let keys = self.key.forward(&positioned)?;
        let query = self.query.forward(&positioned.mean(1)?)?;
        let k = keys.reshape((m, t, self.heads, dh))?;
        let q = query.reshape((m, 1, self.heads, dh))?;
        let scores = (k.broadcast_mul(&q)?.sum(D::Minus1)? / (dh as f64).sqrt())?; // [M, T, nh]
        let weights = softmax_last(&scores.transpose(1, 2)?.contiguous()?)?; // [M, nh, T]
        let values = tokens.reshape((m, t, self.heads, dh))?.transpose(1, 2)?; // [M, nh, T, dh]
        let pooled = values.broadcast_mul(&weights.unsqueeze(3)?)?.sum(2)?.reshape((m, 1, c))?;
        let fused = from_tokens(&pooled, b, h, w)?.squeeze(1)?;
        Ok(TaeOutput {
            fused,
            kv: TemporalKv {
                keys: from_tokens(&keys, b, h, w)?,
                values: feats.clone(),
            },
            weights,
        })
    }
}

/// How the temporal fusion gate is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Learned,
    Fixed(f64),
}

/// The three pieces of a temporal fusion pass, each `[B, T, C, H, W]`
/// (the gate has one channel).
#[derive(Debug, Clone)]
pub struct TfBranches {
    pub self_attn: Tensor,
    pub cross_attn: Tensor,
    pub gate: Tensor,
    pub fused: Tensor,
}

/// Temporal self-attention and cross-attention to the conditional keys and
/// values, mixed by a sigmoid gate: `v * cross + (1 - v) * self`.
#[derive(Debug, Clone)]
pub struct TfBlock {
    norm: GroupNorm,
    q_self: Linear,
    k_self: Linear,
    v_self: Linear,
    o_self: Linear,
    q_cross: Linear,
    k_cross: Linear,
    v_cross: Linear,
    o_cross: Linear,
    gate: Linear,
    heads: usize,
}

impl TfBlock {
    pub fn new(b: &Builder, channels: usize, cond_channels: usize, heads: usize) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::config(format!("{channels} channels do not split into {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), channels)?,
            q_self: Linear::new(&b.pp("q_self"), channels, channels)?,
            k_self: Linear::new(&b.pp("k_self"), channels, channels)?,
            v_self: Linear::new(&b.pp("v_self"), channels, channels)?,
            o_self: Linear::new(&b.pp("o_self"), channels, channels)?,
            q_cross: Linear::new(&b.pp("q_cross"), channels, channels)?,
            k_cross: Linear::new(&b.pp("k_cross"), cond_channels, channels)?,
            v_cross: Linear::new(&b.pp("v_cross"), cond_channels, channels)?,
            o_cross: Linear::new(&b.pp("o_cross"), channels, channels)?,
            gate: Linear::new(&b.pp("gate"), 2 * channels, 1)?,
            heads,
        })
    }

    pub fn branches(&self, f_diff: &Tensor, kv: &TemporalKv, gate: Gate) -> Result<TfBranches> {
        let (b, t, c, h, w) = f_diff.dims5()?;
        let (_, _, _, kh, kw) = kv.keys.dims5()?;
        if (kh, kw) != (h, w) {
            return Err(Error::shape(format!("KV is {kh}x{kw}, features are {h}x{w}")));
        }
        let normed = self.norm.forward(&f_diff.reshape((b * t, c, h, w))?)?.reshape((b, t, c, h, w))?;
        let x = to_tokens(&normed)?;
        let self_attn = self.o_self.forward(&temporal_attention(
            &self.q_self.forward(&x)?,
            &self.k_self.forward(&x)?,
            &self.v_self.forward(&x)?,
            self.heads,
        )?)?;
        let keys = to_tokens(&kv.keys)?;
        let values = to_tokens(&kv.values)?;
        let cross_attn = self.o_cross.forward(&temporal_attention(
            &self.q_cross.forward(&x)?,
            &self.k_cross.forward(&keys)?,
            &self.v_cross.forward(&values)?,
            self.heads,
        )?)?;
        let v = match gate {
            Gate::Learned => sigmoid(&self.gate.forward(&Tensor::cat(&[&cross_attn, &self_attn], 2)?)?)?,
            Gate::Fixed(g) => (Tensor::ones((x.dim(0)?, t, 1), x.dtype(), x.device())? * g)?,
        };
        let one_minus = (1.0 - &v)?;
        let fused = (cross_attn.broadcast_mul(&v)? + self_attn.broadcast_mul(&one_minus)?)?;
        Ok(TfBranches {
            self_attn: from_tokens(&self_attn, b, h, w)?,
            cross_attn: from_tokens(&cross_attn, b, h, w)?,
            gate: from_tokens(&v, b, h, w)?,
            fused: from_tokens(&fused, b, h, w)?,
        })
    }

    pub fn forward(&self, f_diff: &Tensor, kv: &TemporalKv, gate: Gate) -> Result<Tensor> {
        Ok(self.branches(f_diff, kv, gate)?.fused)
    }
}

/// How the hybrid attention mixing coefficients are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gammas {
    Learned,
    Fixed(f64, f64),
}

#[derive(Debug, Clone)]
pub struct HaBranches {
    pub global: Tensor,
    pub neighborhood: Tensor,
    /// `[N, 2]`, nonnegative.
    pub gammas: Tensor,
    pub fused: Tensor,
}

/// `gamma_1 * GlobalAttn(F) + gamma_2 * NeighborhoodAttn(F)` with the
/// coefficients predicted from the noise embedding.
#[derive(Debug, Clone)]
pub struct HaBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gamma_fc1: Linear,
    gamma_fc2: Linear,
    heads: usize,
    window: usize,
}

impl HaBlock {
    pub fn new(b: &Builder, channels: usize, embed_dim: usize, heads: usize, window: usize) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::config(format!("{channels} channels do not split into {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), channels)?,
            q: Linear::new(&b.pp("q"), channels, channels)?,
            k: Linear::new(&b.pp("k"), channels, channels)?,
            v: Linear::new(&b.pp("v"), channels, channels)?,
            o: Linear::new(&b.pp("o"), channels, channels)?,
            gamma_fc1: Linear::new(&b.pp("gamma1"), embed_dim, embed_dim)?,
            gamma_fc2: Linear::new(&b.pp("gamma2"), embed_dim, 2)?,
            heads,
            window,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn branches(&self, f: &Tensor, emb: &Tensor, gammas: Gammas) -> Result<HaBranches> {
        let (n, c, h, w) = f.dims4()?;
        if self.window > h || self.window > w {
            return Err(Error::config(format!(
                "neighbourhood window {} larger than the {h}x{w} feature map",
                self.window
            )));
        }
        let x = self.norm.forward(f)?.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let (q, k, v) = (self.q.forward(&x)?, self.k.forward(&x)?, self.v.forward(&x)?);
        let global = self.o.forward(&multi_head_attention(&q, &k, &v, self.heads)?)?;
        let local = neighborhood_attention(
            &split_heads(&q, self.heads)?,
            &split_heads(&k, self.heads)?,
            &split_heads(&v, self.heads)?,
            h,
            w,
            self.window,
        )?;
        let local = self.o.forward(&merge_heads(&local, self.heads)?)?;
        let g = match gammas {
            Gammas::Learned => softplus(&self.gamma_fc2.forward(&self.gamma_fc1.forward(&emb.silu()?)?.silu()?)?)?,
            Gammas::Fixed(a, b) => Tensor::from_vec(vec![a, b], (1, 2), f.device())?
                .to_dtype(f.dtype())?
                .broadcast_as((n, 2))?
                .contiguous()?,
        };
        let g1 = g.narrow(1, 0, 1)?.unsqueeze(2)?;
        let g2 = g.narrow(1, 1, 1)?.unsqueeze(2)?;
        let fused = (global.broadcast_mul(&g1)? + local.broadcast_mul(&g2)?)?;
        let back = |t: &Tensor| -> Result<Tensor> { Ok(t.transpose(1, 2)?.reshape((n, c, h, w))?) };
        Ok(HaBranches {
            global: back(&global)?,
            neighborhood: back(&local)?,
            gammas: g,
            fused: back(&fused)?,
        })
    }

    pub fn forward(&self, f: &Tensor, emb: &Tensor, gammas: Gammas) -> Result<Tensor> {
        Ok(self.branches(f, emb, gammas)?.fused)
    }
}
