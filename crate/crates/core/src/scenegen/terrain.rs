use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::noise::fractal_noise;
use super::CloudFreeScene;
use crate::rng::stream;
use crate::{Error, Result};

/// Parameters of the procedural ground-truth generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub octaves: usize,
    pub base_cells: usize,
    pub persistence: f32,
    /// Expected number of field patches per 256 pixels; roads scale with it too.
    pub feature_density: f32,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            octaves: 4,
            base_cells: 2,
            persistence: 0.5,
            feature_density: 0.5,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!(
                "terrain must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !matches!(self.channels, 1 | 3 | 13) {
            return Err(Error::config(format!(
                "channel count must be 1, 3 or 13, got {}",
                self.channels
            )));
        }
        if self.octaves == 0 || self.base_cells == 0 {
            return Err(Error::config("octaves and base_cells must be positive"));
        }
        if !(self.feature_density >= 0.0 && self.feature_density.is_finite()) {
            return Err(Error::config("feature_density must be finite and nonnegative"));
        }
        Ok(())
    }
}

const LATENTS: usize = 3;

/// Smooth multi-octave terrain plus rectangular fields and straight roads.
pub fn generate_terrain(cfg: &TerrainConfig, seed: u64) -> Result<CloudFreeScene> {
    cfg.validate()?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = stream(seed, &[0x7e77a1]);

    // A few latent fields mixed through random spectral signatures keep the
    // bands correlated the way real reflectance is.
    let latents: Vec<Array2<f32>> = (0..LATENTS)
        .map(|_| fractal_noise(&mut rng, h, w, cfg.base_cells, cfg.octaves, cfg.persistence))
        .collect();
    let signatures: Vec<[f32; LATENTS]> = (0..c)
        .map(|_| {
            let raw: [f32; LATENTS] = std::array::from_fn(|_| rng.random::<f32>() + 0.1);
            let s: f32 = raw.iter().sum();
            raw.map(|v| v / s)
        })
        .collect();
    let mut pixels = Array3::<f32>::zeros((c, h, w));
    for (ch, sig) in signatures.iter().enumerate() {
        let mut band = pixels.index_axis_mut(ndarray::Axis(0), ch);
        for (k, lat) in latents.iter().enumerate() {
            band.scaled_add(sig[k], lat);
        }
        band.mapv_inplace(|v| 0.1 + 0.8 * v);
    }

    let n_fields = (cfg.feature_density * (h * w) as f32 / 256.0).round() as usize;
    for _ in 0..n_fields {
        let fh = rng.random_range(h / 8..=h / 3).max(2);
        let fw = rng.random_range(w / 8..=w / 3).max(2);
        let y0 = rng.random_range(0..h - fh);
        let x0 = rng.random_range(0..w - fw);
        let colour: Vec<f32> = (0..c).map(|_| rng.random_range(0.15..0.85)).collect();
        for ch in 0..c {
            for i in y0..y0 + fh {
                for j in x0..x0 + fw {
                    let v = &mut pixels[(ch, i, j)];
                    *v = 0.4 * *v + 0.6 * colour[ch];
                }
            }
        }
    }

    let n_roads = (cfg.feature_density * 2.0).round() as usize;
    for _ in 0..n_roads {
        let brightness = rng.random_range(0.6..0.9f32);
        let horizontal = rng.random::<bool>();
        let start = rng.random_range(0..if horizontal { h } else { w });
        let slope = rng.random_range(-0.5..0.5f32);
        let len = if horizontal { w } else { h };
        for s in 0..len {
            let off = (start as f32 + slope * s as f32).round() as isize;
            let (i, j) = if horizontal { (off, s as isize) } else { (s as isize, off) };
            if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
                continue;
            }
            for ch in 0..c {
                pixels[(ch, i as usize, j as usize)] = brightness;
            }
        }
    }

    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(CloudFreeScene { pixels, seed })
}
