use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::noise::fractal_noise;
use super::CloudLayer;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudConfig {
    pub height: usize,
    pub width: usize,
    /// Target fraction of pixels with nonzero alpha.
    pub coverage: f32,
    /// 1.0 gives hard-edged binary clouds; lower values widen the soft rim.
    pub hardness: f32,
    /// Peak opacity inside the cloud body.
    pub opacity: f32,
    pub octaves: usize,
    pub base_cells: usize,
    pub radiance: f32,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            coverage: 0.4,
            hardness: 0.6,
            opacity: 1.0,
            octaves: 3,
            base_cells: 3,
            radiance: 1.0,
        }
    }
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::config(format!("cloud coverage {} outside [0, 1]", self.coverage)));
        }
        if !(0.0..=1.0).contains(&self.hardness) || !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::config("cloud hardness and opacity must lie in [0, 1]"));
        }
        if !(self.radiance > 0.0 && self.radiance <= 1.0) {
            return Err(Error::config("cloud radiance must lie in (0, 1]"));
        }
        if self.height == 0 || self.width == 0 || self.octaves == 0 || self.base_cells == 0 {
            return Err(Error::config("cloud field dimensions must be positive"));
        }
        Ok(())
    }
}

/// Thresholded fractal noise with a smoothstep rim.
///
/// The threshold is the empirical quantile of the noise field, so the number
/// of pixels with `alpha > 0` is `round(coverage * P)` up to ties.
pub fn generate_cloud_alpha(cfg: &CloudConfig, seed: u64) -> Result<CloudLayer> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let p = h * w;
    let cloudy = (cfg.coverage as f64 * p as f64).round() as usize;
    if cloudy == 0 || cfg.opacity == 0.0 {
        return Ok(CloudLayer::new(Array2::zeros((h, w)), cfg.radiance));
    }
    let noise = fractal_noise(&mut stream(seed, &[0xc10d]), h, w, cfg.base_cells, cfg.octaves, 0.55);
    let mut sorted: Vec<f32> = noise.iter().copied().collect();
    sorted.sort_by(f32::total_cmp);
    let threshold = if cloudy >= p {
        sorted[0] - 1e-6
    } else {
        sorted[p - cloudy - 1]
    };
    let rim = 0.25 * (1.0 - cfg.hardness);
    let alpha = noise.mapv(|n| {
        if n <= threshold {
            0.0
        } else if rim <= 0.0 {
            cfg.opacity
        } else {
            let t = ((n - threshold) / rim).min(1.0);
            // Keep a strictly positive floor so the rim never rounds to zero.
            cfg.opacity * (t * t * (3.0 - 2.0 * t)).max(1e-3)
        }
    });
    Ok(CloudLayer::new(alpha, cfg.radiance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coverage_is_empty() {
        let cfg = CloudConfig {
            coverage: 0.0,
            ..Default::default()
        };
        let l = generate_cloud_alpha(&cfg, 3).unwrap();
        assert!(l.alpha.iter().all(|&a| a == 0.0));
        assert_eq!(l.coverage, 0.0);
    }

    #[test]
    fn full_hard_coverage_is_overcast() {
        let cfg = CloudConfig {
            coverage: 1.0,
            hardness: 1.0,
            ..Default::default()
        };
        let l = generate_cloud_alpha(&cfg, 3).unwrap();
        assert!(l.alpha.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn realised_coverage_tracks_target() {
        let cfg = CloudConfig {
            height: 64,
            width: 64,
            coverage: 0.4,
            ..Default::default()
        };
        for seed in 0..100 {
            let l = generate_cloud_alpha(&cfg, seed).unwrap();
            assert!((0.3..=0.5).contains(&l.coverage), "seed {seed}: {}", l.coverage);
            assert!(l.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn soft_edges_produce_partial_alpha() {
        let cfg = CloudConfig {
            hardness: 0.0,
            ..Default::default()
        };
        let l = generate_cloud_alpha(&cfg, 5).unwrap();
        assert!(l.alpha.iter().any(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn rejects_bad_coverage() {
        let cfg = CloudConfig {
            coverage: 1.5,
            ..Default::default()
        };
        assert!(generate_cloud_alpha(&cfg, 0).is_err());
    }
}
