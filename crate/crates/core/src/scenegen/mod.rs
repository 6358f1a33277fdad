//! Synthetic multi-temporal cloudy scenes with exact ground truth, plus the
//! on-disk sample format shared with real datasets.

mod cloud;
mod dataset;
mod io;
mod noise;
mod terrain;

pub use cloud::{generate_cloud_alpha, CloudConfig};
pub use dataset::{generate_sample, generate_split, SynthConfig};
pub use io::{
    ingest_external, read_manifest, write_sample, write_split, DatasetManifest, IngestStream,
    Normalization, Rejection, SampleMeta,
};
pub use terrain::{generate_terrain, TerrainConfig};

use ndarray::{Array2, Array3, Array4, Axis};

use crate::{Error, Result};

/// Cloud-free ground truth `[C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFreeScene {
    pub pixels: Array3<f32>,
    pub seed: u64,
}

/// A single cloud transparency field.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudLayer {
    pub alpha: Array2<f32>,
    pub cloud_radiance: f32,
    /// `mean(alpha > 0)`.
    pub coverage: f32,
}

impl CloudLayer {
    pub fn new(alpha: Array2<f32>, cloud_radiance: f32) -> Self {
        let coverage = coverage_of(&alpha);
        Self {
            alpha,
            cloud_radiance,
            coverage,
        }
    }
}

pub(crate) fn coverage_of(alpha: &Array2<f32>) -> f32 {
    let n = alpha.iter().filter(|&&a| a > 0.0).count();
    (n as f64 / alpha.len() as f64) as f32
}

/// One training or evaluation item. All optical values are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTemporalSample {
    pub id: String,
    /// Cloudy observations `[T, C, H, W]`.
    pub frames: Array4<f32>,
    /// Cloud-free target `[C, H, W]`.
    pub target: Array3<f32>,
    /// Auxiliary structure channels `[T, C_a, H, W]`.
    pub aux: Option<Array4<f32>>,
    /// Ground-truth transparency `[T, H, W]`; absent for real data.
    pub alpha_true: Option<Array3<f32>>,
    pub gains: Vec<f32>,
    pub coverage: Vec<f32>,
    pub cloud_radiance: f32,
}

impl MultiTemporalSample {
    pub fn frames_len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.frames.dim();
        (h, w)
    }

    /// Temporal mean of the cloudy frames `[C, H, W]`.
    pub fn temporal_mean(&self) -> Array3<f32> {
        self.frames.mean_axis(Axis(0)).expect("T >= 1")
    }

    /// Index of the frame with the lowest recorded coverage (ties: first).
    /// Without coverage bookkeeping the frame closest to the target is used.
    pub fn least_cloudy_frame(&self) -> usize {
        if self.coverage.len() == self.frames_len() {
            let mut best = 0;
            for (t, &c) in self.coverage.iter().enumerate() {
                if c < self.coverage[best] {
                    best = t;
                }
            }
            return best;
        }
        (0..self.frames_len())
            .map(|t| {
                let d = &self.frames.index_axis(Axis(0), t) - &self.target;
                (t, d.mapv(|v| v * v).sum())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
            .unwrap_or(0)
    }
}

/// Sobel gradient magnitude of the channel-mean image, replicate border.
pub fn sobel_magnitude(img: &Array3<f32>) -> Array2<f32> {
    let gray = img.mean_axis(Axis(0)).expect("C >= 1");
    let (h, w) = gray.dim();
    let at = |i: isize, j: isize| {
        gray[(
            i.clamp(0, h as isize - 1) as usize,
            j.clamp(0, w as isize - 1) as usize,
        )]
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
            - at(i - 1, j - 1)
            - 2.0 * at(i, j - 1)
            - at(i + 1, j - 1);
        let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
            - at(i - 1, j - 1)
            - 2.0 * at(i - 1, j)
            - at(i - 1, j + 1);
        (gx * gx + gy * gy).sqrt()
    })
}

/// Composites cloud layers over a scene:
/// `X_t = clamp(gain_t * ((1 - a_t) * y + a_t * I_cloud), 0, 1)`.
pub fn composite_sample(
    id: impl Into<String>,
    scene: &CloudFreeScene,
    layers: &[CloudLayer],
    gains: &[f32],
    aux: bool,
) -> Result<MultiTemporalSample> {
    let (c, h, w) = scene.pixels.dim();
    if layers.is_empty() {
        return Err(Error::shape("at least one cloud layer is required"));
    }
    if layers.len() != gains.len() {
        return Err(Error::shape(format!(
            "{} cloud layers but {} gains",
            layers.len(),
            gains.len()
        )));
    }
    if let Some(l) = layers.iter().find(|l| l.alpha.dim() != (h, w)) {
        return Err(Error::shape(format!(
            "cloud layer {:?} does not match scene {:?}",
            l.alpha.dim(),
            (h, w)
        )));
    }
    let t = layers.len();
    let radiance = layers[0].cloud_radiance;
    let mut frames = Array4::<f32>::zeros((t, c, h, w));
    let mut alpha_true = Array3::<f32>::zeros((t, h, w));
    for (k, (layer, &gain)) in layers.iter().zip(gains).enumerate() {
        alpha_true.index_axis_mut(Axis(0), k).assign(&layer.alpha);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let a = layer.alpha[(i, j)] as f64;
                    let y = scene.pixels[(ch, i, j)] as f64;
                    let v = gain as f64 * ((1.0 - a) * y + a * layer.cloud_radiance as f64);
                    frames[(k, ch, i, j)] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let aux = aux.then(|| {
        let edges = sobel_magnitude(&scene.pixels);
        let edges = edges.insert_axis(Axis(0));
        let frame = edges.broadcast((t, 1, h, w)).expect("broadcast").to_owned();
        frame
    });
    Ok(MultiTemporalSample {
        id: id.into(),
        frames,
        target: scene.pixels.clone(),
        aux,
        alpha_true: Some(alpha_true),
        gains: gains.to_vec(),
        coverage: layers.iter().map(|l| l.coverage).collect(),
        cloud_radiance: radiance,
    })
}
