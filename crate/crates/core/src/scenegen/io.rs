//! On-disk sample layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>/meta.json
//! <root>/<id>/t{k}.f32        planar C x H x W, little-endian float32
//! <root>/<id>/target.f32
//! <root>/<id>/aux_t{k}.f32    optional
//! <root>/<id>/alpha_t{k}.f32  optional, synthetic ground truth H x W
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView, Axis, Dimension};
use serde::{Deserialize, Serialize};

use super::MultiTemporalSample;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Raw-to-reflectance mapping followed by the mean/std standardisation used
/// for diffusion training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub offset: f32,
    pub scale: f32,
    #[serde(default)]
    pub clip_min: Option<f32>,
    #[serde(default)]
    pub clip_max: Option<f32>,
    #[serde(default = "half")]
    pub mean: f32,
    #[serde(default = "half")]
    pub std: f32,
}

fn half() -> f32 {
    0.5
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    /// Values already stored in `[0, 1]`.
    pub fn identity() -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
            clip_min: None,
            clip_max: None,
            mean: 0.5,
            std: 0.5,
        }
    }

    /// Sentinel-2 digital numbers: clip to `[0, 10000]`, divide by 10000.
    pub fn sentinel2() -> Self {
        Self {
            offset: 0.0,
            scale: 10_000.0,
            clip_min: Some(0.0),
            clip_max: Some(10_000.0),
            mean: 0.5,
            std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale != 0.0 && self.std > 0.0) {
            return Err(Error::config("normalization scale and std must be nonzero"));
        }
        Ok(())
    }

    /// Raw value to reflectance (metric space).
    pub fn to_unit(&self, raw: f32) -> f32 {
        let mut v = raw;
        if let Some(lo) = self.clip_min {
            v = v.max(lo);
        }
        if let Some(hi) = self.clip_max {
            v = v.min(hi);
        }
        (v - self.offset) / self.scale
    }

    pub fn from_unit(&self, unit: f32) -> f32 {
        unit * self.scale + self.offset
    }

    /// Reflectance to diffusion training space.
    pub fn to_training(&self, unit: f32) -> f32 {
        (unit - self.mean) / self.std
    }

    pub fn from_training(&self, z: f32) -> f32 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub dtype: String,
    pub normalization: Normalization,
    #[serde(default)]
    pub aux_channels: usize,
    #[serde(default)]
    pub gains: Option<Vec<f32>>,
    #[serde(default)]
    pub coverage: Option<Vec<f32>>,
    #[serde(default)]
    pub cloud_radiance: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub format_version: u32,
    pub split: String,
    pub ids: Vec<String>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(default)]
    pub aux_channels: usize,
    pub normalization: Normalization,
    /// Mean per-frame cloud coverage of the split; default resampling `T_h`.
    #[serde(default)]
    pub mean_coverage: Option<f32>,
}

/// A sample that failed to load, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, e.to_string()))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::data(
            &path,
            format!("unsupported format_version {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    m.normalization.validate()?;
    m.root = root.to_path_buf();
    Ok(m)
}

fn write_f32<D: Dimension>(path: &Path, data: ArrayView<f32, D>, norm: &Normalization) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&norm.from_unit(v).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expected: usize) -> std::result::Result<Vec<f32>, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() != expected * 4 {
        return Err(format!(
            "{}: expected {} float32 values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(format!("{}: non-finite value at offset {pos}", path.display()));
    }
    Ok(values)
}

/// Writes one sample directory (values are converted from `[0, 1]` with `norm`).
pub fn write_sample(root: &Path, sample: &MultiTemporalSample, norm: &Normalization) -> Result<()> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(&dir)?;
    let (t, c, h, w) = sample.frames.dim();
    for k in 0..t {
        write_f32(&dir.join(format!("t{k}.f32")), sample.frames.index_axis(Axis(0), k), norm)?;
    }
    write_f32(&dir.join("target.f32"), sample.target.view(), norm)?;
    let mut aux_channels = 0;
    if let Some(aux) = &sample.aux {
        aux_channels = aux.dim().1;
        for k in 0..t {
            write_f32(
                &dir.join(format!("aux_t{k}.f32")),
                aux.index_axis(Axis(0), k),
                &Normalization::identity(),
            )?;
        }
    }
    if let Some(alpha) = &sample.alpha_true {
        for k in 0..t {
            write_f32(
                &dir.join(format!("alpha_t{k}.f32")),
                alpha.index_axis(Axis(0), k),
                &Normalization::identity(),
            )?;
        }
    }
    let meta = SampleMeta {
        frames: t,
        channels: c,
        height: h,
        width: w,
        dtype: "float32".into(),
        normalization: *norm,
        aux_channels,
        gains: Some(sample.gains.clone()),
        coverage: Some(sample.coverage.clone()),
        cloud_radiance: Some(sample.cloud_radiance),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes every sample plus `manifest.json` and returns the manifest.
pub fn write_split(root: &Path, split: &str, samples: &[MultiTemporalSample]) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::config("cannot write an empty split"))?;
    fs::create_dir_all(root)?;
    let norm = Normalization::identity();
    for s in samples {
        write_sample(root, s, &norm)?;
    }
    let (t, c, h, w) = first.frames.dim();
    let coverages: Vec<f32> = samples.iter().flat_map(|s| s.coverage.iter().copied()).collect();
    let mean_coverage =
        (!coverages.is_empty()).then(|| coverages.iter().map(|&v| v as f64).sum::<f64>() as f32 / coverages.len() as f32);
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        format_version: FORMAT_VERSION,
        split: split.to_string(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        frames: t,
        channels: c,
        height: h,
        width: w,
        aux_channels: first.aux.as_ref().map_or(0, |a| a.dim().1),
        normalization: norm,
        mean_coverage,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Lazily loads the samples listed in a manifest. Each item is either a
/// sample in `[0, 1]` space or a rejection describing why it was skipped.
pub struct IngestStream<'a> {
    manifest: &'a DatasetManifest,
    next: usize,
}

pub fn ingest_external(manifest: &DatasetManifest) -> IngestStream<'_> {
    IngestStream { manifest, next: 0 }
}

impl IngestStream<'_> {
    /// Drains the stream into loaded samples and rejections.
    pub fn partition(self) -> (Vec<MultiTemporalSample>, Vec<Rejection>) {
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        for item in self {
            match item {
                Ok(s) => ok.push(s),
                Err(r) => bad.push(r),
            }
        }
        (ok, bad)
    }
}

impl Iterator for IngestStream<'_> {
    type Item = std::result::Result<MultiTemporalSample, Rejection>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.manifest.ids.get(self.next)?.clone();
        self.next += 1;
        Some(load_sample(self.manifest, &id).map_err(|reason| Rejection { id, reason }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.manifest.ids.len() - self.next;
        (n, Some(n))
    }
}

fn load_sample(m: &DatasetManifest, id: &str) -> std::result::Result<MultiTemporalSample, String> {
    let dir = m.root.join(id);
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| format!("{}: {e}", meta_path.display()))?,
    )
    .map_err(|e| format!("{}: {e}", meta_path.display()))?;
    let dims = (meta.frames, meta.channels, meta.height, meta.width);
    if dims != (m.frames, m.channels, m.height, m.width) {
        return Err(format!(
            "shape {:?} does not match manifest {:?}",
            dims,
            (m.frames, m.channels, m.height, m.width)
        ));
    }
    let (t, c, h, w) = dims;
    let norm = meta.normalization;
    let plane = c * h * w;
    let mut frames = Vec::with_capacity(t * plane);
    for k in 0..t {
        frames.extend(read_f32(&dir.join(format!("t{k}.f32")), plane)?.into_iter().map(|v| norm.to_unit(v)));
    }
    let frames = Array4::from_shape_vec((t, c, h, w), frames).map_err(|e| e.to_string())?;
    let target: Vec<f32> = read_f32(&dir.join("target.f32"), plane)?
        .into_iter()
        .map(|v| norm.to_unit(v))
        .collect();
    let target = Array3::from_shape_vec((c, h, w), target).map_err(|e| e.to_string())?;

    let aux = if meta.aux_channels > 0 {
        let ca = meta.aux_channels;
        let mut buf = Vec::with_capacity(t * ca * h * w);
        for k in 0..t {
            buf.extend(read_f32(&dir.join(format!("aux_t{k}.f32")), ca * h * w)?);
        }
        Some(Array4::from_shape_vec((t, ca, h, w), buf).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let alpha_true = if dir.join("alpha_t0.f32").exists() {
        let mut buf = Vec::with_capacity(t * h * w);
        for k in 0..t {
            buf.extend(read_f32(&dir.join(format!("alpha_t{k}.f32")), h * w)?);
        }
        Some(Array3::from_shape_vec((t, h, w), buf).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let coverage = match (&meta.coverage, &alpha_true) {
        (Some(c), _) => c.clone(),
        (None, Some(a)) => (0..t)
            .map(|k| super::coverage_of(&a.index_axis(Axis(0), k).to_owned()))
            .collect(),
        (None, None) => Vec::new(),
    };
    Ok(MultiTemporalSample {
        id: id.to_string(),
        frames,
        target,
        aux,
        alpha_true,
        gains: meta.gains.unwrap_or_else(|| vec![1.0; t]),
        coverage,
        cloud_radiance: meta.cloud_radiance.unwrap_or(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_split, SynthConfig};

    #[test]
    fn normalization_protocol() {
        let n = Normalization::sentinel2();
        assert_eq!(n.to_unit(10_000.0), 1.0);
        assert_eq!(n.to_training(n.to_unit(0.0)), -1.0);
        assert_eq!(n.to_training(n.to_unit(25_000.0)), 1.0);
        assert_eq!(n.to_unit(-50.0), 0.0);
    }

    #[test]
    fn split_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n: 3,
            size: 16,
            aux: true,
            ..Default::default()
        };
        let samples = generate_split(&cfg).unwrap();
        write_split(dir.path(), "train", &samples).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.ids.len(), 3);
        let (loaded, rejected) = ingest_external(&m).partition();
        assert!(rejected.is_empty());
        assert_eq!(loaded, samples);
    }

    #[test]
    fn real_sentinel_tiles_are_scaled_and_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let id = "tile0";
        let sd = dir.path().join(id);
        fs::create_dir_all(&sd).unwrap();
        let raw = |vals: &[f32]| vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        let plane: Vec<f32> = (0..13 * 2 * 2).map(|i| if i == 0 { 12_000.0 } else { 5_000.0 }).collect();
        fs::write(sd.join("t0.f32"), raw(&plane)).unwrap();
        fs::write(sd.join("target.f32"), raw(&plane)).unwrap();
        let meta = SampleMeta {
            frames: 1,
            channels: 13,
            height: 2,
            width: 2,
            dtype: "float32".into(),
            normalization: Normalization::sentinel2(),
            aux_channels: 0,
            gains: None,
            coverage: None,
            cloud_radiance: None,
        };
        fs::write(sd.join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            format_version: FORMAT_VERSION,
            split: "test".into(),
            ids: vec![id.into()],
            frames: 1,
            channels: 13,
            height: 2,
            width: 2,
            aux_channels: 0,
            normalization: Normalization::sentinel2(),
            mean_coverage: None,
        };
        let (ok, bad) = ingest_external(&m).partition();
        assert!(bad.is_empty(), "{bad:?}");
        let s = &ok[0];
        assert!(s.alpha_true.is_none());
        let max_train = s.frames.iter().map(|&u| m.normalization.to_training(u)).fold(f32::MIN, f32::max);
        assert_eq!(max_train, 1.0);
        assert_eq!(s.frames[(0, 1, 0, 0)], 0.5);
    }

    #[test]
    fn broken_samples_are_rejected_individually() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n: 3,
            size: 8,
            ..Default::default()
        };
        let samples = generate_split(&cfg).unwrap();
        let mut m = write_split(dir.path(), "train", &samples).unwrap();
        // truncated frame
        fs::write(dir.path().join(&samples[0].id).join("t1.f32"), [0u8; 12]).unwrap();
        // non-finite target
        let nan: Vec<u8> = (0..3 * 8 * 8).flat_map(|_| f32::NAN.to_le_bytes()).collect();
        fs::write(dir.path().join(&samples[1].id).join("target.f32"), nan).unwrap();
        m.ids.push("missing".into());
        let (ok, bad) = ingest_external(&m).partition();
        assert_eq!(ok.len(), 1);
        assert_eq!(bad.len(), 3);
        assert!(bad[1].reason.contains("non-finite"));
    }
}
