use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::maeprior::{MaeConfig, MaePrior};
use crate::mtcdn::{Mtcdn, MtcdnConfig};
use crate::nn::ParamStore;
use crate::schedule::Schedule;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mtcdn,
    Mae,
}

/// Header stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dtype: String,
    pub config: serde_json::Value,
    pub schedule: Option<Schedule>,
    pub train_config: Option<serde_json::Value>,
    pub epoch: usize,
    pub history: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind, dtype: DType, config: serde_json::Value) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind,
            dtype: dtype.as_str().to_string(),
            config,
            schedule: None,
            train_config: None,
            epoch: 0,
            history: serde_json::Value::Null,
        }
    }

    fn to_header(&self) -> Result<HashMap<String, String>> {
        let mut h = HashMap::new();
        h.insert("format_version".into(), self.format_version.to_string());
        h.insert("kind".into(), serde_json::to_string(&self.kind)?.trim_matches('"').to_string());
        h.insert("meta".into(), serde_json::to_string(self)?);
        Ok(h)
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

/// Writes parameters and header to `path` via a temporary file and rename.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let snapshot = store.snapshot()?;
    let mut raw = Vec::with_capacity(snapshot.len());
    for (name, t) in &snapshot {
        let (dt, bytes) = tensor_bytes(t)?;
        raw.push((name.clone(), dt, t.dims().to_vec(), bytes));
    }
    let views = raw
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::tensor::serialize(views, Some(meta.to_header()?)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads the header and every tensor of a checkpoint.
pub fn read_checkpoint(path: &Path, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    let version = info
        .get("format_version")
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(Error::Checkpoint(format!("unsupported format_version {version}")));
    }
    let meta: CheckpointMeta = serde_json::from_str(
        info.get("meta").ok_or_else(|| Error::Checkpoint("missing meta header".into()))?,
    )?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, device)?
            }
            Dtype::F32 => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

pub fn save_mtcdn(path: &Path, model: &Mtcdn, mut meta: CheckpointMeta) -> Result<()> {
    meta.kind = ModelKind::Mtcdn;
    meta.config = serde_json::to_value(model.config())?;
    meta.schedule = Some(*model.schedule());
    meta.dtype = model.dtype().as_str().to_string();
    save_checkpoint(path, model.params(), &meta)
}

pub fn load_mtcdn(path: &Path, device: &Device) -> Result<(Mtcdn, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path, device)?;
    if meta.kind != ModelKind::Mtcdn {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), meta.kind)));
    }
    let config: MtcdnConfig = serde_json::from_value(meta.config.clone())?;
    let schedule = meta.schedule.ok_or_else(|| Error::Checkpoint("missing schedule snapshot".into()))?;
    let model = Mtcdn::new(config, schedule, 0, parse_dtype(&meta.dtype)?, device)?;
    model.params().load(&tensors)?;
    Ok((model, meta))
}

pub fn save_mae(path: &Path, prior: &MaePrior, mut meta: CheckpointMeta) -> Result<()> {
    meta.kind = ModelKind::Mae;
    meta.config = serde_json::to_value(prior.config())?;
    meta.dtype = prior.params().dtype().as_str().to_string();
    save_checkpoint(path, prior.params(), &meta)
}

/// Loads a prior and freezes it.
pub fn load_mae(path: &Path, device: &Device) -> Result<(MaePrior, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path, device)?;
    if meta.kind != ModelKind::Mae {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), meta.kind)));
    }
    let config: MaeConfig = serde_json::from_value(meta.config.clone())?;
    let mut prior = MaePrior::new(config, 0, parse_dtype(&meta.dtype)?, device)?;
    prior.params().load(&tensors)?;
    prior.freeze();
    Ok((prior, meta))
}
