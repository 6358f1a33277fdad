use std::path::{Path, PathBuf};

use saderkit::cloudloss::LossWeights;
use saderkit::dresample::SamplerConfig;
use saderkit::maeprior::{MaeConfig, MaeTrainConfig};
use saderkit::mtcdn::MtcdnConfig;
use saderkit::scenegen::SynthConfig;
use saderkit::schedule::Schedule;
use saderkit::trainer::{Ablation, TrainConfig};
use saderkit::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "SADERKIT_SEED";

/// Paths that fall back to `SADERKIT_SEED` when neither the file nor a flag sets them.
const SEED_PATHS: [&str; 4] = ["data.synth.seed", "train.seed", "sampler.seed", "eval.mae_train.seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synth: SynthConfig,
    /// Bands rendered as R, G, B in PNG previews.
    pub preview_bands: [usize; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), preview_bands: [0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau: f32,
    pub ablation: Ablation,
    pub run_dir: PathBuf,
    /// "f32" or "f64".
    pub dtype: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            name: t.name,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            tau: t.tau,
            ablation: t.ablation,
            run_dir: PathBuf::from("runs"),
            dtype: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
    pub mae: MaeConfig,
    pub mae_train: MaeTrainConfig,
    /// Frozen prior used by the `mae` guide.
    pub mae_checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            mae: MaeConfig::default(),
            mae_train: MaeTrainConfig::default(),
            mae_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: Schedule,
    pub model: MtcdnConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Builds a config from defaults, an optional file, the seed environment
    /// variable and `path=value` overrides, in increasing precedence.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)], env_seed: Option<&str>) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let base: RunConfig = serde_json::from_value(file_value.clone()).map_err(|e| Error::config(e.to_string()))?;
        let mut value = serde_json::to_value(&base)?;
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            for path in SEED_PATHS {
                if lookup(&file_value, path).is_none() {
                    set_path(&mut value, path, Value::from(seed))?;
                }
            }
        }
        for (path, v) in overrides {
            set_path(&mut value, path, v.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.eval.mae.validate()?;
        self.training()?.validate()?;
        self.dtype()?;
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn training(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            name: t.name.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            loss: self.loss,
            tau: t.tau,
            model: self.model.clone(),
            schedule: self.schedule,
            ablation: t.ablation.clone(),
            manifest: None,
        })
    }

    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.train.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(Error::config(format!("train.dtype must be f32 or f64, got {other:?}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Parses `a.b.c=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(s: &str) -> std::result::Result<(String, Value), String> {
    let (path, raw) = s.split_once('=').ok_or_else(|| format!("expected path=value, got {s:?}"))?;
    if path.is_empty() {
        return Err(format!("empty path in {s:?}"));
    }
    let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), v))
}

/// Whether the config file or an override assigns `path` explicitly.
pub fn is_explicit(file: Option<&Path>, overrides: &[(String, Value)], path: &str) -> Result<bool> {
    if overrides.iter().any(|(k, _)| k == path) {
        return Ok(true);
    }
    let Some(f) = file else { return Ok(false) };
    let text = std::fs::read_to_string(f).map_err(|e| Error::config(format!("{}: {e}", f.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", f.display())))?;
    Ok(lookup(&v, path).is_some())
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, key| cur.get(key))
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{path}: {} is not a section", keys[..i].join("."))))?;
        let slot = obj.get_mut(*key).ok_or_else(|| Error::config(format!("unknown config key {path}")))?;
        if i + 1 == keys.len() {
            *slot = v;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one key")
}
