//! Training loop, evaluation helpers, checkpoints and ablation runs.

mod checkpoint;

pub use checkpoint::{
    load_mae, load_mtcdn, read_checkpoint, save_checkpoint, save_mae, save_mtcdn, CheckpointMeta, ModelKind,
    CHECKPOINT_VERSION,
};

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cloudloss::{cloud_masks, cloud_union, total_loss, LossWeights};
use crate::dresample::{sample, GuideKind, SampleTrace, SamplerConfig, StructuralPrior};
use crate::metrics::{evaluate, masked_psnr, MetricReport, SampleMetrics};
use crate::mtcdn::{Condition, Denoiser, Mtcdn, MtcdnConfig};
use crate::nn::RmsProp;
use crate::rng::stream;
use crate::scenegen::MultiTemporalSample;
use crate::schedule::{gaussian, Schedule};
use crate::{Error, Result};

/// Independent switches for the ablation axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_tf_block: bool,
    pub no_ha_block: bool,
    pub no_cloud_term: bool,
    pub no_uncloud_term: bool,
    pub no_brightness: bool,
    /// Replace the cloud-aware objective by an unmasked weighted MSE.
    pub plain_mse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Binarisation threshold for the cloud-free mask.
    pub tau: f32,
    pub model: MtcdnConfig,
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            loss: LossWeights::default(),
            tau: 0.05,
            model: MtcdnConfig::default(),
            schedule: Schedule::default(),
            ablation: Ablation::default(),
            manifest: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau {} outside (0, 1)", self.tau)));
        }
        self.effective_loss().validate()?;
        self.effective_model().validate()?;
        self.schedule.validate()
    }

    pub fn effective_model(&self) -> MtcdnConfig {
        let mut m = self.model.clone();
        m.use_tf_block &= !self.ablation.no_tf_block;
        m.use_ha_block &= !self.ablation.no_ha_block;
        m
    }

    pub fn effective_loss(&self) -> LossWeights {
        if self.ablation.plain_mse {
            return LossWeights::plain_mse();
        }
        let mut w = self.loss;
        if self.ablation.no_cloud_term {
            w.lambda_c = 0.0;
        }
        if self.ablation.no_uncloud_term {
            w.lambda_u = 0.0;
        }
        if self.ablation.no_brightness {
            w.lambda_b = 0.0;
        }
        w
    }
}

/// Maps `[0, 1]` values to the `[-1, 1]` training space.
pub fn to_training_space(v: f32) -> f32 {
    (v - 0.5) / 0.5
}

pub fn from_training_space(z: f32) -> f32 {
    (z * 0.5 + 0.5).clamp(0.0, 1.0)
}

fn stack_space(parts: &[&[f32]], dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f32> = parts.iter().flat_map(|p| p.iter().map(|&v| to_training_space(v))).collect();
    Ok(Tensor::from_vec(flat, dims, device)?.to_dtype(dtype)?)
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Vec<f32> {
    a.iter().copied().collect()
}

/// Conditioning tensors for a set of samples, in training space.
pub fn make_condition(samples: &[&MultiTemporalSample], dtype: DType, device: &Device) -> Result<Condition> {
    let first = samples.first().ok_or_else(|| Error::data("<batch>", "empty batch"))?;
    let (t, c, h, w) = first.frames.dim();
    let b = samples.len();
    let frames: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| {
            if s.frames.dim() != (t, c, h, w) {
                return Err(Error::shape(format!("sample {} has frames {:?}", s.id, s.frames.dim())));
            }
            Ok(slice_of(&s.frames))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let frames = stack_space(&refs, &[b, t, c, h, w], dtype, device)?;
    let aux = match first.aux.as_ref() {
        None => None,
        Some(a0) => {
            let ca = a0.dim().1;
            let parts: Vec<Vec<f32>> = samples
                .iter()
                .map(|s| {
                    s.aux
                        .as_ref()
                        .filter(|a| a.dim() == a0.dim())
                        .map(slice_of)
                        .ok_or_else(|| Error::data(&s.id, "auxiliary frames missing or mis-shaped"))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&[f32]> = parts.iter().map(Vec::as_slice).collect();
            Some(stack_space(&refs, &[b, t, ca, h, w], dtype, device)?)
        }
    };
    Condition::new(frames, aux)
}

/// Per-sample loss masks keyed by sample id; masks depend only on the data.
#[derive(Debug, Default)]
pub struct MaskCache {
    masks: HashMap<String, (Array2<f32>, Array2<f32>)>,
    pub hits: usize,
    pub misses: usize,
}

impl MaskCache {
    pub fn get(&mut self, s: &MultiTemporalSample, tau: f32) -> Result<(Array2<f32>, Array2<f32>)> {
        if let Some(m) = self.masks.get(&s.id) {
            self.hits += 1;
            return Ok(m.clone());
        }
        self.misses += 1;
        let m = cloud_masks(&s.target, &s.frames, s.cloud_radiance, tau)?;
        let pair = (m.m_a, m.m_ua);
        self.masks.insert(s.id.clone(), pair.clone());
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// A training batch in training space.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Clean target repeated over frames, `[B, T, C, H, W]`.
    pub target: Tensor,
    pub cond: Condition,
    /// `[B, 1, 1, H, W]`.
    pub m_a: Tensor,
    pub m_ua: Tensor,
}

pub fn make_batch(
    samples: &[&MultiTemporalSample],
    cache: &mut MaskCache,
    tau: f32,
    plain: bool,
    dtype: DType,
    device: &Device,
) -> Result<Batch> {
    let cond = make_condition(samples, dtype, device)?;
    let (b, t, c, h, w) = cond.dims()?;
    let targets: Vec<Vec<f32>> = samples.iter().map(|s| slice_of(&s.target)).collect();
    let refs: Vec<&[f32]> = targets.iter().map(Vec::as_slice).collect();
    let target = stack_space(&refs, &[b, 1, c, h, w], dtype, device)?
        .broadcast_as((b, t, c, h, w))?
        .contiguous()?;
    let (mut ma, mut mua) = (Vec::with_capacity(b * h * w), Vec::with_capacity(b * h * w));
    for s in samples {
        if plain {
            ma.extend(std::iter::repeat_n(1f32, h * w));
            mua.extend(std::iter::repeat_n(0f32, h * w));
        } else {
            let (a, u) = cache.get(s, tau)?;
            ma.extend(a.iter().copied());
            mua.extend(u.iter().copied());
        }
    }
    let lift = |v: Vec<f32>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, 1, 1, h, w), device)?.to_dtype(dtype)?) };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        target,
        cond,
        m_a: lift(ma)?,
        m_ua: lift(mua)?,
    })
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub sigma: Vec<f64>,
    pub l_cloud: f64,
    pub l_uncloud: f64,
    pub l_brightness: f64,
    pub total: f64,
}

/// Noise levels and perturbation noise for a step, keyed by `(seed, step)`.
pub fn step_noise(schedule: &Schedule, like: &Tensor, seed: u64, step: u64) -> Result<(Vec<f64>, Tensor)> {
    let (b, t, c, h, w) = like.dims5()?;
    let mut sigmas = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = stream(seed, &[0x5354_4550, step, i as u64]);
        sigmas.push(schedule.sample_training_sigma(&mut rng));
        eps.push(gaussian(&[t, c, h, w], like.dtype(), like.device(), &mut rng)?);
    }
    Ok((sigmas, Tensor::stack(&eps, 0)?))
}

/// Forward pass and loss for one batch at a given step, without updating.
pub fn batch_loss(
    model: &Mtcdn,
    batch: &Batch,
    weights: &LossWeights,
    seed: u64,
    step: u64,
) -> Result<(crate::cloudloss::LossBreakdown, Vec<f64>)> {
    batch_loss_inner(model, batch, weights, seed, step).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}, batch ids {:?}", batch.ids)),
        other => other,
    })
}

fn batch_loss_inner(
    model: &Mtcdn,
    batch: &Batch,
    weights: &LossWeights,
    seed: u64,
    step: u64,
) -> Result<(crate::cloudloss::LossBreakdown, Vec<f64>)> {
    let schedule = model.schedule();
    let (sigmas, eps) = step_noise(schedule, &batch.target, seed, step)?;
    let col = |v: &[f64]| -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), (v.len(), 1, 1, 1, 1), batch.target.device())?.to_dtype(batch.target.dtype())?)
    };
    let shift: Vec<f64> = sigmas.iter().map(|s| schedule.alpha * s).collect();
    let x = ((&batch.target + batch.cond.mean.broadcast_mul(&col(&shift)?)?)? + eps.broadcast_mul(&col(&sigmas)?)?)?;
    let pred = model.forward(&x, &sigmas, &batch.cond)?;
    let w_t = sigmas.iter().map(|&s| schedule.loss_weight(s)).collect::<Result<Vec<_>>>()?;
    let w_t = Tensor::from_vec(w_t, sigmas.len(), x.device())?.to_dtype(x.dtype())?;
    let loss = total_loss(&pred, &batch.target, &batch.m_a, &batch.m_ua, weights, &w_t)?;
    Ok((loss, sigmas))
}

/// One optimizer update.
pub fn train_step(
    model: &Mtcdn,
    opt: &mut RmsProp,
    batch: &Batch,
    weights: &LossWeights,
    seed: u64,
    step: u64,
    epoch: usize,
) -> Result<StepRecord> {
    let (loss, sigma) = batch_loss(model, batch, weights, seed, step)?;
    let grads = loss.total.backward()?;
    opt.step(&grads)?;
    Ok(StepRecord {
        step,
        epoch,
        sigma,
        l_cloud: loss.cloud,
        l_uncloud: loss.uncloud,
        l_brightness: loss.brightness,
        total: loss.total_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Owns a model, its optimizer and the mask cache for a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Mtcdn,
    opt: RmsProp,
    cache: MaskCache,
    step: u64,
    pub history: Vec<EpochSummary>,
    pub records: Vec<StepRecord>,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = Mtcdn::new(config.effective_model(), config.schedule, config.seed, dtype, device)?;
        let opt = RmsProp::new(model.params().named_vars(), config.lr)?;
        Ok(Self {
            config,
            model,
            opt,
            cache: MaskCache::default(),
            step: 0,
            history: Vec::new(),
            records: Vec::new(),
            log: None,
        })
    }

    /// Appends JSON-lines step records to `path`.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.log = Some(BufWriter::new(File::create(path)?));
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn mask_cache(&self) -> &MaskCache {
        &self.cache
    }

    /// One training step on the given samples.
    pub fn step_on(&mut self, samples: &[&MultiTemporalSample], epoch: usize) -> Result<StepRecord> {
        let weights = self.config.effective_loss();
        let batch = make_batch(
            samples,
            &mut self.cache,
            self.config.tau,
            self.config.ablation.plain_mse,
            self.model.dtype(),
            &self.model.device().clone(),
        )?;
        let rec = train_step(&self.model, &mut self.opt, &batch, &weights, self.config.seed, self.step, epoch)?;
        self.step += 1;
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        }
        self.records.push(rec.clone());
        Ok(rec)
    }

    pub fn train_epoch(&mut self, samples: &[MultiTemporalSample]) -> Result<EpochSummary> {
        if samples.is_empty() {
            return Err(Error::data("<train>", "empty training split"));
        }
        let epoch = self.history.len() + 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(self.config.seed, &[0x4550_4f43, epoch as u64]));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&MultiTemporalSample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += self.step_on(&batch, epoch)?.total;
            steps += 1;
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        let summary = EpochSummary {
            epoch,
            steps,
            mean_loss: total / steps as f64,
        };
        log::info!("{} epoch {epoch}: mean loss {:.5}", self.config.name, summary.mean_loss);
        self.history.push(summary.clone());
        Ok(summary)
    }

    /// Runs the configured epochs, checkpointing to `ckpt_dir/ckpt-<epoch>`.
    pub fn fit(&mut self, samples: &[MultiTemporalSample], ckpt_dir: Option<&Path>) -> Result<()> {
        for _ in 0..self.config.epochs {
            let summary = self.train_epoch(samples)?;
            if let Some(dir) = ckpt_dir {
                self.save(&dir.join(format!("ckpt-{}", summary.epoch)))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::new(ModelKind::Mtcdn, self.model.dtype(), serde_json::Value::Null);
        meta.train_config = Some(serde_json::to_value(&self.config)?);
        meta.epoch = self.history.len();
        meta.history = serde_json::to_value(&self.history)?;
        save_mtcdn(path, &self.model, meta)
    }
}

/// Stable per-scene noise key derived from the sample id.
pub fn scene_key(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn unit_images(estimate: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, c, h, w) = estimate.dims4()?;
    let v: Vec<f32> = estimate.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| {
            Array3::from_shape_vec((c, h, w), v[i * c * h * w..(i + 1) * c * h * w].iter().map(|&z| from_training_space(z)).collect())
                .expect("sizes match")
        })
        .collect())
}

/// A cloud-free estimate in `[0, 1]` plus the sampler trace.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub image: Array3<f32>,
    pub trace: SampleTrace,
}

/// Samples every scene, `batch_size` at a time.
pub fn predict(
    model: &dyn Denoiser,
    schedule: &Schedule,
    samples: &[MultiTemporalSample],
    sampler: &SamplerConfig,
    prior: Option<&dyn StructuralPrior>,
    batch_size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&MultiTemporalSample> = chunk.iter().collect();
        let cond = make_condition(&refs, dtype, device)?;
        let keys: Vec<u64> = chunk.iter().map(|s| scene_key(&s.id)).collect();
        let res = sample(model, &cond, schedule, sampler, prior, &keys, false)?;
        for (s, image) in chunk.iter().zip(unit_images(&res.estimate)?) {
            out.push(Prediction {
                id: s.id.clone(),
                image,
                trace: res.trace.clone(),
            });
        }
    }
    Ok(out)
}

/// Region used for cloud-region PSNR: the ground-truth cloud union when
/// known, else the complement of the cloud-free mask.
pub fn cloud_region(s: &MultiTemporalSample, tau: f32) -> Result<Array2<f32>> {
    match &s.alpha_true {
        Some(a) => Ok(cloud_union(a)),
        None => Ok(cloud_masks(&s.target, &s.frames, s.cloud_radiance, tau)?.m_ua.mapv(|v| 1.0 - v)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// Mean PSNR over cloud pixels, across scenes that have any.
    pub cloud_psnr: f64,
}

pub fn score(samples: &[MultiTemporalSample], images: &[Array3<f32>], config: serde_json::Value) -> Result<EvalOutcome> {
    if samples.len() != images.len() {
        return Err(Error::shape(format!("{} predictions for {} samples", images.len(), samples.len())));
    }
    let mut per = Vec::with_capacity(samples.len());
    let mut cloud = Vec::new();
    for (s, img) in samples.iter().zip(images) {
        per.push(evaluate(&s.id, img.view(), s.target.view())?);
        let region = cloud_region(s, 0.05)?;
        if region.iter().any(|&v| v > 0.0) {
            cloud.push(masked_psnr(img.view(), s.target.view(), region.view(), 1.0)?);
        }
    }
    let finite: Vec<f64> = cloud.iter().copied().filter(|v| v.is_finite()).collect();
    let cloud_psnr = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    Ok(EvalOutcome {
        report: MetricReport::from_samples(per, config)?,
        cloud_psnr,
    })
}

/// Reference predictions that need no model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    TemporalMean,
    LeastCloudy,
}

pub fn baseline_images(samples: &[MultiTemporalSample], kind: Baseline) -> Vec<Array3<f32>> {
    samples
        .iter()
        .map(|s| match kind {
            Baseline::TemporalMean => s.temporal_mean(),
            Baseline::LeastCloudy => s.frames.index_axis(Axis(0), s.least_cloudy_frame()).to_owned(),
        })
        .collect()
}

/// Which ablation table to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// Full model, without TFBlock, without HABlock.
    Architecture,
    /// Cloud-aware loss, plain MSE, and one row per removed term.
    Loss,
    /// Sampling steps {4, 5} x resampling rounds {0, 1, 2}.
    Sampler,
    /// Guide strategies none, mean, conv, mae.
    Guide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub sampler: SamplerConfig,
    pub metrics: Option<SampleMetrics>,
    pub cloud_psnr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,psnr,ssim,mae,rmse,sam,cloud_psnr,error\n");
        for r in &self.rows {
            let m = r.metrics.as_ref();
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name,
                f(m.map(|m| m.psnr)),
                f(m.map(|m| m.ssim)),
                f(m.map(|m| m.mae)),
                f(m.map(|m| m.rmse)),
                f(m.and_then(|m| m.sam)),
                f(r.cloud_psnr),
                r.error.clone().unwrap_or_default().replace(',', ";"),
            ));
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Shared inputs for an ablation run.
pub struct AblationInputs<'a> {
    pub base: TrainConfig,
    pub sampler: SamplerConfig,
    pub train: &'a [MultiTemporalSample],
    pub eval: &'a [MultiTemporalSample],
    pub prior: Option<&'a dyn StructuralPrior>,
    pub dtype: DType,
    pub device: Device,
    pub eval_batch: usize,
}

fn training_variants(grid: AblationGrid) -> Vec<(&'static str, Ablation)> {
    let a = Ablation::default();
    match grid {
        AblationGrid::Architecture => vec![
            ("full", a.clone()),
            ("w/o TFBlock", Ablation { no_tf_block: true, ..a.clone() }),
            ("w/o HABlock", Ablation { no_ha_block: true, ..a }),
        ],
        AblationGrid::Loss => vec![
            ("cloud-aware", a.clone()),
            ("plain MSE", Ablation { plain_mse: true, ..a.clone() }),
            ("w/o L_cloud", Ablation { no_cloud_term: true, ..a.clone() }),
            ("w/o L_uncloud", Ablation { no_uncloud_term: true, ..a.clone() }),
            ("w/o L_brightness", Ablation { no_brightness: true, ..a }),
        ],
        AblationGrid::Sampler | AblationGrid::Guide => vec![("full", a)],
    }
}

fn sampler_variants(grid: AblationGrid, base: &SamplerConfig) -> Vec<(String, SamplerConfig)> {
    match grid {
        AblationGrid::Sampler => [5usize, 4]
            .iter()
            .flat_map(|&n| {
                (0..=2).map(move |nr| (format!("{n}+{nr}"), SamplerConfig { steps: n, resample: nr, ..base.clone() }))
            })
            .collect(),
        AblationGrid::Guide => [
            ("w/o correction", GuideKind::None),
            ("mean-guided", GuideKind::Mean),
            ("conv-guided", GuideKind::Conv),
            ("mae-guided", GuideKind::Mae),
        ]
        .into_iter()
        .map(|(n, g)| (n.to_string(), SamplerConfig { guide: g, resample: base.resample.max(1), ..base.clone() }))
        .collect(),
        _ => vec![(String::new(), base.clone())],
    }
}

fn evaluate_variant(
    inputs: &AblationInputs,
    model: &Mtcdn,
    sampler: &SamplerConfig,
) -> Result<EvalOutcome> {
    let preds = predict(
        model,
        model.schedule(),
        inputs.eval,
        sampler,
        inputs.prior,
        inputs.eval_batch,
        inputs.dtype,
        &inputs.device,
    )?;
    let images: Vec<Array3<f32>> = preds.into_iter().map(|p| p.image).collect();
    score(inputs.eval, &images, serde_json::to_value(sampler)?)
}

/// Trains and evaluates every variant of `grid`. A failing variant is
/// recorded in its row and the others still run.
pub fn run_ablation(grid: AblationGrid, inputs: &AblationInputs) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, ablation) in training_variants(grid) {
        let cfg = TrainConfig {
            name: format!("{}-{}", inputs.base.name, name),
            ablation: ablation.clone(),
            ..inputs.base.clone()
        };
        let trained = Trainer::new(cfg, inputs.dtype, &inputs.device).and_then(|mut t| {
            t.fit(inputs.train, None)?;
            Ok(t)
        });
        for (sname, scfg) in sampler_variants(grid, &inputs.sampler) {
            let row_name = if sname.is_empty() { name.to_string() } else { sname };
            let outcome = trained
                .as_ref()
                .map_err(|e| Error::config(e.to_string()))
                .and_then(|t| evaluate_variant(inputs, &t.model, &scfg));
            rows.push(match outcome {
                Ok(o) => AblationRow {
                    name: row_name,
                    ablation: ablation.clone(),
                    sampler: scfg,
                    metrics: Some(o.report.aggregate),
                    cloud_psnr: Some(o.cloud_psnr),
                    error: None,
                },
                Err(e) => {
                    log::warn!("variant {row_name} failed: {e}");
                    AblationRow {
                        name: row_name,
                        ablation: ablation.clone(),
                        sampler: scfg,
                        metrics: None,
                        cloud_psnr: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    Ok(AblationTable { grid, rows })
}
