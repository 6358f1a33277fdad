use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::{info, warn};
use ndarray::Array3;
use saderkit::dresample::{GuideKind, StructuralPrior};
use saderkit::maeprior::{train_mae as fit_mae, MaePrior};
use saderkit::mtcdn::Mtcdn;
use saderkit::scenegen::{generate_split, ingest_external, read_manifest, write_split, DatasetManifest, MultiTemporalSample};
use saderkit::trainer::{
    load_mae, load_mtcdn, predict, run_ablation, save_mae, score, AblationInputs, CheckpointMeta, ModelKind, Trainer,
    CHECKPOINT_VERSION,
};
use saderkit::{Error, Result};
use serde_json::Value;

use crate::config::{is_explicit, RunConfig, SEED_ENV};
use crate::output::{read_f32, write_f32, write_png};
use crate::{AblateArgs, ConfigArgs, EvalArgs, SampleArgs, SynthArgs, TrainArgs, TrainMaeArgs};

fn resolve(args: &ConfigArgs, flags: Vec<(&str, Option<Value>)>) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), &overrides, env.as_deref())
}

fn load_split(root: &Path) -> Result<(DatasetManifest, Vec<MultiTemporalSample>)> {
    let manifest = read_manifest(root)?;
    let (samples, rejected) = ingest_external(&manifest).partition();
    for r in &rejected {
        warn!("skipping {}: {}", r.id, r.reason);
    }
    if samples.is_empty() {
        return Err(Error::data(root, "no loadable samples"));
    }
    Ok((manifest, samples))
}

/// Fills data-dependent model fields from the split.
fn fit_to_data(cfg: &mut RunConfig, m: &DatasetManifest) {
    cfg.model.in_channels = m.channels;
    cfg.model.out_channels = m.channels;
    cfg.model.frames = m.frames;
    cfg.model.aux_channels = m.aux_channels;
    cfg.eval.mae.channels = m.channels;
}

fn check_compatible(model: &Mtcdn, ckpt: &Path, m: &DatasetManifest) -> Result<()> {
    let c = model.config();
    if c.in_channels != m.channels || c.frames != m.frames || c.aux_channels != m.aux_channels {
        return Err(Error::Checkpoint(format!(
            "{} (format v{CHECKPOINT_VERSION}) expects T={} C={} aux={}, split has T={} C={} aux={}",
            ckpt.display(),
            c.frames,
            c.in_channels,
            c.aux_channels,
            m.frames,
            m.channels,
            m.aux_channels
        )));
    }
    Ok(())
}

fn load_prior(path: Option<&PathBuf>) -> Result<Option<MaePrior>> {
    path.map(|p| load_mae(p, &Device::Cpu).map(|(prior, _)| prior)).transpose()
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve(
        &a.cfg,
        vec![
            ("data.synth.n", a.n.map(Value::from)),
            ("data.synth.size", a.size.map(Value::from)),
            ("data.synth.frames", a.frames.map(Value::from)),
            ("data.synth.channels", a.channels.map(Value::from)),
            ("data.synth.coverage", a.coverage.map(Value::from)),
            ("data.synth.seed", a.seed.map(Value::from)),
            ("data.synth.aux", a.aux.then_some(Value::Bool(true))),
        ],
    )?;
    if a.out.exists() {
        if !a.force {
            return Err(Error::config(format!("{} exists; pass --force to replace it", a.out.display())));
        }
        fs::remove_dir_all(&a.out)?;
    }
    let samples = generate_split(&cfg.data.synth)?;
    let manifest = write_split(&a.out, &a.split, &samples)?;
    cfg.write(&a.out.join("config.json"))?;
    info!(
        "wrote {} scenes to {} (mean coverage {:.3})",
        manifest.ids.len(),
        a.out.display(),
        manifest.mean_coverage.unwrap_or(f32::NAN)
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(
        &a.cfg,
        vec![
            ("train.name", a.name.clone().map(Value::from)),
            ("train.epochs", a.epochs.map(Value::from)),
            ("train.seed", a.seed.map(Value::from)),
            ("train.run_dir", a.run_dir.as_ref().map(|p| Value::from(p.display().to_string()))),
        ],
    )?;
    let (manifest, samples) = load_split(&a.data)?;
    fit_to_data(&mut cfg, &manifest);
    cfg.validate()?;
    let dir = cfg.train.run_dir.join(&cfg.train.name);
    fs::create_dir_all(&dir)?;
    cfg.write(&dir.join("config.json"))?;
    let mut tc = cfg.training()?;
    tc.manifest = Some(a.data.clone());
    let mut trainer = Trainer::new(tc, cfg.dtype()?, &Device::Cpu)?;
    trainer.log_to(&dir.join("train.jsonl"))?;
    trainer.fit(&samples, Some(&dir))?;
    if let (Some(first), Some(last)) = (trainer.history.first(), trainer.history.last()) {
        info!("loss {:.4} -> {:.4} over {} epochs", first.mean_loss, last.mean_loss, trainer.history.len());
    }
    info!("run written to {}", dir.display());
    Ok(())
}

pub fn train_mae(a: &TrainMaeArgs) -> Result<()> {
    let mut cfg = resolve(&a.cfg, vec![("eval.mae_train.epochs", a.epochs.map(Value::from))])?;
    let (manifest, samples) = load_split(&a.data)?;
    fit_to_data(&mut cfg, &manifest);
    cfg.validate()?;
    let corpus: Vec<Array3<f32>> = samples.iter().map(|s| s.target.clone()).collect();
    let heldout: Vec<Array3<f32>> = match &a.heldout {
        Some(p) => load_split(p)?.1.into_iter().map(|s| s.target).collect(),
        None => Vec::new(),
    };
    let (prior, log) = fit_mae(&corpus, &heldout, &cfg.eval.mae, &cfg.eval.mae_train, cfg.dtype()?, &Device::Cpu)?;
    let mut meta = CheckpointMeta::new(ModelKind::Mae, cfg.dtype()?, Value::Null);
    meta.train_config = Some(serde_json::to_value(&cfg.eval.mae_train)?);
    meta.epoch = cfg.eval.mae_train.epochs;
    meta.history = serde_json::to_value(&log)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_mae(&a.out, &prior, meta)?;
    if let Some(l) = log.last() {
        info!("prior saved to {} (held-out loss {:.5})", a.out.display(), l.heldout_loss);
    }
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let mut cfg = resolve(
        &a.cfg,
        vec![
            ("sampler.steps", a.steps.map(Value::from)),
            ("sampler.resample", a.resample.map(Value::from)),
            ("sampler.guide", a.guide.map(|g| serde_json::to_value(GuideKind::from(g)).expect("enum serializes"))),
            ("sampler.threshold", a.th.map(Value::from)),
            ("sampler.seed", a.seed.map(Value::from)),
            ("eval.batch_size", a.jobs.map(Value::from)),
            ("eval.mae_checkpoint", a.mae.as_ref().map(|p| Value::from(p.display().to_string()))),
        ],
    )?;
    let (model, meta) = load_mtcdn(&a.ckpt, &Device::Cpu)?;
    let (manifest, mut samples) = load_split(&a.data)?;
    check_compatible(&model, &a.ckpt, &manifest)?;
    // T_h follows the split's mean cloud coverage unless set explicitly
    if a.th.is_none() && !is_explicit(a.cfg.config.as_deref(), &a.cfg.set, "sampler.threshold")? {
        if let Some(c) = manifest.mean_coverage {
            cfg.sampler.threshold = (c as f64).clamp(f64::EPSILON, 1.0);
            cfg.sampler.validate()?;
        }
    }
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    cfg.model = model.config().clone();
    cfg.schedule = *model.schedule();
    cfg.train.dtype = meta.dtype.clone();
    let prior = if cfg.sampler.guide == GuideKind::Mae {
        let p = load_prior(cfg.eval.mae_checkpoint.as_ref())?;
        if p.is_none() {
            return Err(Error::GuideUnavailable("the mae guide needs --mae <checkpoint>".into()));
        }
        p
    } else {
        None
    };
    fs::create_dir_all(&a.out)?;
    cfg.write(&a.out.join("config.json"))?;
    let preds = predict(
        &model,
        model.schedule(),
        &samples,
        &cfg.sampler,
        prior.as_ref().map(|p| p as &dyn StructuralPrior),
        cfg.eval.batch_size,
        model.dtype(),
        &Device::Cpu,
    )?;
    for p in &preds {
        let dir = a.out.join(&p.id);
        fs::create_dir_all(&dir)?;
        write_f32(&dir.join("pred.f32"), &p.image)?;
        write_png(&dir.join("pred.png"), &p.image, cfg.data.preview_bands)?;
        fs::write(dir.join("trace.json"), serde_json::to_string_pretty(&p.trace)?)?;
    }
    info!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, vec![])?;
    let (manifest, samples) = load_split(&a.data)?;
    let dims = (manifest.channels, manifest.height, manifest.width);
    let images = samples
        .iter()
        .map(|s| read_f32(&a.pred.join(&s.id).join("pred.f32"), dims))
        .collect::<Result<Vec<_>>>()?;
    let used = a.pred.join("config.json");
    let echo = match fs::read_to_string(&used) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => serde_json::to_value(&cfg)?,
    };
    let outcome = score(&samples, &images, echo)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    fs::write(out.join("per_sample.csv"), outcome.report.to_csv())?;
    let m = &outcome.report.aggregate;
    info!(
        "{} scenes: psnr {:.3} ssim {:.4} mae {:.4} rmse {:.4} cloud-region psnr {:.3}",
        outcome.report.count, m.psnr, m.ssim, m.mae, m.rmse, outcome.cloud_psnr
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = resolve(
        &a.cfg,
        vec![("eval.mae_checkpoint", a.mae.as_ref().map(|p| Value::from(p.display().to_string())))],
    )?;
    let (manifest, train) = load_split(&a.data)?;
    let (eval_manifest, eval) = load_split(&a.eval_data)?;
    if (eval_manifest.channels, eval_manifest.frames) != (manifest.channels, manifest.frames) {
        return Err(Error::data(&a.eval_data, "evaluation split does not match the training split layout"));
    }
    fit_to_data(&mut cfg, &manifest);
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    cfg.write(&a.out.join("config.json"))?;
    let prior = load_prior(cfg.eval.mae_checkpoint.as_ref())?;
    let inputs = AblationInputs {
        base: cfg.training()?,
        sampler: cfg.sampler.clone(),
        train: &train,
        eval: &eval,
        prior: prior.as_ref().map(|p| p as &dyn StructuralPrior),
        dtype: cfg.dtype()?,
        device: Device::Cpu,
        eval_batch: cfg.eval.batch_size,
    };
    let table = run_ablation(a.grid.into(), &inputs)?;
    fs::write(a.out.join("ablation.csv"), table.to_csv())?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    for r in &table.rows {
        match (&r.metrics, &r.error) {
            (Some(m), _) => info!("{:>18}: psnr {:.3} ssim {:.4}", r.name, m.psnr, m.ssim),
            (None, Some(e)) => warn!("{:>18}: failed: {e}", r.name),
            _ => {}
        }
    }
    Ok(())
}
