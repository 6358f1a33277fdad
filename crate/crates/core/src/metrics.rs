//! PSNR, SSIM, MAE, RMSE and SAM on `[C, H, W]` images in `[0, 1]`.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_shapes(pred: &ArrayView3<f32>, target: &ArrayView3<f32>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty image"));
    }
    Ok(())
}

fn mse(pred: &ArrayView3<f32>, target: &ArrayView3<f32>) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(pred: ArrayView3<f32>, target: ArrayView3<f32>, data_range: f64) -> Result<f64> {
    check_shapes(&pred, &target)?;
    if data_range <= 0.0 {
        return Err(Error::config("data_range must be positive"));
    }
    Ok(psnr_from_mse(mse(&pred, &target), data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (mse / (data_range * data_range)).log10()
    }
}

/// PSNR restricted to pixels where `mask > 0` (all channels).
pub fn masked_psnr(pred: ArrayView3<f32>, target: ArrayView3<f32>, mask: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let (c, h, w) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!("mask {:?} vs image {:?}", mask.dim(), (h, w))));
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ch in 0..c {
        for ((i, j), &m) in mask.indexed_iter() {
            if m > 0.0 {
                acc += (pred[(ch, i, j)] as f64 - target[(ch, i, j)] as f64).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Numeric("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(acc / n as f64, data_range))
}

pub fn mae_metric(pred: ArrayView3<f32>, target: ArrayView3<f32>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n)
}

pub fn rmse(pred: ArrayView3<f32>, target: ArrayView3<f32>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    Ok(mse(&pred, &target).sqrt())
}

/// Mean spectral angle in degrees over pixels where both spectra are nonzero.
pub fn sam(pred: ArrayView3<f32>, target: ArrayView3<f32>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let (c, h, w) = pred.dim();
    if c < 2 {
        return Err(Error::shape("spectral angle needs at least two bands"));
    }
    let mut total = 0.0f64;
    let mut n = 0usize;
    for i in 0..h {
        for j in 0..w {
            let (mut dot, mut pp, mut tt) = (0.0f64, 0.0f64, 0.0f64);
            for ch in 0..c {
                let (p, t) = (pred[(ch, i, j)] as f64, target[(ch, i, j)] as f64);
                dot += p * t;
                pp += p * p;
                tt += t * t;
            }
            if pp == 0.0 || tt == 0.0 {
                continue;
            }
            let cos = (dot / (pp.sqrt() * tt.sqrt())).clamp(-1.0, 1.0);
            total += cos.acos().to_degrees();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Numeric("every pixel has a zero-norm spectrum".into()));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of a plane.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| (0..n).map(|t| k[t] * x[(i, j + t)]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..n).map(|t| k[t] * rows[(i + t, j)]).sum::<f64>())
}

/// Mean structural similarity with a Gaussian window, averaged over channels.
pub fn ssim(pred: ArrayView3<f32>, target: ArrayView3<f32>, params: SsimParams) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let (_, h, w) = pred.dim();
    if h < params.window || w < params.window {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the {} SSIM window", params.window)));
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut acc = 0.0;
    for (a, b) in pred.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))) {
        let x = a.mapv(|v| v as f64);
        let y = b.mapv(|v| v as f64);
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &k) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
        let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
        let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
        acc += (num / den).mean().expect("non-empty");
    }
    Ok(acc / pred.dim().0 as f64)
}

/// Metrics for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub rmse: f64,
    pub sam: Option<f64>,
}

pub fn evaluate(id: &str, pred: ArrayView3<f32>, target: ArrayView3<f32>) -> Result<SampleMetrics> {
    let c = pred.dim().0;
    let sam = if c >= 2 {
        match sam(pred, target) {
            Ok(v) => Some(v),
            Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr: psnr(pred, target, 1.0)?,
        ssim: ssim(pred, target, SsimParams::default())?,
        mae: mae_metric(pred, target)?,
        rmse: rmse(pred, target)?,
        sam,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub aggregate: SampleMetrics,
    pub per_sample: Vec<SampleMetrics>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, config: serde_json::Value) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Numeric("no samples to aggregate".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        let sams: Vec<f64> = per_sample.iter().filter_map(|s| s.sam).collect();
        let aggregate = SampleMetrics {
            id: "mean".into(),
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            mae: mean(|s| s.mae),
            rmse: mean(|s| s.rmse),
            sam: (sams.len() == per_sample.len()).then(|| sams.iter().sum::<f64>() / n),
        };
        Ok(Self {
            count: per_sample.len(),
            aggregate,
            per_sample,
            config,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,mae,rmse,sam\n");
        for s in &self.per_sample {
            let sam = s.sam.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", s.id, s.psnr, s.ssim, s.mae, s.rmse, sam));
        }
        out
    }
}

/// JSON has no infinity; PSNR of a perfect prediction is written as `"inf"`.
mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = stream(seed, &[]);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_cases() {
        let a = random(3, 8, 8, 1);
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
        let b = &a + 0.1f32;
        let v = psnr(b.view(), a.view(), 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "{v}");
        assert!(psnr(a.view(), random(3, 8, 7, 2).view(), 1.0).is_err());
    }

    #[test]
    fn mae_rmse_cases() {
        let a = random(3, 8, 8, 3);
        assert_eq!(mae_metric(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(rmse(a.view(), a.view()).unwrap(), 0.0);
        let b = &a + 0.1f32;
        assert!((mae_metric(b.view(), a.view()).unwrap() - 0.1).abs() < 1e-6);
        assert!((rmse(b.view(), a.view()).unwrap() - 0.1).abs() < 1e-6);
        for seed in 0..1000 {
            let (p, t) = (random(1, 4, 4, 2 * seed), random(1, 4, 4, 2 * seed + 1));
            assert!(rmse(p.view(), t.view()).unwrap() >= mae_metric(p.view(), t.view()).unwrap());
        }
    }

    #[test]
    fn translation_leaves_errors_unchanged() {
        let (p, t) = (random(3, 8, 8, 4), random(3, 8, 8, 5));
        let (p2, t2) = (&p + 0.25f32, &t + 0.25f32);
        assert!((mae_metric(p.view(), t.view()).unwrap() - mae_metric(p2.view(), t2.view()).unwrap()).abs() < 1e-6);
        assert!((rmse(p.view(), t.view()).unwrap() - rmse(p2.view(), t2.view()).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn sam_cases() {
        let t = random(4, 6, 6, 6);
        assert!(sam(t.view(), t.view()).unwrap().abs() < 1e-3);
        let doubled = &t * 2.0f32;
        assert!(sam(doubled.view(), t.view()).unwrap().abs() < 1e-3);
        let mut a = Array3::<f32>::zeros((2, 1, 1));
        let mut b = Array3::<f32>::zeros((2, 1, 1));
        a[(0, 0, 0)] = 1.0;
        b[(1, 0, 0)] = 3.0;
        assert!((sam(a.view(), b.view()).unwrap() - 90.0).abs() < 1e-12);
        let zeros = Array3::<f32>::zeros((2, 2, 2));
        assert!(sam(zeros.view(), zeros.view()).is_err());
        assert!(sam(random(1, 2, 2, 1).view(), random(1, 2, 2, 2).view()).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random(3, 16, 16, 7);
        assert!((ssim(a.view(), a.view(), SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let b = random(3, 16, 16, 8);
        let ab = ssim(a.view(), b.view(), SsimParams::default()).unwrap();
        let ba = ssim(b.view(), a.view(), SsimParams::default()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ssim(random(1, 8, 8, 1).view(), random(1, 8, 8, 2).view(), SsimParams::default()).is_err());
    }

    #[test]
    fn report_aggregates_and_serialises_infinity() {
        let a = random(3, 16, 16, 9);
        let b = &a + 0.05f32;
        let r = MetricReport::from_samples(
            vec![evaluate("x", a.view(), a.view()).unwrap(), evaluate("y", b.view(), a.view()).unwrap()],
            serde_json::json!({}),
        )
        .unwrap();
        assert_eq!(r.count, 2);
        assert_eq!(r.aggregate.psnr, f64::INFINITY);
        assert!((r.aggregate.mae - r.per_sample[1].mae / 2.0).abs() < 1e-12);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.per_sample[0].psnr, f64::INFINITY);
        assert!(r.to_csv().lines().count() == 3);
    }
}
