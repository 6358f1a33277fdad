use super::*;
use crate::rng::stream;
use crate::schedule::gaussian;
use rand::Rng;

fn small(frames: usize) -> MtcdnConfig {
    MtcdnConfig {
        base_channels: 8,
        depth: 2,
        heads: 2,
        neighborhood_window: 3,
        frames,
        in_channels: 3,
        aux_channels: 0,
        out_channels: 3,
        embed_dim: 16,
        ..MtcdnConfig::default()
    }
}

fn model(cfg: MtcdnConfig, seed: u64) -> Mtcdn {
    Mtcdn::new(cfg, Schedule::default(), seed, DType::F64, &Device::Cpu).unwrap()
}

fn randn(dims: &[usize], seed: u64) -> Tensor {
    gaussian(dims, DType::F64, &Device::Cpu, &mut stream(seed, &[7])).unwrap()
}

fn inputs(b: usize, t: usize, hw: usize, seed: u64) -> (Tensor, Condition) {
    let x = randn(&[b, t, 3, hw, hw], seed);
    let frames = (randn(&[b, t, 3, hw, hw], seed + 1) * 0.5).unwrap();
    (x, Condition::new(frames, None).unwrap())
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

/// The zero-initialised head blocks every upstream gradient; replace it.
fn randomize_head(m: &Mtcdn, seed: u64) {
    for name in ["out.conv.weight", "out.conv.bias"] {
        let var = m.params().get(name).unwrap();
        var.set(&(randn(var.dims(), seed) * 0.1).unwrap()).unwrap();
    }
}

#[test]
fn condition_scales_halve_per_stage() {
    let cfg = MtcdnConfig { depth: 3, ..small(3) };
    let m = model(cfg, 1);
    let (_, cond) = inputs(2, 3, 16, 2);
    let feats = m.encode_condition(&cond).unwrap();
    assert_eq!(feats.scales.len(), 3);
    for (s, f) in feats.scales.iter().enumerate() {
        assert_eq!(f.dims(), &[6, m.config().stage_channels(s), 16 >> s, 16 >> s]);
    }
    assert_eq!(feats.tae.fused.dims(), &[2, 8, 16, 16]);
    assert_eq!(feats.tae.kv.keys.dims(), &[2, 3, 8, 16, 16]);
}

#[test]
fn missing_aux_is_an_error() {
    let m = model(MtcdnConfig { aux_channels: 1, ..small(2) }, 1);
    let (x, cond) = inputs(1, 2, 8, 3);
    assert!(matches!(m.encode_condition(&cond), Err(Error::Config(_))));
    assert!(m.forward(&x, &[1.0], &cond).is_err());
    let aux = randn(&[1, 2, 1, 8, 8], 4);
    let cond = Condition::new(cond.frames.clone(), Some(aux)).unwrap();
    assert!(m.forward(&x, &[1.0], &cond).is_ok());
}

#[test]
fn zero_head_reduces_to_skip_path() {
    let m = model(small(3), 5);
    let (x, cond) = inputs(2, 3, 8, 6);
    let sigma = 0.7;
    let out = m.denoise(&x, sigma, &cond).unwrap();
    let s = Schedule::default();
    let (c_skip, _, _) = s.preconditioning(sigma);
    let expect = ((&x - (&cond.mean * (s.alpha * sigma)).unwrap()).unwrap() * c_skip).unwrap();
    assert!(max_diff(&out, &expect) < 1e-12);
}

#[test]
fn shape_preserved_for_batch_and_frame_counts() {
    for b in [1, 2] {
        for t in [1, 3] {
            let m = model(small(t), 8);
            randomize_head(&m, 9);
            let (x, cond) = inputs(b, t, 8, 10);
            let out = m.denoise(&x, 2.0, &cond).unwrap();
            assert_eq!(out.dims(), &[b, t, 3, 8, 8]);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let a = model(small(2), 11);
    let b = model(small(2), 11);
    randomize_head(&a, 12);
    randomize_head(&b, 12);
    let (x, cond) = inputs(2, 2, 8, 13);
    let o1: Vec<f64> = a.denoise(&x, 1.3, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let o2: Vec<f64> = a.denoise(&x, 1.3, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let o3: Vec<f64> = b.denoise(&x, 1.3, &cond).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(o1, o2);
    assert_eq!(o1, o3);
}

#[test]
fn rejects_bad_inputs() {
    let m = model(small(2), 14);
    let (x, cond) = inputs(1, 2, 8, 15);
    assert!(matches!(m.denoise(&x, 0.0, &cond), Err(Error::Numeric(_))));
    assert!(matches!(m.denoise(&x, f64::NAN, &cond), Err(Error::Numeric(_))));
    let bad = (&x / 0.0).unwrap();
    assert!(matches!(m.denoise(&bad, 1.0, &cond), Err(Error::Numeric(_))));
    // bottleneck 2x2 cannot host a 3x3 window
    let (x4, cond4) = inputs(1, 2, 4, 16);
    assert!(matches!(m.denoise(&x4, 1.0, &cond4), Err(Error::Config(_))));
    let (x3, cond3) = inputs(1, 3, 8, 17);
    assert!(m.denoise(&x3, 1.0, &cond3).is_err());
}

#[test]
fn config_validation() {
    assert!(MtcdnConfig::default().validate().is_ok());
    assert!(MtcdnConfig { neighborhood_window: 4, ..small(2) }.validate().is_err());
    assert!(MtcdnConfig { depth: 0, ..small(2) }.validate().is_err());
    assert!(MtcdnConfig { heads: 3, ..small(2) }.validate().is_err());
    assert!(MtcdnConfig { out_channels: 1, ..small(2) }.validate().is_err());
    let json = serde_json::to_string(&small(2)).unwrap();
    let back: MtcdnConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, small(2));
    assert!(serde_json::from_str::<MtcdnConfig>(r#"{"depthh": 2}"#).is_err());
}

fn probe_loss(m: &Mtcdn, x: &Tensor, cond: &Condition, r: &Tensor) -> Tensor {
    m.forward(x, &[0.8], cond).unwrap().mul(r).unwrap().sum_all().unwrap()
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let m = model(small(2), 20);
    randomize_head(&m, 21);
    let (x, cond) = inputs(1, 2, 8, 22);
    let r = randn(&[1, 2, 3, 8, 8], 23);
    let grads = probe_loss(&m, &x, &cond, &r).backward().unwrap();
    let mut missing = vec![];
    for (name, var) in m.params().vars() {
        match grads.get(var.as_tensor()) {
            Some(g) => {
                let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(s.is_finite(), "{name}");
            }
            None => missing.push(name.clone()),
        }
    }
    assert!(missing.is_empty(), "no gradient for {missing:?}");
}

#[test]
fn gradient_matches_finite_differences() {
    let m = model(small(2), 30);
    randomize_head(&m, 31);
    let (x, cond) = inputs(1, 2, 8, 32);
    let r = randn(&[1, 2, 3, 8, 8], 33);
    let grads = probe_loss(&m, &x, &cond, &r).backward().unwrap();
    let names: Vec<String> = m.params().vars().keys().cloned().collect();
    let mut rng = stream(34, &[]);
    let h = 1e-5;
    for k in 0..10 {
        let name = &names[rng.random_range(0..names.len())];
        let var = m.params().get(name).unwrap();
        let orig = var.as_tensor().copy().unwrap();
        let dir = randn(var.dims(), 100 + k);
        let analytic = grads.get(var.as_tensor()).unwrap().mul(&dir).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        var.set(&(&orig + (&dir * h).unwrap()).unwrap()).unwrap();
        let up = probe_loss(&m, &x, &cond, &r).to_scalar::<f64>().unwrap();
        var.set(&(&orig - (&dir * h).unwrap()).unwrap()).unwrap();
        let down = probe_loss(&m, &x, &cond, &r).to_scalar::<f64>().unwrap();
        var.set(&orig).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "{name}: analytic {analytic}, numeric {numeric}");
    }
}

#[test]
fn ablated_variants_build_and_run() {
    for (tf, ha) in [(false, true), (true, false), (false, false)] {
        let m = model(MtcdnConfig { use_tf_block: tf, use_ha_block: ha, ..small(2) }, 40);
        randomize_head(&m, 41);
        let (x, cond) = inputs(1, 2, 8, 42);
        assert_eq!(m.denoise(&x, 1.0, &cond).unwrap().dims(), x.dims());
        assert_eq!(m.params().vars().keys().any(|k| k.starts_with("tf.")), tf);
        assert_eq!(m.params().vars().keys().any(|k| k.starts_with("ha.")), ha);
    }
}
