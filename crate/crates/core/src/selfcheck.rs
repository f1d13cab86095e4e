//! Fast structural checks, run by `mambast selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Eager;
use crate::config::{FusionConfig, SsmConfig};
use crate::error::Result;
use crate::metrics::{lamr, mr_fppi_curve, match_frame, BBox, EvalSetting};
use crate::mhhpa::{mhhpa_forward, patch_tensor, unpatch_tensor};
use crate::ocf::{build_layout, flatten, unflatten};
use crate::profiler::count;
use crate::ssm::{SsmParams, SsmState};
use crate::temporal::{fuse_clip, fuse_next, init_stream, FeaturePair, FusionModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn random(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).expect("shape")
}

fn micro() -> FusionConfig {
    let mut cfg = FusionConfig::pyramid(64, 1, 2, 1);
    cfg.stages.truncate(1);
    cfg.ssm = SsmConfig {
        state_size: 2,
        expand: 2,
        conv_kernel: 2,
        ..SsmConfig::default()
    };
    cfg
}

fn pyramid_inputs(rng: &mut impl Rng, cfg: &FusionConfig) -> Vec<FeaturePair> {
    cfg.stages
        .iter()
        .map(|s| FeaturePair {
            stage: s.stage,
            rgb: random(rng, vec![s.height, s.width, s.channels]),
            thermal: random(rng, vec![s.height, s.width, s.channels]),
        })
        .collect()
}

fn ocf() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (h, w, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4));
        let layout = build_layout(h, w)?;
        let r = random(&mut rng, vec![h, w, c]);
        let t = random(&mut rng, vec![h, w, c]);
        let (r2, t2) = unflatten(&layout, &flatten(&layout, &r, &t)?)?;
        if !(r2.bit_eq(&r) && t2.bit_eq(&t)) {
            return Ok(check("ocf roundtrip", false, format!("{h}x{w}x{c}")));
        }
    }
    Ok(check("ocf roundtrip", true, "20 random shapes"))
}

fn patching() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, vec![16, 16, 3]);
    for s in [1, 2, 4, 8] {
        if !unpatch_tensor(&patch_tensor(&x, s)?, s)?.bit_eq(&x) {
            return Ok(check("patch roundtrip", false, format!("S={s}")));
        }
    }
    Ok(check("patch roundtrip", true, "S in 1, 2, 4, 8"))
}

fn scan() -> Result<Check> {
    let ln2 = std::f64::consts::LN_2;
    let p = SsmParams::new(Tensor::from_f64s(vec![1, 1], &[0.0])?, Tensor::from_f64s(vec![1, 1], &[1.0])?)?;
    let mut s = SsmState::zeros(1, 1);
    let mut err: f64 = 0.0;
    for (x, want) in [(1.0, ln2), (0.0, ln2 * 0.5), (0.0, ln2 * 0.25)] {
        let (y, next) = p.scan_step(&[x], &[ln2], &[1.0], &s)?;
        err = err.max((y[0] - want).abs());
        s = next;
    }
    Ok(check("scan impulse", err < 1e-6, format!("max error {err:.1e}")))
}

fn chunked_scan() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, n, l, cut) = (3, 4, 17, 6);
    let p = SsmParams::new(random(&mut rng, vec![c, n]), random(&mut rng, vec![c, n]))?;
    let x = random(&mut rng, vec![l, c]);
    let delta = random(&mut rng, vec![l, c]).map(|v| 0.3 + 0.25 * v);
    let b = random(&mut rng, vec![l, n]);
    let rows = |t: &Tensor<f32>, s: usize, len: usize| {
        let w = t.shape()[1];
        Tensor::new(vec![len, w], t.data()[s * w..(s + len) * w].to_vec())
    };
    let s0 = SsmState::zeros(c, n);
    let (full, _) = p.scan_sequence(&x, &delta, &b, &s0)?;
    let (y1, mid) = p.scan_sequence(&rows(&x, 0, cut)?, &rows(&delta, 0, cut)?, &rows(&b, 0, cut)?, &s0)?;
    let (y2, _) = p.scan_sequence(&rows(&x, cut, l - cut)?, &rows(&delta, cut, l - cut)?, &rows(&b, cut, l - cut)?, &mid)?;
    let err = full
        .data()
        .iter()
        .zip(y1.data().iter().chain(y2.data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    Ok(check("chunked scan", err <= 1e-6, format!("max error {err:.1e}")))
}

fn identity_and_streaming() -> Result<Vec<Check>> {
    let cfg = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = FusionModel::init(cfg.clone(), 3)?;
    let frames: Vec<_> = (0..3).map(|_| pyramid_inputs(&mut rng, &cfg)).collect();
    let clip = fuse_clip(&model, &frames)?;
    let identity = clip
        .iter()
        .zip(&frames)
        .all(|(o, i)| o.iter().zip(i).all(|(a, b)| a.rgb.bit_eq(&b.rgb) && a.thermal.bit_eq(&b.thermal)));

    let mut params = model.params().clone();
    let names: Vec<String> = params.names().cloned().collect();
    for n in names {
        let shape = params.get(&n)?.shape().to_vec();
        params.insert(n, random(&mut rng, shape).map(|v| 0.1 * v));
    }
    let model = FusionModel::with_params(cfg, params)?;
    let clip = fuse_clip(&model, &frames)?;
    let mut state = init_stream(&model);
    let mut same = true;
    for (f, want) in frames.iter().zip(&clip) {
        let (out, next) = fuse_next(&model, &state, f)?;
        same &= out.iter().zip(want).all(|(a, b)| a.rgb.bit_eq(&b.rgb) && a.thermal.bit_eq(&b.thermal));
        state = next;
    }

    let plan = &model.plans()[0];
    let s = plan.config();
    let r = random(&mut rng, vec![s.height, s.width, s.channels]);
    let mut e = Eager::new(model.params());
    let out = mhhpa_forward(&mut e, plan, &r, &r, None)?;
    Ok(vec![
        check("identity at init", identity, "3 frames, micro config"),
        check("streaming equals clip", same, "3 frames, perturbed weights"),
        check("fusion output finite", out.rgb.is_finite() && out.thermal.is_finite(), ""),
    ])
}

fn metrics() -> Result<Check> {
    let a = BBox::gt(0.0, 0.0, 20.0, 60.0);
    let b = BBox::gt(100.0, 0.0, 20.0, 60.0);
    let first = match_frame(
        &[BBox::det(0.0, 0.0, 20.0, 60.0, 0.9), BBox::det(500.0, 0.0, 20.0, 60.0, 0.8)],
        &[a, b],
        EvalSetting::Reasonable,
        0.5,
    )?;
    let second = match_frame(&[BBox::det(0.0, 0.0, 20.0, 60.0, 0.7)], &[a], EvalSetting::Reasonable, 0.5)?;
    let v = lamr(&mr_fppi_curve(&[first, second], 2)?);
    let want = 57.14959885687152;
    Ok(check("lamr example", (v - want).abs() < 1e-9, format!("{v:.6} (expected {want:.6})")))
}

fn ignore_regions() -> Result<Check> {
    let counted = [BBox::gt(100.0, 0.0, 30.0, 80.0)];
    let dets = [BBox::det(100.0, 0.0, 30.0, 80.0, 0.6)];
    let base = match_frame(&dets, &counted, EvalSetting::Reasonable, 0.5)?;
    let gts = [counted[0], BBox::gt(0.0, 0.0, 12.0, 30.0)];
    let dets = [dets[0], BBox::det(0.0, 0.0, 12.0, 30.0, 0.9)];
    let with = match_frame(&dets, &gts, EvalSetting::Reasonable, 0.5)?;
    let ok = with.n_gt == base.n_gt && with.tp == base.tp && with.fp == base.fp && with.fn_count == base.fn_count;
    Ok(check("height gating", ok, "small gt and its detection ignored"))
}

fn profile_monotone() -> Result<Check> {
    let base = FusionConfig::pyramid(64, 1, 1, 1);
    let mut ok = true;
    let counts = |c: &FusionConfig| count(c).map(|r| (r.total_params, r.total_flops));
    let b = counts(&base)?;
    for next in [
        FusionConfig::pyramid(64, 1, 1, 2),
        FusionConfig::pyramid(64, 2, 1, 1),
        // two heads of the same width
        FusionConfig::pyramid(64, 2, 2, 1),
    ] {
        let n = counts(&next)?;
        ok &= n.0 >= b.0 && n.1 >= b.1;
    }
    Ok(check("profile monotone", ok, "more layers, width, or heads at fixed head width"))
}

/// Every check, in a fixed order.
pub fn run() -> Result<Vec<Check>> {
    let mut out = vec![ocf()?, patching()?, scan()?, chunked_scan()?];
    out.extend(identity_and_streaming()?);
    out.extend([metrics()?, ignore_regions()?, profile_monotone()?]);
    Ok(out)
}
