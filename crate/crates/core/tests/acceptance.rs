//! End-to-end acceptance suite. Every test prints one `PASS`/`FAIL` line
//! for its criterion straight to stdout (uncaptured) before asserting.
//!
//! The training criteria share one baseline run of the dynamic desk config.
//! Tests are serialised through a lock so that wall-clock budgets are
//! measured without competing for cores.

mod common;

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{max_abs_diff, oracle_render, pinhole};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use semsplat_core::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use semsplat_core::gaussians::{Camera, GaussianCloud};
use semsplat_core::gradcheck::{run_gradcheck, GradcheckOptions};
use semsplat_core::linalg::{logit, quat_to_rotation};
use semsplat_core::metrics::{psnr, ssim};
use semsplat_core::rasterizer::{render, RenderSettings};
use semsplat_core::semantic::{fit_prototypes, seg_metrics, segment, ClassPrototypes, LabelMap};
use semsplat_core::synth::{SynthParams, SyntheticScene};
use semsplat_core::training::{evaluate, train, train_coarse, train_steps, TrainConfig, TrainData, TrainState};

const DYNAMIC_CONFIG: &str = include_str!("../../../configs/desk-dynamic.toml");
const STATIC_CONFIG: &str = include_str!("../../../configs/desk-static.toml");

static HEAVY: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{verdict}] criterion {id} ({name}): {detail}");
    let _ = out.flush();
}

fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "    {text}");
    let _ = out.flush();
}

fn dynamic_scene() -> SyntheticScene {
    SyntheticScene::new(SynthParams::default()).expect("synthetic scene")
}

fn dynamic_config() -> TrainConfig {
    TrainConfig::from_toml(DYNAMIC_CONFIG).expect("dynamic desk config")
}

/// Held-out summary of one trained model.
struct Outcome {
    state: TrainState,
    cfg: TrainConfig,
    elapsed: Duration,
    psnr: Vec<f64>,
    feature_loss: Vec<f64>,
    /// Per blob class: IoU pooled over held-out frames.
    iou: Vec<(u32, f64)>,
    /// Largest DSC vs 2·IoU/(1+IoU) deviation seen in any evaluation.
    dsc_deviation: f64,
}

impl Outcome {
    fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    fn mean_feature_loss(&self) -> f64 {
        mean(&self.feature_loss)
    }

    fn min_iou(&self) -> f64 {
        self.iou.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn assess(state: TrainState, cfg: TrainConfig, data: &TrainData, elapsed: Duration) -> Outcome {
    let evals = evaluate(&state, &cfg, &data.frames, &data.test).expect("evaluation");
    let psnr = evals.iter().map(|e| e.psnr).collect();
    let feature_loss = evals.iter().filter_map(|e| e.feature_loss).collect();

    let blobs: Vec<u32> = (1..=SynthParams::default().blobs as u32).collect();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for &i in &data.train {
        let (_, decoded) = state.render_frame(&cfg, &data.frames[i]).expect("render");
        feats.push(decoded.expect("decoded features"));
        labels.push(data.frames[i].labels.clone().expect("labels"));
    }
    // The backdrop carries its own teacher signature, so it gets a prototype too.
    let classes: Vec<u32> = std::iter::once(0).chain(blobs.iter().copied()).collect();
    let protos: ClassPrototypes = fit_prototypes(&feats, &labels, &classes, 0.5).expect("prototypes");
    let mut counts = vec![(0usize, 0usize); blobs.len()];
    let mut dsc_deviation: f64 = 0.0;
    for &i in &data.test {
        let frame = &data.frames[i];
        let (_, decoded) = state.render_frame(&cfg, frame).expect("render");
        let decoded = decoded.expect("decoded features");
        let gt: LabelMap = frame.labels.as_ref().expect("labels").resize_nearest(decoded.height, decoded.width);
        let pred = if protos.is_empty() {
            LabelMap::new(gt.height, gt.width, vec![0; gt.height * gt.width]).unwrap()
        } else {
            segment(&decoded, &protos).expect("segment")
        };
        let rep = seg_metrics(&pred, &gt, &blobs).expect("metrics");
        dsc_deviation = dsc_deviation.max(rep.dsc_iou_deviation());
        for (k, c) in rep.per_class.iter().enumerate() {
            counts[k].0 += c.true_pos;
            counts[k].1 += c.true_pos + c.false_pos + c.false_neg;
        }
    }
    let iou = blobs
        .iter()
        .zip(&counts)
        .map(|(&b, &(tp, union))| (b, if union == 0 { 1.0 } else { tp as f64 / union as f64 }))
        .collect();
    Outcome {
        state,
        cfg,
        elapsed,
        psnr,
        feature_loss,
        iou,
        dsc_deviation,
    }
}

fn run_dynamic(cfg: TrainConfig) -> Outcome {
    let scene = dynamic_scene();
    let data = TrainData::new(scene.frames().expect("frames"), &cfg.schedule).expect("train data");
    let start = Instant::now();
    let mut state = TrainState::initialize(&cfg, &data).expect("initialize");
    train(&mut state, &cfg, &data, &mut ()).expect("training");
    let elapsed = start.elapsed();
    assess(state, cfg, &data, elapsed)
}

fn baseline() -> &'static Outcome {
    static BASELINE: OnceLock<Outcome> = OnceLock::new();
    BASELINE.get_or_init(|| run_dynamic(dynamic_config()))
}

fn describe(o: &Outcome) -> String {
    let ious: Vec<String> = o.iou.iter().map(|(c, v)| format!("blob {c} {v:.3}")).collect();
    format!(
        "held-out PSNR {:.2} dB, feature loss {:.4}, IoU [{}], {:.0} s",
        o.mean_psnr(),
        o.mean_feature_loss(),
        ious.join(", "),
        o.elapsed.as_secs_f64()
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = exclusive();
    let start = Instant::now();
    let rep = run_gradcheck(&GradcheckOptions::default());
    let elapsed = start.elapsed();
    for g in &rep.groups {
        line(&format!("{:<24} checked {:>3}  max rel error {:.3e}", g.group, g.checked, g.max_rel_error));
    }
    let pass = rep.passed() && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} groups, worst relative error {:.3e} (< {:.0e}), {:.1} s (< 120 s)",
            rep.groups.len(),
            rep.max_rel_error(),
            rep.tolerance,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn random_scene(rng: &mut Pcg64) -> (GaussianCloud, Camera, RenderSettings) {
    let width = rng.random_range(8..=64);
    let height = rng.random_range(8..=64);
    let n = if rng.random_bool(0.5) { 4 } else { 16 };
    let count = rng.random_range(1..=200);
    let mut cam = pinhole(width, height, rng.random_range(20.0..80.0));
    cam.intrinsics.cx += rng.random_range(-3.0..3.0);
    cam.intrinsics.cy += rng.random_range(-3.0..3.0);
    let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= norm);
    let r = quat_to_rotation(&q);
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    for i in 0..3 {
        cam.world_to_camera[i][..3].copy_from_slice(&r[i]);
        cam.world_to_camera[i][3] = t[i];
    }
    let mut cloud = GaussianCloud::zeros(count, n);
    let (fx, cx) = (cam.intrinsics.fx, cam.intrinsics.cx);
    let (fy, cy) = (cam.intrinsics.fy, cam.intrinsics.cy);
    for i in 0..count {
        let z = rng.random_range(0.5..5.0);
        let u = rng.random_range(-5.0..width as f64 + 5.0);
        let v = rng.random_range(-5.0..height as f64 + 5.0);
        let pc = [(u - cx) / fx * z, (v - cy) / fy * z, z];
        // World point from camera point: Rᵀ (p − t).
        for a in 0..3 {
            cloud.positions[3 * i + a] = (0..3).map(|b| r[b][a] * (pc[b] - t[b])).sum();
        }
        for a in 0..4 {
            cloud.rotations[4 * i + a] = rng.random_range(-1.0..1.0);
        }
        cloud.rotations[4 * i] += 1.5;
        for a in 0..3 {
            cloud.log_scales[3 * i + a] = rng.random_range(-4.5..-1.0);
            cloud.color_logits[3 * i + a] = rng.random_range(-3.0..3.0);
        }
        cloud.opacity_logits[i] = rng.random_range(-3.0..4.0);
        for a in 0..n {
            cloud.features[n * i + a] = rng.random_range(-1.0..1.0);
        }
    }
    let settings = RenderSettings {
        tile_size: if rng.random_bool(0.5) { 8 } else { 16 },
        background: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        ..RenderSettings::default()
    };
    (cloud, cam, settings)
}

#[test]
fn criterion_2_rasterizer_oracle() {
    let _guard = exclusive();
    let mut rng = Pcg64::seed_from_u64(2024);
    let (mut worst_diff, mut worst_conservation): (f64, f64) = (0.0, 0.0);
    let mut composited = 0usize;
    for _ in 0..50 {
        let (cloud, cam, settings) = random_scene(&mut rng);
        let out = render(&cloud, &cam, &settings).expect("render");
        let oracle = oracle_render(&cloud, &cam, &settings);
        for (a, b) in [
            (&out.color, &oracle.color),
            (&out.depth, &oracle.depth),
            (&out.feature, &oracle.feature),
            (&out.alpha, &oracle.alpha),
        ] {
            worst_diff = worst_diff.max(max_abs_diff(a, b));
        }
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut trans = 1.0;
                let mut weights = 0.0;
                for (_, alpha) in out.record.contributions(x, y) {
                    weights += trans * alpha;
                    trans *= 1.0 - alpha;
                    composited += 1;
                }
                let total = weights + out.record.final_transmittance(x, y);
                worst_conservation = worst_conservation.max((total - 1.0).abs());
            }
        }
    }
    let pass = worst_diff < 1e-5 && worst_conservation <= 1e-12;
    report(
        2,
        "rasterizer oracle",
        pass,
        &format!(
            "50 scenes, {composited} contributions, max |tiled − oracle| {worst_diff:.3e} (< 1e-5), \
             max |Σw + T − 1| {worst_conservation:.3e} (≤ 1e-12)"
        ),
    );
    assert!(pass);
}

/// Isotropic Gaussian placed so that it projects exactly onto pixel (8, 8)
/// of a 17×17 view with focal length 10.
fn centred_gaussian(cloud: &mut GaussianCloud, i: usize, depth: f64, opacity: f64, color: [f64; 3], feature: &[f64]) {
    cloud.positions[3 * i..3 * i + 3].copy_from_slice(&[0.0, 0.0, depth]);
    cloud.rotations[4 * i..4 * i + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    // Screen variance (f·s/z)² = 1 before the 0.3 low-pass.
    cloud.log_scales[3 * i..3 * i + 3].fill((depth / 10.0).ln());
    cloud.opacity_logits[i] = logit(opacity);
    for k in 0..3 {
        cloud.color_logits[3 * i + k] = logit(color[k]);
    }
    let n = cloud.feature_dim;
    cloud.features[n * i..n * (i + 1)].copy_from_slice(feature);
}

#[test]
fn criterion_3_closed_form_blends() {
    let _guard = exclusive();
    let cam = pinhole(17, 17, 10.0);
    let settings = RenderSettings {
        background: [0.1, 0.2, 0.3],
        ..RenderSettings::default()
    };
    let at = |out: &semsplat_core::rasterizer::RenderOutput, x: usize, y: usize| {
        let p = y * out.width + x;
        let n = out.feature_dim;
        let mut v = out.color[3 * p..3 * p + 3].to_vec();
        v.push(out.depth[p]);
        v.extend_from_slice(&out.feature[n * p..n * (p + 1)]);
        v.push(out.alpha[p]);
        v
    };
    let mut cases: Vec<(&str, Vec<f64>, Vec<f64>)> = Vec::new();

    // One Gaussian, opacity 0.5, at its centre pixel and one pixel right.
    let mut one = GaussianCloud::zeros(1, 2);
    centred_gaussian(&mut one, 0, 2.0, 0.5, [0.25, 0.5, 0.75], &[1.0, -2.0]);
    let out = render(&one, &cam, &settings).unwrap();
    cases.push((
        "one gaussian, centre",
        at(&out, 8, 8),
        vec![0.175, 0.35, 0.525, 1.0, 0.5, -1.0, 0.5],
    ));
    let a = 0.5 * (-0.5 / 1.3_f64).exp();
    cases.push((
        "one gaussian, off-centre",
        at(&out, 9, 8),
        vec![
            a * 0.25 + (1.0 - a) * 0.1,
            a * 0.5 + (1.0 - a) * 0.2,
            a * 0.75 + (1.0 - a) * 0.3,
            2.0 * a,
            a,
            -2.0 * a,
            a,
        ],
    ));

    // Two Gaussians, opacities 0.5 (front) and 0.25 (back), given in back-to-front order.
    let mut two = GaussianCloud::zeros(2, 2);
    centred_gaussian(&mut two, 0, 3.0, 0.25, [0.75, 0.5, 0.25], &[4.0, 8.0]);
    centred_gaussian(&mut two, 1, 2.0, 0.5, [0.25, 0.5, 0.75], &[1.0, -2.0]);
    let out = render(&two, &cam, &settings).unwrap();
    cases.push((
        "two gaussians, centre",
        at(&out, 8, 8),
        vec![0.25625, 0.3875, 0.51875, 1.375, 1.0, 0.0, 0.625],
    ));

    // Opacity above the cap composites at exactly 0.99.
    let mut capped = GaussianCloud::zeros(1, 2);
    centred_gaussian(&mut capped, 0, 2.0, 0.999, [0.25, 0.5, 0.75], &[1.0, -2.0]);
    let out = render(&capped, &cam, &settings).unwrap();
    cases.push((
        "alpha cap",
        at(&out, 8, 8),
        vec![
            0.99 * 0.25 + 0.01 * 0.1,
            0.99 * 0.5 + 0.01 * 0.2,
            0.99 * 0.75 + 0.01 * 0.3,
            1.98,
            0.99,
            -1.98,
            0.99,
        ],
    ));

    let mut worst: f64 = 0.0;
    for (name, got, want) in &cases {
        let d = max_abs_diff(got, want);
        line(&format!("{name:<26} max deviation {d:.3e}"));
        worst = worst.max(d);
    }
    let pass = worst <= 1e-12;
    report(
        3,
        "closed-form blends",
        pass,
        &format!("{} cases, max deviation {worst:.3e} (≤ 1e-12)", cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_4_static_overfit() {
    let _guard = exclusive();
    let cfg = TrainConfig::from_toml(STATIC_CONFIG).expect("static desk config");
    let scene = SyntheticScene::new(SynthParams {
        frames: 1,
        ..SynthParams::default()
    })
    .unwrap();
    let data = TrainData::new(scene.frames().unwrap(), &cfg.schedule).unwrap();
    let start = Instant::now();
    let mut state = TrainState::initialize(&cfg, &data).unwrap();
    train_coarse(&mut state, &cfg, &data, &mut ()).unwrap();
    let elapsed = start.elapsed();
    let ev = evaluate(&state, &cfg, &data.frames, &data.train).unwrap();
    let value = ev[0].psnr;
    let pass = state.stage_iteration == 1000 && value >= 35.0 && elapsed < Duration::from_secs(600);
    report(
        4,
        "static overfit",
        pass,
        &format!(
            "{} coarse iterations, training-frame PSNR {value:.2} dB (≥ 35), {:.1} s (< 600 s)",
            state.stage_iteration,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_dynamic_semantic_overfit() {
    let _guard = exclusive();
    let o = baseline();
    for (k, p) in o.psnr.iter().enumerate() {
        line(&format!("held-out frame {k}: PSNR {p:.2} dB, feature loss {:.4}", o.feature_loss[k]));
    }
    let pass = o.mean_psnr() >= 30.0
        && o.mean_feature_loss() <= 0.05
        && o.min_iou() >= 0.8
        && o.elapsed < Duration::from_secs(45 * 60);
    report(
        5,
        "dynamic + semantic overfit",
        pass,
        &format!("{} (targets ≥ 30 dB, ≤ 0.05, ≥ 0.8, < 2700 s)", describe(o)),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_directions() {
    let _guard = exclusive();
    let base = baseline();
    let mut cfg = dynamic_config();
    cfg.loss.enable_feature_loss = false;
    let no_feat = run_dynamic(cfg);
    let mut cfg = dynamic_config();
    cfg.deformation.enable_hexplane = false;
    let no_hex = run_dynamic(cfg);
    line(&format!("full model     {}", describe(base)));
    line(&format!("w/o feature L1 {}", describe(&no_feat)));
    line(&format!("w/o HexPlane   {}", describe(&no_hex)));
    let ratio = no_feat.mean_feature_loss() / base.mean_feature_loss();
    let drop = base.mean_psnr() - no_hex.mean_psnr();
    let pass = ratio >= 2.0 && drop >= 3.0;
    report(
        6,
        "ablation directions",
        pass,
        &format!("feature loss ×{ratio:.2} without it (≥ 2), PSNR −{drop:.2} dB without HexPlane (≥ 3)"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism() {
    let _guard = exclusive();
    let base = baseline();
    let cfg = dynamic_config();
    let scene = dynamic_scene();
    let data = TrainData::new(scene.frames().unwrap(), &cfg.schedule).unwrap();
    let mut state = TrainState::initialize(&cfg, &data).unwrap();

    // Pause inside the fine stage, across the next densification step.
    let pause = cfg.schedule.coarse_iterations + 495;
    assert_eq!(train_steps(&mut state, &cfg, &data, pause, &mut ()).unwrap(), pause);
    let saved = checkpoint_bytes(&cfg, &state);
    let mut unbroken = state.clone();
    train_steps(&mut unbroken, &cfg, &data, 10, &mut ()).unwrap();
    let (cfg2, mut resumed) = checkpoint_from_bytes(&saved).unwrap();
    assert_eq!(cfg2, cfg);
    train_steps(&mut resumed, &cfg2, &data, 10, &mut ()).unwrap();
    let resume_identical = checkpoint_bytes(&cfg, &unbroken) == checkpoint_bytes(&cfg, &resumed);

    train_steps(&mut state, &cfg, &data, u64::MAX, &mut ()).unwrap();
    let a = checkpoint_bytes(&base.cfg, &base.state);
    let b = checkpoint_bytes(&cfg, &state);
    let runs_identical = a == b;
    let pass = runs_identical && resume_identical;
    report(
        7,
        "determinism",
        pass,
        &format!(
            "repeat run checkpoint {} ({} bytes), resume-vs-unbroken over 10 steps {}",
            if runs_identical { "bit-identical" } else { "DIFFERS" },
            a.len(),
            if resume_identical { "bit-identical" } else { "DIFFERS" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_metric_self_tests() {
    let _guard = exclusive();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        line(&format!("{} {name}", if ok { "ok  " } else { "FAIL" }));
        if !ok {
            failures.push(name.to_string());
        }
    };

    let mut rng = Pcg64::seed_from_u64(8);
    let img: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    check("psnr a = a gives +inf", psnr(&img, &img).unwrap() == f64::INFINITY);
    let (u, v) = (vec![0.5; 48], vec![0.6; 48]);
    check("psnr uniform 0.1 offset gives 20 dB", (psnr(&u, &v).unwrap() - 20.0).abs() < 1e-12);
    let other: Vec<f64> = (0..img.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let mse = img.iter().zip(&other).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.len() as f64;
    check("psnr matches two-line oracle", (psnr(&img, &other).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);

    check("ssim a = a gives 1", (ssim(&img, &img, 16, 16, 3).unwrap() - 1.0).abs() < 1e-12);
    let (ca, cb) = (vec![0.2; 256], vec![0.7; 256]);
    let c1 = 0.01_f64.powi(2);
    let closed = (2.0 * 0.2 * 0.7 + c1) / (0.2_f64.powi(2) + 0.7_f64.powi(2) + c1);
    check("ssim constant patches match closed form", (ssim(&ca, &cb, 16, 16, 1).unwrap() - closed).abs() < 1e-12);
    check(
        "ssim is symmetric",
        ssim(&img, &other, 16, 16, 3).unwrap() == ssim(&other, &img, 16, 16, 3).unwrap(),
    );

    let gt = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let pred = LabelMap::new(2, 2, vec![1, 0, 0, 0]).unwrap();
    let rep = seg_metrics(&pred, &gt, &[1]).unwrap();
    let c = rep.class(1).unwrap().scores;
    check("2×2 hand case IoU 0.5", c.iou == 0.5);
    check("2×2 hand case DSC 2/3", c.dsc == 2.0 / 3.0);
    let rep = seg_metrics(&gt, &gt, &[0, 1]).unwrap();
    check(
        "pred = gt scores 1 everywhere",
        rep.per_class
            .iter()
            .all(|c| c.scores.iou == 1.0 && c.scores.dsc == 1.0 && c.scores.recall == 1.0 && c.scores.precision == 1.0),
    );
    let complement = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let c = seg_metrics(&complement, &gt, &[1]).unwrap().class(1).unwrap().scores;
    check("complement scores IoU 0, DSC 0", c.iou == 0.0 && c.dsc == 0.0);

    // Cross-check on random label maps and on the trained model's segmentations.
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a: Vec<u32> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u32> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let rep = seg_metrics(&LabelMap::new(8, 8, a).unwrap(), &LabelMap::new(8, 8, b).unwrap(), &[0, 1, 2, 3]).unwrap();
        worst = worst.max(rep.dsc_iou_deviation());
    }
    worst = worst.max(baseline().dsc_deviation);
    check("DSC = 2·IoU/(1+IoU) on every evaluation", worst <= 1e-12);

    let pass = failures.is_empty();
    report(
        8,
        "metric self-tests",
        pass,
        &format!("{} failures, DSC/IoU cross-check deviation {worst:.1e}", failures.len()),
    );
    assert!(pass, "failed: {failures:?}");
}

#[test]
fn criterion_9_feature_dim_sweep() {
    let _guard = exclusive();
    let base = baseline();
    let mut rows = Vec::new();
    for n in [16usize, 32, 64, 128] {
        if n == base.cfg.model.feature_dim {
            rows.push((n, None));
            continue;
        }
        let mut cfg = dynamic_config();
        cfg.model.feature_dim = n;
        rows.push((n, Some(run_dynamic(cfg))));
    }
    line("   N | PSNR (dB) | feature L1 | mean IoU | time (s)");
    let mut losses = Vec::new();
    for (n, run) in &rows {
        let o = run.as_ref().unwrap_or(base);
        let miou = mean(&o.iou.iter().map(|&(_, v)| v).collect::<Vec<_>>());
        losses.push(o.mean_feature_loss());
        line(&format!(
            "{n:>4} | {:>9.2} | {:>10.4} | {:>8.3} | {:>8.0}",
            o.mean_psnr(),
            o.mean_feature_loss(),
            miou,
            o.elapsed.as_secs_f64()
        ));
    }
    let monotone = losses.windows(2).all(|w| w[1] <= w[0]);
    report(
        9,
        "feature-dim sweep",
        true,
        &format!(
            "{} widths completed; feature loss {} in N (reported only)",
            rows.len(),
            if monotone { "non-increasing" } else { "not monotone" }
        ),
    );
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let _guard = exclusive();
    let base = baseline();
    let bytes = checkpoint_bytes(&base.cfg, &base.state);
    let (cfg, state) = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&cfg, &state), bytes);
}

#[test]
fn oracle_agrees_on_synthetic_frame() {
    let _guard = exclusive();
    let scene = dynamic_scene();
    let frame = scene.frame(3).unwrap();
    let cloud = scene.cloud_at(frame.time);
    let settings = RenderSettings::default();
    let out = render(&cloud, &frame.camera, &settings).unwrap();
    let oracle = oracle_render(&cloud, &frame.camera, &settings);
    assert!(max_abs_diff(&out.color, &oracle.color) < 1e-5);
}
