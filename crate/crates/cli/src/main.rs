//! `semsplat`: synthetic data, training, rendering and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed files), 3 numerical failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use semsplat_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use semsplat_core::dataset::{
    frame_name, load_dataset, save_depth_png, save_gray8_png, save_rgb_png, split_every, Dataset, DatasetError,
};
use semsplat_core::deformation::DeformationError;
use semsplat_core::gaussians::{CameraFrame, GaussianError};
use semsplat_core::gradcheck::{run_gradcheck, GradcheckOptions};
use semsplat_core::metrics::{masked_psnr, ssim, MetricError};
use semsplat_core::numerics::NumericsError;
use semsplat_core::rasterizer::RenderError;
use semsplat_core::semantic::{
    feature_loss, fit_prototypes, seg_metrics, segment, ClassPrototypes, FeatureMap, LabelMap, SemanticError,
};
use semsplat_core::synth::{synth_generate, SynthError, SynthParams};
use semsplat_core::training::{
    train_steps, JsonLines, Stage, StepLog, StepRecord, TrainConfig, TrainData, TrainError, TrainState,
};

#[derive(Parser)]
#[command(name = "semsplat", version, about = "Deformable Gaussian splatting with a distilled semantic feature field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic deforming scene with teacher features and labels.
    Synth(SynthArgs),
    /// Train from a dataset directory.
    Train(TrainArgs),
    /// Render color, depth and feature maps from a checkpoint.
    Render(RenderArgs),
    /// PSNR, SSIM and feature loss over a frame split.
    Eval(EvalArgs),
    /// Prototype segmentation of rendered features, with metrics.
    Segment(SegmentArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with scene parameters; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    blobs: Option<usize>,
    #[arg(long)]
    teacher_channels: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML training config. Required unless resuming.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and the JSONL log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint (its embedded config is used).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write `checkpoints/NNNNNN.ssck` every this many iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Stop after the coarse stage.
    #[arg(long)]
    coarse_only: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct FrameSelect {
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Held-out rule: every n-th frame (defaults to the checkpoint config).
    #[arg(long)]
    every: Option<usize>,
    #[arg(long)]
    offset: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset providing cameras (and timestamps).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated frame indices; all frames when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    /// Render every selected camera at this time instead of its own.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    select: FrameSelect,
    /// Write the per-frame table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prototype JSON; fitted on the training split when omitted.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    /// Cosine threshold below which pixels become background.
    #[arg(long)]
    threshold: Option<f64>,
    /// Segment at image resolution instead of the teacher resolution.
    #[arg(long)]
    image_res: bool,
    /// Fit prototypes for the labelled classes only, so background comes
    /// from the threshold alone rather than from its own prototype.
    #[arg(long)]
    foreground_only: bool,
    #[command(flatten)]
    select: FrameSelect,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = GradcheckOptions::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = GradcheckOptions::default().samples_per_group)]
    samples: usize,
    #[arg(long, default_value_t = GradcheckOptions::default().step)]
    step: f64,
    #[arg(long, default_value_t = GradcheckOptions::default().tolerance)]
    tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug)]
struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

impl Failure {
    fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

trait Classify {
    fn kind(&self) -> Kind;
}

impl Classify for NumericsError {
    fn kind(&self) -> Kind {
        match self {
            NumericsError::NonFiniteGradient { .. } => Kind::Numerical,
            NumericsError::Config(_) => Kind::Usage,
            _ => Kind::Data,
        }
    }
}

impl Classify for GaussianError {
    fn kind(&self) -> Kind {
        match self {
            GaussianError::NonFinite { .. } | GaussianError::DegenerateRotation(_) | GaussianError::SingularCovariance => {
                Kind::Numerical
            }
            _ => Kind::Data,
        }
    }
}

impl Classify for RenderError {
    fn kind(&self) -> Kind {
        match self {
            RenderError::NonFinite { .. } | RenderError::DegenerateRotation { .. } => Kind::Numerical,
            RenderError::Camera(e) => e.kind(),
            _ => Kind::Data,
        }
    }
}

impl Classify for TrainError {
    fn kind(&self) -> Kind {
        match self {
            TrainError::Config(_) => Kind::Usage,
            TrainError::NonFiniteLoss { .. } | TrainError::Optimizer { .. } => Kind::Numerical,
            TrainError::Render(e) => e.kind(),
            TrainError::Gaussian(e) => e.kind(),
            TrainError::Deformation(DeformationError::Numerics(e)) => e.kind(),
            TrainError::Deformation(DeformationError::Config(_)) | TrainError::HexPlane(_) => Kind::Usage,
            _ => Kind::Data,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> Kind {
        match self {
            SynthError::Params(_) => Kind::Usage,
            SynthError::Render(e) => e.kind(),
            SynthError::Dataset(_) => Kind::Data,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl Classify for $t {
            fn kind(&self) -> Kind {
                Kind::Data
            }
        })*
    };
}

data_errors!(DatasetError, CheckpointError, SemanticError, MetricError, std::io::Error, serde_json::Error);

impl<E: Classify + std::error::Error + Send + Sync + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::new(e.kind(), e)
    }
}

fn data_error(message: impl std::fmt::Display) -> Failure {
    Failure::new(Kind::Data, anyhow!("{message}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            // Library errors often embed their source in the message already.
            let mut msg = f.error.to_string();
            for cause in f.error.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg.push_str(": ");
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.kind as u8)
        }
    }
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(Kind::Data, e))
}

fn create_dir(path: &Path) -> Outcome<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(|e| Failure::new(Kind::Data, e))
}

fn synth(a: SynthArgs) -> Outcome<()> {
    let mut params = match &a.params {
        Some(p) => toml::from_str::<SynthParams>(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))
            .map_err(|e| Failure::new(Kind::Usage, e))?,
        None => SynthParams::default(),
    };
    let overrides = [
        (a.frames, &mut params.frames),
        (a.width, &mut params.width),
        (a.height, &mut params.height),
        (a.blobs, &mut params.blobs),
        (a.teacher_channels, &mut params.teacher_channels),
    ];
    for (value, slot) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    let scene = synth_generate(&params, &a.out)?;
    let text = toml::to_string(&params).map_err(|e| Failure::new(Kind::Data, e))?;
    fs::write(a.out.join("synth.toml"), text)?;
    println!(
        "wrote {} frames ({}×{}, {} blobs, {} teacher channels) to {}",
        params.frames,
        params.width,
        params.height,
        scene.blobs.len(),
        params.teacher_channels,
        a.out.display()
    );
    Ok(())
}

fn open_checkpoint(path: &Path) -> Outcome<(TrainConfig, TrainState)> {
    load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(|e| Failure::new(Kind::Data, e))
}

fn load_data(root: &Path, cfg: &TrainConfig) -> Outcome<Dataset> {
    Ok(load_dataset(root, &cfg.data)?)
}

/// Progress to the log at a coarse cadence, and every record to JSONL.
struct Progress<W: Write> {
    jsonl: JsonLines<W>,
    every: u64,
}

impl<W: Write> StepLog for Progress<W> {
    fn record(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        if rec.stage_iteration % self.every == 0 {
            log::info!(
                "{:?} {:>6}  loss {:.5}  psnr {:.2}  gaussians {}",
                rec.stage,
                rec.stage_iteration,
                rec.loss.total,
                rec.psnr,
                rec.gaussians
            );
        }
        self.jsonl.record(rec)
    }
}

fn train_cmd(a: TrainArgs) -> Outcome<()> {
    let (cfg, mut state, data) = match &a.resume {
        Some(path) => {
            let (cfg, state) = open_checkpoint(path)?;
            let data = TrainData::new(load_data(&a.data, &cfg)?.frames, &cfg.schedule)?;
            log::info!("resuming at iteration {} ({:?})", state.iteration, state.stage);
            (cfg, state, data)
        }
        None => {
            let path = a.config.as_ref().expect("clap enforces --config");
            let cfg = TrainConfig::from_toml(&read_text(path)?)?;
            let data = TrainData::new(load_data(&a.data, &cfg)?.frames, &cfg.schedule)?;
            let state = TrainState::initialize(&cfg, &data)?;
            (cfg, state, data)
        }
    };
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(a.out.join("log.jsonl"))?;
    let mut log = Progress {
        jsonl: JsonLines(BufWriter::new(log_file)),
        every: 100,
    };
    let chunk = if a.checkpoint_every == 0 { u64::MAX } else { a.checkpoint_every };
    loop {
        if a.coarse_only && (state.stage == Stage::Fine || state.coarse_capped) {
            break;
        }
        let budget = if a.coarse_only {
            chunk.min(cfg.schedule.coarse_iterations.saturating_sub(state.stage_iteration))
        } else {
            chunk
        };
        let done = train_steps(&mut state, &cfg, &data, budget, &mut log)?;
        if a.checkpoint_every > 0 && done > 0 {
            let dir = a.out.join("checkpoints");
            create_dir(&dir)?;
            save_checkpoint(&dir.join(frame_name(state.iteration as usize, "ssck")), &cfg, &state)?;
        }
        if done < budget || budget == 0 {
            break;
        }
    }
    log.jsonl.0.flush()?;
    let path = a.out.join("checkpoint.ssck");
    save_checkpoint(&path, &cfg, &state)?;
    println!(
        "{} iterations ({:?} stage), {} Gaussians; checkpoint {}",
        state.iteration,
        state.stage,
        state.cloud.len(),
        path.display()
    );
    Ok(())
}

fn select(select: &FrameSelect, cfg: &TrainConfig, count: usize) -> Vec<usize> {
    let every = select.every.unwrap_or(cfg.schedule.test_every);
    let offset = select.offset.unwrap_or(cfg.schedule.test_offset);
    let (train, test) = split_every(count, every, offset);
    match select.split {
        Split::Train => train,
        Split::Test => test,
        Split::All => (0..count).collect(),
    }
}

/// Rounds through `f32`, the precision of the feature-file container, so
/// that metrics recomputed from `render` outputs match `eval` exactly.
fn as_stored(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn hwc_to_map(hwc: &[f64], height: usize, width: usize, channels: usize) -> Outcome<FeatureMap> {
    Ok(FeatureMap::from_hwc(hwc, height, width, channels)?)
}

fn render_cmd(a: RenderArgs) -> Outcome<()> {
    let (cfg, state) = open_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, &cfg)?;
    let indices: Vec<usize> = if a.frames.is_empty() { (0..data.frames.len()).collect() } else { a.frames.clone() };
    create_dir(&a.out)?;
    for &i in &indices {
        let mut frame: CameraFrame = data
            .frames
            .get(i)
            .cloned()
            .ok_or_else(|| data_error(format!("frame {i} out of range (dataset has {})", data.frames.len())))?;
        if let Some(t) = a.time {
            frame.time = t;
        }
        let (out, decoded) = state.render_frame(&cfg, &frame)?;
        let (w, h) = (out.width, out.height);
        save_rgb_png(&a.out.join(format!("color_{}", frame_name(i, "png"))), &out.color, w, h)?;
        hwc_to_map(&out.color, h, w, 3)?.write(&a.out.join(format!("color_{}", frame_name(i, "feat"))))?;
        save_depth_png(
            &a.out.join(format!("depth_{}", frame_name(i, "png"))),
            &out.depth,
            w,
            h,
            cfg.data.meters_per_unit,
        )?;
        FeatureMap::new(1, h, w, out.depth.clone())?.write(&a.out.join(format!("depth_{}", frame_name(i, "feat"))))?;
        hwc_to_map(&out.feature, h, w, out.feature_dim)?
            .write(&a.out.join(format!("feature_{}", frame_name(i, "feat"))))?;
        if let Some(d) = decoded {
            d.write(&a.out.join(format!("decoded_{}", frame_name(i, "feat"))))?;
        }
    }
    println!("rendered {} frames to {}", indices.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    frame: usize,
    time: f64,
    psnr: f64,
    ssim: Option<f64>,
    feature_loss: Option<f64>,
}

fn eval_cmd(a: EvalArgs) -> Outcome<()> {
    let (cfg, state) = open_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, &cfg)?;
    let indices = select(&a.select, &cfg, data.frames.len());
    if indices.is_empty() {
        return Err(Failure::new(Kind::Usage, anyhow!("the selected split is empty")));
    }
    let mut rows = Vec::new();
    for &i in &indices {
        let frame = &data.frames[i];
        let (out, decoded) = state.render_frame(&cfg, frame)?;
        let color = as_stored(&out.color);
        let psnr = masked_psnr(&color, &frame.image, &frame.mask, 3)?;
        let ssim = match ssim(&color, &frame.image, out.width, out.height, 3) {
            Ok(v) => Some(v),
            Err(MetricError::TooSmall { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let feature_loss = match (decoded, &frame.features) {
            (Some(mut d), Some(gt)) => {
                d.data = as_stored(&d.data);
                Some(feature_loss(&d, gt)?)
            }
            _ => None,
        };
        rows.push(EvalRow {
            frame: i,
            time: frame.time,
            psnr,
            ssim,
            feature_loss,
        });
    }
    println!("{:>6} {:>8} {:>10} {:>8} {:>11}", "frame", "time", "PSNR (dB)", "SSIM", "feature L1");
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for r in &rows {
        println!(
            "{:>6} {:>8.4} {:>10.3} {:>8} {:>11}",
            r.frame,
            r.time,
            r.psnr,
            opt(r.ssim, 4),
            opt(r.feature_loss, 5)
        );
    }
    let mean = |f: &dyn Fn(&EvalRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    println!(
        "{:>6} {:>8} {:>10} {:>8} {:>11}",
        "mean",
        "",
        opt(mean(&|r| Some(r.psnr)), 3),
        opt(mean(&|r| r.ssim), 4),
        opt(mean(&|r| r.feature_loss), 5)
    );
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn decoded_at(
    state: &TrainState,
    cfg: &TrainConfig,
    frame: &CameraFrame,
    image_res: bool,
) -> Outcome<FeatureMap> {
    let decoder = state
        .decoder
        .as_ref()
        .ok_or_else(|| data_error("checkpoint has no feature decoder (dataset had no teacher features)"))?;
    let out = semsplat_core::rasterizer::render(&state.cloud_at(frame.time)?, &frame.camera, &cfg.render)?;
    let (th, tw) = match (&frame.features, image_res) {
        (Some(gt), false) => (gt.height, gt.width),
        _ => (out.height, out.width),
    };
    Ok(decoder.forward(&out.feature, out.height, out.width, th, tw)?.0)
}

/// Stacks label maps vertically so one confusion matrix pools all frames.
fn stack(maps: &[LabelMap]) -> Outcome<LabelMap> {
    let (h, w) = (maps[0].height, maps[0].width);
    let labels: Vec<u32> = maps.iter().flat_map(|m| m.labels.iter().copied()).collect();
    Ok(LabelMap::new(h * maps.len(), w, labels)?)
}

fn segment_cmd(a: SegmentArgs) -> Outcome<()> {
    let (cfg, state) = open_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, &cfg)?;
    if !data.has_labels {
        return Err(data_error("dataset has no labels/ directory"));
    }
    let classes = data.classes();
    create_dir(&a.out)?;
    let mut protos: ClassPrototypes = match &a.prototypes {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => {
            let fit = select(
                &FrameSelect {
                    split: Split::Train,
                    every: a.select.every,
                    offset: a.select.offset,
                },
                &cfg,
                data.frames.len(),
            );
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for &i in &fit {
                feats.push(decoded_at(&state, &cfg, &data.frames[i], a.image_res)?);
                labels.push(data.frames[i].labels.clone().expect("has_labels checked"));
            }
            let fitted: Vec<u32> = if a.foreground_only {
                classes.clone()
            } else {
                std::iter::once(0).chain(classes.iter().copied()).collect()
            };
            let protos = fit_prototypes(&feats, &labels, &fitted, a.threshold.unwrap_or(0.5))?;
            fs::write(a.out.join("prototypes.json"), serde_json::to_string_pretty(&protos)?)?;
            protos
        }
    };
    if let Some(t) = a.threshold {
        protos.threshold = t;
    }
    let indices = select(&a.select, &cfg, data.frames.len());
    if indices.is_empty() {
        return Err(Failure::new(Kind::Usage, anyhow!("the selected split is empty")));
    }
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for &i in &indices {
        let frame = &data.frames[i];
        let feats = decoded_at(&state, &cfg, frame, a.image_res)?;
        let pred = segment(&feats, &protos)?;
        let ids: Vec<u8> = pred.labels.iter().map(|&l| l.min(255) as u8).collect();
        save_gray8_png(&a.out.join(format!("labels_{}", frame_name(i, "png"))), &ids, pred.width, pred.height)?;
        gts.push(frame.labels.as_ref().expect("has_labels checked").resize_nearest(pred.height, pred.width));
        preds.push(pred);
    }
    let report = seg_metrics(&stack(&preds)?, &stack(&gts)?, &classes)?;
    let deviation = report.dsc_iou_deviation();
    if deviation > 1e-12 {
        return Err(Failure::new(
            Kind::Numerical,
            anyhow!("DSC and IoU disagree by {deviation:e}"),
        ));
    }
    println!("{:>6} {:>8} {:>7} {:>7} {:>7} {:>9}", "class", "support", "IoU", "DSC", "recall", "precision");
    for c in &report.per_class {
        let s = c.scores;
        println!(
            "{:>6} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>9.4}",
            c.class, c.support, s.iou, s.dsc, s.recall, s.precision
        );
    }
    if let Some(s) = report.aggregate {
        println!(
            "{:>6} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>9.4}",
            "all", "", s.iou, s.dsc, s.recall, s.precision
        );
    }
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome<()> {
    let opts = GradcheckOptions {
        seed: a.seed,
        samples_per_group: a.samples,
        step: a.step,
        tolerance: a.tolerance,
    };
    let report = run_gradcheck(&opts);
    println!("{:<24} {:>7} {:>14}", "group", "checked", "max rel error");
    for g in &report.groups {
        println!("{:<24} {:>7} {:>14.3e}", g.group, g.checked, g.max_rel_error);
    }
    if report.passed() {
        println!("all groups within {:e}", report.tolerance);
        Ok(())
    } else {
        Err(Failure::new(
            Kind::Numerical,
            anyhow!("max relative error {:e} exceeds {:e}", report.max_rel_error(), report.tolerance),
        ))
    }
}
