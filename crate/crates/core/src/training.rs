//! Loss assembly and the two-stage optimization driver.
//!
//! The coarse stage optimizes the canonical cloud alone against one
//! training view per iteration. The fine stage renders each view through
//! the deformation field at its timestamp and updates every parameter
//! group: the cloud, the grids, the deformation networks and the feature
//! decoder. Learning-rate schedules and density control count iterations
//! from the start of their own stage.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{split_every, DatasetOptions};
use crate::deformation::{deform, deform_backward, DeformationConfig, DeformationError, DeformationNet};
use crate::gaussians::{
    densify_and_prune, init_from_rgbd, reset_opacity, CameraFrame, DensityConfig, GaussianCloud, GaussianError,
    GradStats, InitOptions, GROUP_NAMES,
};
use crate::hexplane::{HexPlaneConfig, HexPlaneError, HexPlaneField};
use crate::metrics::{masked_psnr, ssim, MetricError};
use crate::numerics::{adam_step, AdamConfig, AdamState, LrSchedule, NumericsError};
use crate::rasterizer::{render, render_backward, RenderCotangents, RenderError, RenderOutput, RenderSettings};
use crate::semantic::{feature_loss, feature_loss_grad, FeatureMap, PointwiseDecoder, SemanticError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, term: &'static str },
    #[error("optimizer step failed at iteration {iteration} ({group}): {source}")]
    Optimizer {
        iteration: u64,
        group: String,
        source: NumericsError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Deformation(#[from] DeformationError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    HexPlane(#[from] HexPlaneError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

fn cfg_err(m: impl Into<String>) -> TrainError {
    TrainError::Config(m.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub lambda_feat: f64,
    pub lambda_tv: f64,
    /// Reserved for a D-SSIM color term; only 0 is accepted.
    pub lambda_ssim: f64,
    pub enable_feature_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_depth: 0.01,
            lambda_feat: 1.0,
            lambda_tv: 0.03,
            lambda_ssim: 0.0,
            enable_feature_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub coarse_iterations: u64,
    pub fine_iterations: u64,
    /// The coarse stage stops once a training render reaches this PSNR.
    /// `inf` disables the cap.
    pub coarse_psnr_cap: f64,
    /// Every `test_every`-th frame (from `test_offset`) is held out; 0
    /// trains on everything.
    pub test_every: usize,
    pub test_offset: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            coarse_iterations: 1000,
            fine_iterations: 6000,
            coarse_psnr_cap: 35.0,
            test_every: 8,
            test_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    /// Multiplied by the scene extent.
    pub position_lr_init: f64,
    pub position_lr_final: f64,
    pub position_lr_max_steps: u64,
    pub deformation_lr_init: f64,
    pub deformation_lr_final: f64,
    pub deformation_lr_delay_mult: f64,
    pub grid_lr_init: f64,
    pub grid_lr_final: f64,
    /// Length of the sine warm-up for the deformation networks.
    pub lr_delay_steps: u64,
    pub color_lr: f64,
    pub feature_lr: f64,
    /// When set, the feature LR decays log-linearly to this value over
    /// `position_lr_max_steps`; constant otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_lr_final: Option<f64>,
    pub opacity_lr: f64,
    pub scaling_lr: f64,
    pub rotation_lr: f64,
    pub decoder_lr: f64,
    /// Same as `feature_lr_final`, for the pointwise decoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_lr_final: Option<f64>,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            position_lr_init: 0.00016,
            position_lr_final: 0.0000016,
            position_lr_max_steps: 7000,
            deformation_lr_init: 0.00016,
            deformation_lr_final: 0.00000016,
            deformation_lr_delay_mult: 0.01,
            grid_lr_init: 0.0032,
            grid_lr_final: 0.0000032,
            lr_delay_steps: 0,
            color_lr: 0.0025,
            feature_lr: 0.0025,
            feature_lr_final: None,
            opacity_lr: 0.05,
            scaling_lr: 0.005,
            rotation_lr: 0.001,
            decoder_lr: 0.001,
            decoder_lr_final: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityScheduleConfig {
    pub percent_dense: f64,
    pub densify_grad_threshold: f64,
    pub split_factor: f64,
    pub split_children: usize,
    pub prune_opacity: f64,
    pub max_gaussians: u64,
    pub densify_from_iter: u64,
    pub densify_until_iter: u64,
    pub densification_interval: u64,
    pub opacity_reset_interval: u64,
    pub opacity_reset_value: f64,
    pub prune_interval: u64,
}

impl Default for DensityScheduleConfig {
    fn default() -> Self {
        let d = DensityConfig::default();
        Self {
            percent_dense: d.percent_dense,
            densify_grad_threshold: d.densify_grad_threshold,
            split_factor: d.split_factor,
            split_children: d.split_children,
            prune_opacity: d.prune_opacity,
            max_gaussians: 2_000_000,
            densify_from_iter: 500,
            densify_until_iter: 15_000,
            densification_interval: 100,
            opacity_reset_interval: 6000,
            opacity_reset_value: 0.01,
            prune_interval: 6000,
        }
    }
}

impl DensityScheduleConfig {
    pub fn density(&self) -> DensityConfig {
        DensityConfig {
            densify_grad_threshold: self.densify_grad_threshold,
            percent_dense: self.percent_dense,
            split_factor: self.split_factor,
            split_children: self.split_children,
            prune_opacity: self.prune_opacity,
            max_gaussians: usize::try_from(self.max_gaussians).unwrap_or(usize::MAX),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub initial_points: usize,
    /// Rendered semantic feature width.
    pub feature_dim: usize,
    pub initial_opacity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            initial_points: 90_000,
            feature_dim: 128,
            initial_opacity: 0.1,
        }
    }
}

/// Everything that determines a training run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optimization: OptimizationConfig,
    pub density: DensityScheduleConfig,
    pub model: ModelConfig,
    pub hexplane: HexPlaneConfig,
    pub deformation: DeformationConfig,
    pub render: RenderSettings,
    pub data: DatasetOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optimization: OptimizationConfig::default(),
            density: DensityScheduleConfig::default(),
            model: ModelConfig::default(),
            hexplane: HexPlaneConfig::default(),
            deformation: DeformationConfig::default(),
            render: RenderSettings::default(),
            data: DatasetOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let l = &self.loss;
        for (name, v) in [
            ("lambda_rgb", l.lambda_rgb),
            ("lambda_depth", l.lambda_depth),
            ("lambda_feat", l.lambda_feat),
            ("lambda_tv", l.lambda_tv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if l.lambda_ssim != 0.0 {
            return Err(cfg_err("lambda_ssim is reserved; only 0 is supported"));
        }
        if self.schedule.coarse_psnr_cap.is_nan() {
            return Err(cfg_err("coarse_psnr_cap must be a number (use inf to disable)"));
        }
        for s in self.schedules(1.0) {
            s.1.validate().map_err(|e| cfg_err(format!("{} schedule: {e}", s.0)))?;
        }
        let d = &self.density;
        if !(d.opacity_reset_value > 0.0 && d.opacity_reset_value < 1.0) {
            return Err(cfg_err("opacity_reset_value must lie in (0, 1)"));
        }
        if d.split_children == 0 || !(d.split_factor > 0.0) {
            return Err(cfg_err("split_children and split_factor must be positive"));
        }
        if self.model.initial_points == 0 || self.model.feature_dim == 0 {
            return Err(cfg_err("initial_points and feature_dim must be positive"));
        }
        if !(self.model.initial_opacity > 0.0 && self.model.initial_opacity < 1.0) {
            return Err(cfg_err("initial_opacity must lie in (0, 1)"));
        }
        if self.render.tile_size == 0 {
            return Err(cfg_err("tile_size must be positive"));
        }
        self.hexplane.validate()?;
        Ok(())
    }

    /// Short digest of the serialized config.
    pub fn hash(&self) -> [u8; 8] {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = [0; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    /// `(name, schedule)` for every parameter group, positions scaled by
    /// `extent`.
    pub fn schedules(&self, extent: f64) -> Vec<(&'static str, LrSchedule)> {
        let o = &self.optimization;
        let max = o.position_lr_max_steps;
        let decaying = |init: f64, fin: Option<f64>| match fin {
            Some(f) => LrSchedule::new(init, f, max),
            None => LrSchedule::constant(init),
        };
        vec![
            ("position", LrSchedule::new(o.position_lr_init * extent, o.position_lr_final * extent, max)),
            ("rotation", LrSchedule::constant(o.rotation_lr)),
            ("scaling", LrSchedule::constant(o.scaling_lr)),
            ("opacity", LrSchedule::constant(o.opacity_lr)),
            ("color", LrSchedule::constant(o.color_lr)),
            ("feature", decaying(o.feature_lr, o.feature_lr_final)),
            ("grid", LrSchedule::new(o.grid_lr_init, o.grid_lr_final, max)),
            (
                "deformation",
                LrSchedule::new(o.deformation_lr_init, o.deformation_lr_final, max)
                    .with_delay(o.deformation_lr_delay_mult, o.lr_delay_steps),
            ),
            ("decoder", decaying(o.decoder_lr, o.decoder_lr_final)),
        ]
    }
}

/// Frames plus the train/test partition.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub frames: Vec<CameraFrame>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrainData {
    pub fn new(frames: Vec<CameraFrame>, schedule: &ScheduleConfig) -> Result<Self, TrainError> {
        if frames.is_empty() {
            return Err(cfg_err("no frames"));
        }
        let (train, test) = split_every(frames.len(), schedule.test_every, schedule.test_offset);
        if train.is_empty() {
            return Err(cfg_err("split leaves no training frames"));
        }
        Ok(Self { frames, train, test })
    }

    /// Teacher channel count, if every frame has a feature map.
    pub fn teacher_channels(&self) -> Option<usize> {
        let first = self.frames[0].features.as_ref()?.channels;
        self.frames
            .iter()
            .all(|f| f.features.as_ref().is_some_and(|m| m.channels == first))
            .then_some(first)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

/// Per-term losses; `total` is the λ-weighted sum of the terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
    pub feat: f64,
    pub tv: f64,
}

/// Effective weights for one evaluation of [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub feat: f64,
    pub tv: f64,
}

impl From<&LossConfig> for LossWeights {
    fn from(l: &LossConfig) -> Self {
        Self {
            rgb: l.lambda_rgb,
            depth: l.lambda_depth,
            feat: if l.enable_feature_loss { l.lambda_feat } else { 0.0 },
            tv: l.lambda_tv,
        }
    }
}

/// Pixels that count towards the depth term.
fn depth_valid(render: &RenderOutput, frame: &CameraFrame, p: usize) -> bool {
    frame.mask[p] && render.alpha[p] >= 0.5 && frame.depth[p] > 0.0
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted training loss. `decoded` is the teacher-space prediction (the
/// feature term is zero without it or without a teacher map) and `field`
/// supplies the smoothness term (zero when absent).
pub fn total_loss(
    render: &RenderOutput,
    frame: &CameraFrame,
    decoded: Option<&FeatureMap>,
    field: Option<&HexPlaneField>,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    if render.color.len() != frame.image.len() || render.depth.len() != frame.depth.len() {
        return Err(cfg_err("render and frame sizes differ"));
    }
    let pixels = render.depth.len();
    let (mut rgb_sum, mut rgb_n) = (0.0, 0usize);
    let (mut d_sum, mut d_n) = (0.0, 0usize);
    for p in 0..pixels {
        if !frame.mask[p] {
            continue;
        }
        for c in 0..3 {
            rgb_sum += (render.color[3 * p + c] - frame.image[3 * p + c]).abs();
        }
        rgb_n += 3;
        if depth_valid(render, frame, p) {
            d_sum += (render.depth[p] - frame.depth[p]).abs();
            d_n += 1;
        }
    }
    let rgb = if rgb_n > 0 { rgb_sum / rgb_n as f64 } else { 0.0 };
    let depth = if d_n > 0 { d_sum / d_n as f64 } else { 0.0 };
    let feat = match (decoded, &frame.features) {
        (Some(pred), Some(gt)) => feature_loss(pred, gt)?,
        _ => 0.0,
    };
    let tv = field.map_or(0.0, HexPlaneField::tv_loss);
    Ok(LossBreakdown {
        total: weights.rgb * rgb + weights.depth * depth + weights.feat * feat + weights.tv * tv,
        rgb,
        depth,
        feat,
        tv,
    })
}

/// Gradients of the color and depth terms of [`total_loss`].
fn image_cotangents(render: &RenderOutput, frame: &CameraFrame, weights: &LossWeights) -> (Vec<f64>, Vec<f64>) {
    let pixels = render.depth.len();
    let masked = frame.mask.iter().filter(|&&m| m).count();
    let d_n = (0..pixels).filter(|&p| depth_valid(render, frame, p)).count();
    let mut d_color = vec![0.0; 3 * pixels];
    let mut d_depth = vec![0.0; pixels];
    let cs = if masked > 0 { weights.rgb / (3 * masked) as f64 } else { 0.0 };
    let ds = if d_n > 0 { weights.depth / d_n as f64 } else { 0.0 };
    for p in 0..pixels {
        if !frame.mask[p] {
            continue;
        }
        for c in 0..3 {
            d_color[3 * p + c] = cs * sign(render.color[3 * p + c] - frame.image[3 * p + c]);
        }
        if depth_valid(render, frame, p) {
            d_depth[p] = ds * sign(render.depth[p] - frame.depth[p]);
        }
    }
    (d_color, d_depth)
}

/// Complete optimizer state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub field: HexPlaneField,
    pub net: DeformationNet,
    pub decoder: Option<PointwiseDecoder>,
    /// One per cloud group, in [`GROUP_NAMES`] order.
    pub cloud_opt: Vec<AdamState>,
    pub field_opt: AdamState,
    /// One per slice of [`DeformationNet::params`].
    pub net_opt: Vec<AdamState>,
    pub decoder_opt: Vec<AdamState>,
    pub grad_stats: GradStats,
    pub stage: Stage,
    /// Iterations completed in the current stage.
    pub stage_iteration: u64,
    /// Iterations completed overall.
    pub iteration: u64,
    pub scene_extent: f64,
    /// Set when the coarse stage ended on the PSNR cap.
    pub coarse_capped: bool,
}

fn cloud_states(cloud: &GaussianCloud) -> Vec<AdamState> {
    cloud.groups().iter().map(|g| AdamState::new(g.len(), AdamConfig::GAUSSIAN)).collect()
}

impl TrainState {
    /// Fresh state: cloud from the training frames, grids over its bounds,
    /// networks and decoder from a seeded generator.
    pub fn initialize(cfg: &TrainConfig, data: &TrainData) -> Result<Self, TrainError> {
        cfg.validate()?;
        let teacher = data.teacher_channels();
        if cfg.loss.enable_feature_loss && cfg.loss.lambda_feat > 0.0 && teacher.is_none() {
            return Err(cfg_err(
                "feature loss is enabled but the dataset has no teacher feature maps (features/ missing); \
                 set lambda_feat = 0 or enable_feature_loss = false",
            ));
        }
        let frames: Vec<CameraFrame> = data.train.iter().map(|&i| data.frames[i].clone()).collect();
        let cloud = init_from_rgbd(
            &frames,
            &InitOptions {
                target_count: cfg.model.initial_points,
                feature_dim: cfg.model.feature_dim,
                seed: cfg.seed,
                initial_opacity: cfg.model.initial_opacity,
            },
        )?;
        let scene_extent = cloud.extent().max(1e-6);
        let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0x5EED_F1E1_D000_0001);
        let (lo, hi) = cloud.bounds();
        let field = HexPlaneField::new(cfg.hexplane.clone(), lo, hi, &mut rng)?;
        let net = DeformationNet::new(cfg.deformation.clone(), field.output_dim(), cfg.model.feature_dim, &mut rng)?;
        let decoder = teacher.map(|ct| PointwiseDecoder::kaiming(ct, cfg.model.feature_dim, &mut rng));
        Ok(Self {
            cloud_opt: cloud_states(&cloud),
            field_opt: AdamState::new(field.data.len(), AdamConfig::NETWORK),
            net_opt: net.params().iter().map(|p| AdamState::new(p.len(), AdamConfig::NETWORK)).collect(),
            decoder_opt: decoder
                .iter()
                .flat_map(|d| d.params())
                .map(|p| AdamState::new(p.len(), AdamConfig::NETWORK))
                .collect(),
            grad_stats: GradStats::new(cloud.len()),
            cloud,
            field,
            net,
            decoder,
            stage: Stage::Coarse,
            stage_iteration: 0,
            iteration: 0,
            scene_extent,
            coarse_capped: false,
        })
    }

    /// Cloud parameters as seen at time `t`: canonical during the coarse
    /// stage, deformed afterwards.
    pub fn cloud_at(&self, t: f64) -> Result<GaussianCloud, TrainError> {
        match self.stage {
            Stage::Coarse => Ok(self.cloud.clone()),
            Stage::Fine => Ok(deform(&self.cloud, &self.field, &self.net, t)?.0),
        }
    }

    /// Renders `frame`'s camera at its timestamp, plus the decoded teacher-
    /// space features when a decoder and teacher map are available.
    pub fn render_frame(
        &self,
        cfg: &TrainConfig,
        frame: &CameraFrame,
    ) -> Result<(RenderOutput, Option<FeatureMap>), TrainError> {
        let cloud = self.cloud_at(frame.time)?;
        let out = render(&cloud, &frame.camera, &cfg.render)?;
        let decoded = match (&self.decoder, &frame.features) {
            (Some(dec), Some(gt)) => Some(dec.forward(&out.feature, out.height, out.width, gt.height, gt.width)?.0),
            _ => None,
        };
        Ok((out, decoded))
    }

    /// Switches to the fine stage, clearing the cloud's optimizer moments.
    pub fn begin_fine(&mut self) {
        if self.stage == Stage::Fine {
            return;
        }
        self.stage = Stage::Fine;
        self.stage_iteration = 0;
        self.cloud_opt = cloud_states(&self.cloud);
        self.grad_stats = GradStats::new(self.cloud.len());
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub stage_iteration: u64,
    pub frame: usize,
    pub loss: LossBreakdown,
    pub psnr: f64,
    pub lr: BTreeMap<String, f64>,
    pub gaussians: usize,
}

/// Index into `data.frames` used at stage iteration `it`.
pub fn frame_for_iteration(cfg: &TrainConfig, data: &TrainData, stage: Stage, it: u64) -> usize {
    let n = data.train.len();
    let salt = match stage {
        Stage::Coarse => 0xC0A5,
        Stage::Fine => 0xF17E,
    };
    let start = Pcg64::seed_from_u64(cfg.seed ^ salt).random_range(0..n);
    data.train[(start + it as usize) % n]
}

fn opt_err(iteration: u64, group: &str) -> impl FnOnce(NumericsError) -> TrainError + '_ {
    move |source| TrainError::Optimizer {
        iteration,
        group: group.to_string(),
        source,
    }
}

/// One optimization step in the current stage.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, data: &TrainData) -> Result<StepRecord, TrainError> {
    let it = state.stage_iteration;
    let fine = state.stage == Stage::Fine;
    let frame_index = frame_for_iteration(cfg, data, state.stage, it);
    let frame = &data.frames[frame_index];
    let mut weights = LossWeights::from(&cfg.loss);
    let feature_active = fine && weights.feat > 0.0 && state.decoder.is_some() && frame.features.is_some();
    if !feature_active {
        weights.feat = 0.0;
    }
    let tv_active = fine && cfg.deformation.enable_hexplane && weights.tv > 0.0;
    if !tv_active {
        weights.tv = 0.0;
    }

    let deformed = if fine {
        Some(deform(&state.cloud, &state.field, &state.net, frame.time)?)
    } else {
        None
    };
    let snapshot = deformed.as_ref().map_or(&state.cloud, |d| &d.0);
    let out = render(snapshot, &frame.camera, &cfg.render)?;

    let mut decoded = None;
    let mut d_rendered_feat = None;
    let mut decoder_grads = None;
    if feature_active {
        let dec = state.decoder.as_ref().expect("checked");
        let gt = frame.features.as_ref().expect("checked");
        let (pred, cache) = dec.forward(&out.feature, out.height, out.width, gt.height, gt.width)?;
        let g = feature_loss_grad(&pred, gt, weights.feat)?;
        let (d_rendered, dg) = dec.backward(&cache, &g)?;
        d_rendered_feat = Some(d_rendered);
        decoder_grads = Some(dg);
        decoded = Some(pred);
    }
    let loss = total_loss(&out, frame, decoded.as_ref(), tv_active.then_some(&state.field), &weights)?;
    for (term, v) in [
        ("total", loss.total),
        ("rgb", loss.rgb),
        ("depth", loss.depth),
        ("feature", loss.feat),
        ("tv", loss.tv),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: state.iteration,
                term,
            });
        }
    }
    let psnr = masked_psnr(&out.color, &frame.image, &frame.mask, 3)?;

    let (d_color, d_depth) = image_cotangents(&out, frame, &weights);
    let grads = render_backward(
        snapshot,
        &frame.camera,
        &cfg.render,
        &out,
        RenderCotangents {
            color: Some(&d_color),
            depth: Some(&d_depth),
            feature: d_rendered_feat.as_deref(),
            alpha: None,
        },
    )?;
    let view_norms = grads.view_space_norms;
    let (cloud_grad, net_grad, mut field_grad) = match &deformed {
        Some((_, cache)) => {
            let back = deform_backward(&state.field, &state.net, cache, &grads.cloud)?;
            (back.cloud, Some(back.net), Some(back.field))
        }
        None => (grads.cloud, None, None),
    };
    if tv_active {
        if let Some(fg) = field_grad.as_mut() {
            state.field.tv_loss_backward(weights.tv, fg);
        }
    }

    let schedules = cfg.schedules(state.scene_extent);
    let mut lr = BTreeMap::new();
    for (name, s) in &schedules {
        let v = s.lr_at_step(it).map_err(opt_err(state.iteration, name))?;
        lr.insert(name.to_string(), v);
    }
    let iteration = state.iteration;
    for (g, (params, grad)) in state.cloud.groups_mut().into_iter().zip(cloud_grad.groups()).enumerate() {
        let name = GROUP_NAMES[g];
        adam_step(params, grad, &mut state.cloud_opt[g], lr[name]).map_err(opt_err(iteration, name))?;
    }
    if let Some(fg) = field_grad {
        if cfg.deformation.enable_hexplane {
            adam_step(&mut state.field.data, &fg, &mut state.field_opt, lr["grid"]).map_err(opt_err(iteration, "grid"))?;
        }
    }
    if let Some(ng) = net_grad {
        let slices = ng.slices();
        for ((p, g), st) in state.net.params_mut().into_iter().zip(slices).zip(state.net_opt.iter_mut()) {
            adam_step(p, g, st, lr["deformation"]).map_err(opt_err(iteration, "deformation"))?;
        }
    }
    if let (Some(dg), Some(dec)) = (decoder_grads, state.decoder.as_mut()) {
        let gs = [dg.weight.data(), dg.bias.data()];
        for ((p, g), st) in dec.params_mut().into_iter().zip(gs).zip(state.decoder_opt.iter_mut()) {
            adam_step(p, g, st, lr["decoder"]).map_err(opt_err(iteration, "decoder"))?;
        }
    }

    state.grad_stats.record(&view_norms);
    state.stage_iteration += 1;
    state.iteration += 1;
    density_control(state, cfg);

    Ok(StepRecord {
        iteration: state.iteration,
        stage: state.stage,
        stage_iteration: state.stage_iteration,
        frame: frame_index,
        loss,
        psnr,
        lr,
        gaussians: state.cloud.len(),
    })
}

fn apply_origins(state: &mut TrainState, origins: &[Option<usize>]) {
    let widths = state.cloud.row_widths();
    for (st, w) in state.cloud_opt.iter_mut().zip(widths) {
        st.remap_rows(w, origins);
    }
    state.grad_stats = GradStats::new(state.cloud.len());
}

fn density_control(state: &mut TrainState, cfg: &TrainConfig) {
    let d = &cfg.density;
    let it = state.stage_iteration;
    let seed = cfg.seed ^ ((state.stage == Stage::Fine) as u64) << 63;
    if it > d.densify_from_iter && it <= d.densify_until_iter && d.densification_interval > 0 && it % d.densification_interval == 0 {
        let outcome = densify_and_prune(
            &mut state.cloud,
            &state.grad_stats,
            state.scene_extent,
            &d.density(),
            seed,
            it,
        );
        log::debug!(
            "density control at {it}: cloned {}, split {}, pruned {}",
            outcome.cloned,
            outcome.split,
            outcome.pruned
        );
        apply_origins(state, &outcome.origins);
    } else if d.prune_interval > 0 && it % d.prune_interval == 0 {
        let prune_only = DensityConfig {
            densify_grad_threshold: f64::INFINITY,
            ..d.density()
        };
        let outcome = densify_and_prune(&mut state.cloud, &state.grad_stats, state.scene_extent, &prune_only, seed, it);
        if outcome.pruned > 0 {
            apply_origins(state, &outcome.origins);
        }
    }
    if d.opacity_reset_interval > 0 && it % d.opacity_reset_interval == 0 {
        if !reset_opacity(&mut state.cloud, d.opacity_reset_value).is_empty() {
            state.cloud_opt[3].reset_moments();
        }
    }
}

/// Sink for [`StepRecord`]s.
pub trait StepLog {
    fn record(&mut self, rec: &StepRecord) -> Result<(), TrainError>;
}

impl StepLog for () {
    fn record(&mut self, _: &StepRecord) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> StepLog for JsonLines<W> {
    fn record(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).map_err(|e| TrainError::Log(e.into()))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

impl<F: FnMut(&StepRecord)> StepLog for F {
    fn record(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        self(rec);
        Ok(())
    }
}

/// Runs (or resumes) the coarse stage to completion or to the PSNR cap.
/// Does nothing once the state has moved to the fine stage.
pub fn train_coarse(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    log: &mut dyn StepLog,
) -> Result<(), TrainError> {
    while state.stage == Stage::Coarse && !state.coarse_capped && state.stage_iteration < cfg.schedule.coarse_iterations {
        let rec = train_step(state, cfg, data)?;
        log.record(&rec)?;
        if rec.psnr >= cfg.schedule.coarse_psnr_cap {
            log::info!("coarse stage reached {:.2} dB at iteration {}", rec.psnr, rec.stage_iteration);
            state.coarse_capped = true;
        }
    }
    Ok(())
}

/// Runs (or resumes) the fine stage, entering it first if needed.
pub fn train_fine(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    log: &mut dyn StepLog,
) -> Result<(), TrainError> {
    state.begin_fine();
    while state.stage_iteration < cfg.schedule.fine_iterations {
        let rec = train_step(state, cfg, data)?;
        log.record(&rec)?;
    }
    Ok(())
}

/// Runs at most `steps` iterations of the full schedule from wherever
/// `state` is. Returns the number executed.
pub fn train_steps(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    steps: u64,
    log: &mut dyn StepLog,
) -> Result<u64, TrainError> {
    let mut done = 0;
    while done < steps {
        if state.stage == Stage::Coarse
            && (state.coarse_capped || state.stage_iteration >= cfg.schedule.coarse_iterations)
        {
            state.begin_fine();
        }
        if state.stage == Stage::Fine && state.stage_iteration >= cfg.schedule.fine_iterations {
            break;
        }
        let rec = train_step(state, cfg, data)?;
        log.record(&rec)?;
        if state.stage == Stage::Coarse && rec.psnr >= cfg.schedule.coarse_psnr_cap {
            state.coarse_capped = true;
        }
        done += 1;
    }
    Ok(done)
}

/// Full coarse-then-fine run.
pub fn train(state: &mut TrainState, cfg: &TrainConfig, data: &TrainData, log: &mut dyn StepLog) -> Result<(), TrainError> {
    train_coarse(state, cfg, data, log)?;
    train_fine(state, cfg, data, log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameEval {
    pub frame: usize,
    pub time: f64,
    pub psnr: f64,
    /// `None` below the SSIM window size.
    pub ssim: Option<f64>,
    pub feature_loss: Option<f64>,
}

/// Image and feature metrics on the given frames.
pub fn evaluate(
    state: &TrainState,
    cfg: &TrainConfig,
    frames: &[CameraFrame],
    indices: &[usize],
) -> Result<Vec<FrameEval>, TrainError> {
    indices
        .iter()
        .map(|&i| {
            let frame = &frames[i];
            let (out, decoded) = state.render_frame(cfg, frame)?;
            let psnr = masked_psnr(&out.color, &frame.image, &frame.mask, 3)?;
            let ssim = match ssim(&out.color, &frame.image, out.width, out.height, 3) {
                Ok(v) => Some(v),
                Err(MetricError::TooSmall { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let feature_loss = match (&decoded, &frame.features) {
                (Some(p), Some(gt)) => Some(feature_loss(p, gt)?),
                _ => None,
            };
            Ok(FrameEval {
                frame: i,
                time: frame.time,
                psnr,
                ssim,
                feature_loss,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SynthParams, SyntheticScene};

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.initial_points = 300;
        cfg.model.feature_dim = 4;
        cfg.hexplane.multipliers = vec![1, 2];
        cfg.hexplane.base_resolution = [4, 4, 4, 4];
        cfg.hexplane.output_coordinate_dim = 8;
        cfg.deformation.width = 8;
        cfg.deformation.depth = 2;
        cfg.schedule.coarse_iterations = 5;
        cfg.schedule.fine_iterations = 5;
        cfg.schedule.test_every = 0;
        cfg
    }

    fn tiny_data(frames: usize) -> TrainData {
        let scene = SyntheticScene::new(SynthParams {
            width: 16,
            height: 16,
            frames,
            blobs: 1,
            teacher_channels: 4,
            ..SynthParams::default()
        })
        .unwrap();
        TrainData::new(scene.frames().unwrap(), &ScheduleConfig { test_every: 0, ..Default::default() }).unwrap()
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.loss.lambda_rgb, cfg.loss.lambda_depth, cfg.loss.lambda_feat, cfg.loss.lambda_tv), (1.0, 0.01, 1.0, 0.03));
        assert_eq!((cfg.schedule.coarse_iterations, cfg.schedule.fine_iterations), (1000, 6000));
        let s: BTreeMap<_, _> = cfg.schedules(1.0).into_iter().collect();
        assert_eq!(s["grid"].lr_at_step(0).unwrap(), 0.0032);
        assert_eq!(s["grid"].lr_at_step(7000).unwrap(), 0.0000032);
        assert_eq!(s["position"].lr_at_step(7000).unwrap(), 0.0000016);
        assert_eq!(cfg.model.initial_points, 90_000);
        assert_eq!(cfg.density.percent_dense, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = tiny_config();
        cfg.schedule.coarse_psnr_cap = f64::INFINITY;
        let text = cfg.to_toml();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let partial = TrainConfig::from_toml("seed = 3\n[hexplane]\nmultiresolution_levels = [1, 2]\n").unwrap();
        assert_eq!(partial.hexplane.multipliers, vec![1, 2]);
        assert!(TrainConfig::from_toml("[loss]\nlambda_rgb = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("[loss]\nbogus = 1\n").is_err());
    }

    #[test]
    fn loss_breakdown_hand_case() {
        let data = tiny_data(1);
        let frame = &data.frames[0];
        let (w, h) = (2, 2);
        let mut f = frame.clone();
        f.camera.width = w;
        f.camera.height = h;
        f.image = vec![0.5; 12];
        f.depth = vec![1.0, 2.0, 3.0, 4.0];
        f.mask = vec![true, true, true, false];
        f.features = Some(FeatureMap::new(1, 1, 1, vec![0.25]).unwrap());
        let cloud = GaussianCloud::zeros(0, 1);
        let mut out = render(&cloud, &f.camera, &RenderSettings::default()).unwrap();
        out.color = vec![0.6, 0.5, 0.5, 0.5, 0.3, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0];
        out.depth = vec![1.5, 2.0, 2.0, 0.0];
        out.alpha = vec![1.0, 0.2, 0.9, 1.0];
        let pred = FeatureMap::new(1, 1, 1, vec![0.75]).unwrap();
        let weights = LossWeights {
            rgb: 1.0,
            depth: 0.01,
            feat: 1.0,
            tv: 0.03,
        };
        let b = total_loss(&out, &f, Some(&pred), None, &weights).unwrap();
        // rgb: |0.1| + |0.2| over 9 masked values; depth: pixels 0 and 2.
        assert!((b.rgb - 0.3 / 9.0).abs() < 1e-15);
        assert!((b.depth - 0.75).abs() < 1e-15);
        assert_eq!(b.feat, 0.5);
        assert_eq!(b.tv, 0.0);
        let expect = 0.3 / 9.0 + 0.01 * 0.75 + 0.5;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_leave_state_untouched() {
        let data = tiny_data(2);
        let mut cfg = tiny_config();
        cfg.schedule.coarse_iterations = 0;
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let before = state.clone();
        train_coarse(&mut state, &cfg, &data, &mut ()).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn missing_teacher_maps_are_a_config_error() {
        let mut data = tiny_data(2);
        for f in &mut data.frames {
            f.features = None;
        }
        let cfg = tiny_config();
        assert!(matches!(TrainState::initialize(&cfg, &data), Err(TrainError::Config(_))));
        let mut off = cfg.clone();
        off.loss.enable_feature_loss = false;
        TrainState::initialize(&off, &data).unwrap();
    }

    #[test]
    fn fine_stage_starts_where_coarse_ends() {
        let data = tiny_data(3);
        let cfg = tiny_config();
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        train_coarse(&mut state, &cfg, &data, &mut ()).unwrap();
        let frame = &data.frames[1];
        let coarse = state.render_frame(&cfg, frame).unwrap().0;
        state.begin_fine();
        let fine = state.render_frame(&cfg, frame).unwrap().0;
        assert_eq!(coarse.color, fine.color);
        assert_eq!(coarse.feature, fine.feature);
    }

    #[test]
    fn disabled_feature_loss_leaves_semantics_untouched() {
        let data = tiny_data(3);
        let mut cfg = tiny_config();
        cfg.loss.enable_feature_loss = false;
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let decoder0 = state.decoder.clone();
        let feat_net0 = state.net.f_feat.clone();
        train(&mut state, &cfg, &data, &mut ()).unwrap();
        assert!(state.cloud.features.iter().all(|&v| v == 0.0));
        assert_eq!(state.decoder, decoder0);
        assert_eq!(state.net.f_feat.params(), feat_net0.params());
    }

    #[test]
    fn steps_are_reproducible_and_log_lines_parse() {
        let data = tiny_data(3);
        let cfg = tiny_config();
        let run = || {
            let mut state = TrainState::initialize(&cfg, &data).unwrap();
            let mut buf = Vec::new();
            train(&mut state, &cfg, &data, &mut JsonLines(&mut buf)).unwrap();
            (state, buf)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let text = String::from_utf8(la).unwrap();
        assert_eq!(text.lines().count(), 10);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss"]["total"].is_number() && v["lr"]["grid"].is_number() && v["gaussians"].is_number());
        }
    }
}
