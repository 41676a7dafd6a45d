//! Canonical Gaussian cloud, cameras, covariance composition, RGB-D
//! initialization and adaptive density control.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::linalg::{
    cholesky3, cholesky_solve3, logit, mat3_mul, normalize_backward, quat_to_rotation, quat_to_rotation_backward,
    rigid_inverse, rotation_block, sigmoid, transform_point, transpose3, Mat3, Vec3,
};
use crate::semantic::{FeatureMap, LabelMap};

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("degenerate rotation: quaternion norm {0:e}")]
    DegenerateRotation(f64),
    #[error("covariance is singular after regularization")]
    SingularCovariance,
    #[error("initialization produced no points (no masked pixels with positive depth)")]
    EmptyInit,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {field} on Gaussian {index}")]
    NonFinite { index: usize, field: &'static str },
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its centre at integer
/// coordinates, so `(cx, cy)` is the principal point in the same frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    /// Camera-space point seen at pixel `(u, v)` with view depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
    }

    pub fn project(&self, p: &Vec3) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Rigid world-to-camera transform, row-major, OpenCV axes (x right,
    /// y down, z forward).
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), GaussianError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite()) {
            return Err(GaussianError::InvalidCamera(format!("focal lengths must be positive, got ({}, {})", k.fx, k.fy)));
        }
        if !(k.cx.is_finite() && k.cy.is_finite()) {
            return Err(GaussianError::InvalidCamera("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GaussianError::InvalidCamera("image size must be positive".into()));
        }
        let r = rotation_block(&self.world_to_camera);
        let rrt = mat3_mul(&r, &transpose3(&r));
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                if !((rrt[i][j] - target).abs() <= 1e-6) {
                    return Err(GaussianError::InvalidCamera("rotation block is not orthonormal".into()));
                }
            }
        }
        if self.world_to_camera[3] != [0.0, 0.0, 0.0, 1.0] || self.world_to_camera.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(GaussianError::InvalidCamera("extrinsics are not a rigid transform".into()));
        }
        Ok(())
    }

    pub fn camera_to_world(&self) -> [[f64; 4]; 4] {
        rigid_inverse(&self.world_to_camera)
    }

    pub fn center(&self) -> Vec3 {
        let c2w = self.camera_to_world();
        [c2w[0][3], c2w[1][3], c2w[2][3]]
    }
}

/// One posed observation.
#[derive(Clone, Debug)]
pub struct CameraFrame {
    pub camera: Camera,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `H × W`, world units.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub features: Option<FeatureMap>,
    pub labels: Option<LabelMap>,
}

impl CameraFrame {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        self.camera.validate()?;
        let px = self.width() * self.height();
        if self.image.len() != 3 * px || self.depth.len() != px || self.mask.len() != px {
            return Err(GaussianError::Shape(format!(
                "frame buffers do not match {}×{}",
                self.width(),
                self.height()
            )));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(GaussianError::Shape(format!("timestamp {} outside [0, 1]", self.time)));
        }
        if self.depth.iter().zip(&self.mask).any(|(&d, &m)| m && !(d >= 0.0)) {
            return Err(GaussianError::Shape("negative or NaN depth inside the mask".into()));
        }
        Ok(())
    }
}

/// Raw (pre-activation) Gaussian parameters, one row per Gaussian.
///
/// Activations: quaternion normalized, `scale = exp(log_scale)`,
/// `opacity = sigmoid(opacity_logit)`, `color = sigmoid(color_logit)`.
/// The same layout doubles as the gradient container for these parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

/// Names and row widths of the parameter groups, in storage order.
pub const GROUP_NAMES: [&str; 6] = ["position", "rotation", "scaling", "opacity", "color", "feature"];

impl GaussianCloud {
    pub fn zeros(count: usize, feature_dim: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * count],
            rotations: vec![0.0; 4 * count],
            log_scales: vec![0.0; 3 * count],
            opacity_logits: vec![0.0; count],
            color_logits: vec![0.0; 3 * count],
            features: vec![0.0; feature_dim * count],
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_widths(&self) -> [usize; 6] {
        [3, 4, 3, 1, 3, self.feature_dim]
    }

    pub fn groups(&self) -> [&[f64]; 6] {
        [
            &self.positions,
            &self.rotations,
            &self.log_scales,
            &self.opacity_logits,
            &self.color_logits,
            &self.features,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity_logits,
            &mut self.color_logits,
            &mut self.features,
        ]
    }

    pub fn position(&self, i: usize) -> Vec3 {
        [self.positions[3 * i], self.positions[3 * i + 1], self.positions[3 * i + 2]]
    }

    pub fn quaternion(&self, i: usize) -> [f64; 4] {
        let q = &self.rotations[4 * i..4 * i + 4];
        [q[0], q[1], q[2], q[3]]
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        let s = &self.log_scales[3 * i..3 * i + 3];
        [s[0].exp(), s[1].exp(), s[2].exp()]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn color(&self, i: usize) -> Vec3 {
        let c = &self.color_logits[3 * i..3 * i + 3];
        [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Checks buffer lengths and finiteness; reports the first offender.
    pub fn validate(&self) -> Result<(), GaussianError> {
        let k = self.len();
        for (name, (g, w)) in GROUP_NAMES.iter().zip(self.groups().iter().zip(self.row_widths())) {
            if g.len() != k * w {
                return Err(GaussianError::Shape(format!("{name} buffer has {} values for {k} Gaussians", g.len())));
            }
        }
        for (name, (g, w)) in GROUP_NAMES.iter().zip(self.groups().iter().zip(self.row_widths())) {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(GaussianError::NonFinite { index: pos / w.max(1), field: name });
            }
        }
        Ok(())
    }

    /// Builds a new cloud whose row `r` copies row `rows[r]` of `self`.
    pub fn gather(&self, rows: &[usize]) -> GaussianCloud {
        let mut out = GaussianCloud::zeros(0, self.feature_dim);
        let widths = self.row_widths();
        for (dst, (src, w)) in out.groups_mut().into_iter().zip(self.groups().into_iter().zip(widths)) {
            dst.reserve(rows.len() * w);
            for &r in rows {
                dst.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        out
    }

    /// Radius of the smallest centroid-centred ball holding every position.
    pub fn extent(&self) -> f64 {
        let k = self.len();
        if k == 0 {
            return 0.0;
        }
        let mut c = [0.0; 3];
        for i in 0..k {
            let p = self.position(i);
            for a in 0..3 {
                c[a] += p[a] / k as f64;
            }
        }
        (0..k)
            .map(|i| {
                let p = self.position(i);
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Axis-aligned bounds of the positions.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.len() {
            let p = self.position(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// `R(q̂)·diag(s)²·R(q̂)ᵀ`.
pub fn compose_covariance(q: &[f64; 4], s: &Vec3) -> Result<Mat3, GaussianError> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(norm >= 1e-12) {
        return Err(GaussianError::DegenerateRotation(norm));
    }
    let r = quat_to_rotation(&[q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    Ok(mat3_mul(&m, &transpose3(&m)))
}

/// Pulls `dL/dΣ` back to the raw quaternion and the (linear) scales.
pub fn compose_covariance_backward(q: &[f64; 4], s: &Vec3, d_sigma: &Mat3) -> ([f64; 4], Vec3) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let qh = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let r = quat_to_rotation(&qh);
    let mut m = r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    // Σ = M Mᵀ  ⇒  dM = (G + Gᵀ) M
    let mut gs = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gs[i][j] = d_sigma[i][j] + d_sigma[j][i];
        }
    }
    let dm = mat3_mul(&gs, &m);
    let mut dr = [[0.0; 3]; 3];
    let mut ds = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            dr[i][j] = dm[i][j] * s[j];
            ds[j] += dm[i][j] * r[i][j];
        }
    }
    let dqh = quat_to_rotation_backward(&qh, &dr);
    (normalize_backward(q, norm, &dqh), ds)
}

const COV_REGULARIZER: f64 = 1e-9;

/// Unnormalized Gaussian density `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn evaluate_gaussian(x: &Vec3, mu: &Vec3, sigma: &Mat3) -> Result<f64, GaussianError> {
    let mut reg = *sigma;
    for (i, row) in reg.iter_mut().enumerate() {
        row[i] += COV_REGULARIZER;
    }
    let l = cholesky3(&reg).ok_or(GaussianError::SingularCovariance)?;
    let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
    let y = cholesky_solve3(&l, &d);
    let q = d[0] * y[0] + d[1] * y[1] + d[2] * y[2];
    if !q.is_finite() {
        return Err(GaussianError::SingularCovariance);
    }
    Ok((-0.5 * q).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    pub target_count: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub initial_opacity: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            target_count: 90_000,
            feature_dim: 128,
            seed: 0,
            initial_opacity: 0.1,
        }
    }
}

const COLOR_CLAMP: f64 = 1e-3;
const FALLBACK_SCALE: f64 = 0.01;

/// Back-projects every masked pixel with positive depth of every frame,
/// subsamples the union uniformly to `target_count`, and seeds colors,
/// scales and opacities from it. Features start at zero.
pub fn init_from_rgbd(frames: &[CameraFrame], opts: &InitOptions) -> Result<GaussianCloud, GaussianError> {
    if opts.target_count == 0 {
        return Err(GaussianError::Shape("target_count must be positive".into()));
    }
    let mut points: Vec<Vec3> = Vec::new();
    let mut colors: Vec<Vec3> = Vec::new();
    for frame in frames {
        frame.validate()?;
        let c2w = frame.camera.camera_to_world();
        let (w, h) = (frame.width(), frame.height());
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                let d = frame.depth[p];
                if !frame.mask[p] || d <= 0.0 {
                    continue;
                }
                let cam = frame.camera.intrinsics.backproject(u as f64, v as f64, d);
                points.push(transform_point(&c2w, &cam));
                colors.push([frame.image[3 * p], frame.image[3 * p + 1], frame.image[3 * p + 2]]);
            }
        }
    }
    if points.is_empty() {
        return Err(GaussianError::EmptyInit);
    }
    let mut rng = Pcg64::seed_from_u64(opts.seed);
    let chosen: Vec<usize> = if points.len() > opts.target_count {
        let mut idx = index::sample(&mut rng, points.len(), opts.target_count).into_vec();
        idx.sort_unstable();
        idx
    } else {
        if points.len() < opts.target_count {
            log::info!("initialization found {} points, fewer than the requested {}", points.len(), opts.target_count);
        }
        (0..points.len()).collect()
    };
    let pts: Vec<Vec3> = chosen.iter().map(|&i| points[i]).collect();
    let dists = mean_neighbor_distance(&pts, 3);
    let k = pts.len();
    let mut cloud = GaussianCloud::zeros(k, opts.feature_dim);
    let o_logit = logit(opts.initial_opacity);
    for (r, &src) in chosen.iter().enumerate() {
        cloud.positions[3 * r..3 * r + 3].copy_from_slice(&pts[r]);
        cloud.rotations[4 * r] = 1.0;
        let ls = dists[r].map_or(FALLBACK_SCALE, |d| d.max(1e-7)).ln();
        cloud.log_scales[3 * r..3 * r + 3].fill(ls);
        cloud.opacity_logits[r] = o_logit;
        for c in 0..3 {
            cloud.color_logits[3 * r + c] = logit(colors[src][c].clamp(COLOR_CLAMP, 1.0 - COLOR_CLAMP));
        }
    }
    Ok(cloud)
}

/// Mean Euclidean distance from each point to its `k` nearest other points,
/// found with a uniform hash grid. `None` when the cloud has fewer than two
/// points.
pub fn mean_neighbor_distance(points: &[Vec3], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 {
        return vec![None; n];
    }
    let k = k.min(n - 1);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    ext.sort_by(|a, b| b.total_cmp(a));
    // Depth-derived clouds are close to surfaces, so size cells from the
    // two dominant extents.
    let area = (ext[0] * ext[1]).max(ext[0] * ext[0] * 1e-6);
    let mut cell = (area / n as f64).sqrt() * 2.0;
    if !(cell > 0.0 && cell.is_finite()) {
        cell = 1.0;
    }
    let key = |p: &Vec3| {
        [
            ((p[0] - lo[0]) / cell).floor() as i64,
            ((p[1] - lo[1]) / cell).floor() as i64,
            ((p[2] - lo[2]) / cell).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = (0..3).map(|a| ((hi[a] - lo[a]) / cell).ceil() as i64 + 1).max().unwrap_or(1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for ring in 0..=max_ring {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                                continue;
                            };
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let q = &points[j];
                                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                                if best.len() < k || d2 < best[k - 1] {
                                    let at = best.partition_point(|&b| b <= d2);
                                    best.insert(at, d2);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // Unvisited points lie farther than `ring · cell` away.
                let reach = ring as f64 * cell;
                if best.len() == k && best[k - 1] <= reach * reach {
                    break;
                }
            }
            Some(best.iter().map(|d| d.sqrt()).sum::<f64>() / best.len() as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Mean view-space positional gradient above which a Gaussian is
    /// densified (NDC-scaled units).
    pub densify_grad_threshold: f64,
    /// Fraction of the scene extent separating clone (small) from split.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub split_children: usize,
    pub prune_opacity: f64,
    /// Densification is skipped once the cloud would exceed this size.
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            densify_grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            split_children: 2,
            prune_opacity: 0.005,
            max_gaussians: usize::MAX,
        }
    }
}

/// Accumulated screen-space positional gradient norms since the last
/// density-control step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(len: usize) -> Self {
        Self {
            accum: vec![0.0; len],
            count: vec![0; len],
        }
    }

    /// Adds one observation per Gaussian that was visible (`Some`).
    pub fn record(&mut self, norms: &[Option<f64>]) {
        for (i, n) in norms.iter().enumerate() {
            if let Some(n) = n {
                self.accum[i] += n;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityOutcome {
    /// For each output row, the input row it carries over unchanged, or
    /// `None` for a newly created Gaussian.
    pub origins: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small high-gradient Gaussians, splits large ones, then prunes
/// low-opacity rows. Survivors keep their order and values; new rows are
/// appended.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &GradStats,
    scene_extent: f64,
    cfg: &DensityConfig,
    seed: u64,
    iteration: u64,
) -> DensityOutcome {
    let k = cloud.len();
    let size_limit = cfg.percent_dense * scene_extent;
    let mut clone_rows = Vec::new();
    let mut split_rows = Vec::new();
    for i in 0..k {
        if stats.count.get(i).copied().unwrap_or(0) == 0 || stats.mean(i) < cfg.densify_grad_threshold {
            continue;
        }
        let s = cloud.scale(i);
        if s[0].max(s[1]).max(s[2]) <= size_limit {
            clone_rows.push(i);
        } else {
            split_rows.push(i);
        }
    }
    let growth = clone_rows.len() + split_rows.len() * cfg.split_children.saturating_sub(1);
    if k + growth > cfg.max_gaussians {
        clone_rows.clear();
        split_rows.clear();
    }

    let mut rng = Pcg64::seed_from_u64(seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut is_split = vec![false; k];
    for &i in &split_rows {
        is_split[i] = true;
    }
    let mut origins: Vec<Option<usize>> = (0..k).filter(|&i| !is_split[i]).map(Some).collect();
    let mut out = cloud.gather(&origins.iter().map(|o| o.unwrap()).collect::<Vec<_>>());
    let appended = cloud.gather(&clone_rows);
    for (dst, src) in out.groups_mut().into_iter().zip(appended.groups()) {
        dst.extend_from_slice(src);
    }
    origins.extend(std::iter::repeat_n(None, clone_rows.len()));

    let shrink = cfg.split_factor.ln();
    for &i in &split_rows {
        let q = cloud.quaternion(i);
        let norm = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let r = quat_to_rotation(&[q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
        let s = cloud.scale(i);
        let mu = cloud.position(i);
        for _ in 0..cfg.split_children {
            let e: [f64; 3] = std::array::from_fn(|a| { let n: f64 = StandardNormal.sample(&mut rng); s[a] * n });
            let mut child = cloud.gather(&[i]);
            for a in 0..3 {
                child.positions[a] = mu[a] + r[a][0] * e[0] + r[a][1] * e[1] + r[a][2] * e[2];
                child.log_scales[a] -= shrink;
            }
            for (dst, src) in out.groups_mut().into_iter().zip(child.groups()) {
                dst.extend_from_slice(src);
            }
            origins.push(None);
        }
    }

    let keep: Vec<usize> = (0..out.len()).filter(|&r| out.opacity(r) >= cfg.prune_opacity).collect();
    let pruned = out.len() - keep.len();
    if pruned > 0 {
        out = out.gather(&keep);
        origins = keep.iter().map(|&r| origins[r]).collect();
    }
    *cloud = out;
    DensityOutcome {
        origins,
        cloned: clone_rows.len(),
        split: split_rows.len(),
        pruned,
    }
}

/// Caps every opacity at `cap`; rows already at or below it are untouched.
/// Returns the indices that changed.
pub fn reset_opacity(cloud: &mut GaussianCloud, cap: f64) -> Vec<usize> {
    let capped = logit(cap);
    let mut changed = Vec::new();
    for (i, l) in cloud.opacity_logits.iter_mut().enumerate() {
        if sigmoid(*l) > cap {
            *l = capped;
            changed.push(i);
        }
    }
    changed
}
