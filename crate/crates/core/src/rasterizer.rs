//! Tile-based differentiable rasterizer.
//!
//! Gaussians are projected with the local affine (EWA) approximation, sorted
//! once by view depth (stable, ties by source index), binned into square
//! tiles, and composited front to back per pixel. Color, view depth and the
//! `N` feature channels share one traversal and one set of weights.
//!
//! Pixel centres sit at integer coordinates. A Gaussian touches a pixel only
//! where its Mahalanobis distance is within `radius_sigmas`; the tile test
//! uses the bounding disc of that ellipse, so tiling never changes results.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussians::{compose_covariance, compose_covariance_backward, Camera, GaussianCloud, GaussianError};
use crate::linalg::{mat3_mul, mat3_vec, rotation_block, transform_point, transpose3, Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("non-finite {field} on Gaussian {index}")]
    NonFinite { index: usize, field: &'static str },
    #[error("degenerate rotation on Gaussian {index}")]
    DegenerateRotation { index: usize },
    #[error("render record does not match the inputs (stale record)")]
    StaleRecord,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Camera(#[from] GaussianError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Added to the diagonal of every screen-space covariance (px²).
    pub lowpass: f64,
    pub alpha_max: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_min: f64,
    pub z_near: f64,
    /// Support of each splat in standard deviations.
    pub radius_sigmas: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            lowpass: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            z_near: 0.01,
            radius_sigmas: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// Screen covariance `(a, b, c)` for `[[a, b], [b, c]]`, low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [f64; 3],
    pub view_depth: f64,
    pub radius: f64,
    pub color: Vec3,
    pub opacity: f64,
    pub source: usize,
    /// Camera-space mean.
    pub cam: Vec3,
}

/// Projects every Gaussian in front of the near plane whose support
/// reaches the image. Output is in source order.
pub fn project(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<Vec<ProjectedGaussian>, RenderError> {
    camera.validate()?;
    cloud.validate().map_err(|e| match e {
        GaussianError::NonFinite { index, field } => RenderError::NonFinite { index, field },
        other => RenderError::Shape(other.to_string()),
    })?;
    let w2c = &camera.world_to_camera;
    let rot = rotation_block(w2c);
    let k = &camera.intrinsics;
    let (wf, hf) = (camera.width as f64, camera.height as f64);
    let results: Vec<Result<Option<ProjectedGaussian>, RenderError>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let t = transform_point(w2c, &cloud.position(i));
            if t[2] <= settings.z_near {
                return Ok(None);
            }
            let sigma = compose_covariance(&cloud.quaternion(i), &cloud.scale(i))
                .map_err(|_| RenderError::DegenerateRotation { index: i })?;
            let j = jacobian(k.fx, k.fy, &t);
            let m = mat3_mul(&mat3_mul(&rot, &sigma), &transpose3(&rot));
            let cov = project_cov(&j, &m);
            let (a, b, c) = (cov[0] + settings.lowpass, cov[1], cov[2] + settings.lowpass);
            let det = a * c - b * b;
            if !(det > 0.0) {
                return Ok(None);
            }
            let mid = 0.5 * (a + c);
            let lambda = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let radius = (settings.radius_sigmas * lambda.sqrt()).ceil();
            let mean2d = [k.fx * t[0] / t[2] + k.cx, k.fy * t[1] / t[2] + k.cy];
            if mean2d[0] + radius < 0.0
                || mean2d[0] - radius > wf - 1.0
                || mean2d[1] + radius < 0.0
                || mean2d[1] - radius > hf - 1.0
                || radius < 1.0
            {
                return Ok(None);
            }
            Ok(Some(ProjectedGaussian {
                mean2d,
                cov2d: [a, b, c],
                conic: [c / det, -b / det, a / det],
                view_depth: t[2],
                radius,
                color: cloud.color(i),
                opacity: cloud.opacity(i),
                source: i,
                cam: t,
            }))
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(p) = r? {
            out.push(p);
        }
    }
    Ok(out)
}

fn jacobian(fx: f64, fy: f64, t: &Vec3) -> [[f64; 3]; 2] {
    let iz = 1.0 / t[2];
    [[fx * iz, 0.0, -fx * t[0] * iz * iz], [0.0, fy * iz, -fy * t[1] * iz * iz]]
}

/// `(J M Jᵀ)` packed as `(a, b, c)`.
fn project_cov(j: &[[f64; 3]; 2], m: &Mat3) -> [f64; 3] {
    let jm: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| j[r][k] * m[k][c]).sum()));
    let e = |r: usize, c: usize| (0..3).map(|k| jm[r][k] * j[c][k]).sum::<f64>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// Stable depth order (ties by source index).
pub fn depth_sort(mut projected: Vec<ProjectedGaussian>) -> Vec<ProjectedGaussian> {
    projected.sort_by(|a, b| a.view_depth.total_cmp(&b.view_depth).then(a.source.cmp(&b.source)));
    projected
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub tile: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile: usize) -> Self {
        let tile = tile.max(1);
        Self {
            tile,
            tiles_x: width.div_ceil(tile),
            tiles_y: height.div_ceil(tile),
            width,
            height,
        }
    }

    pub fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel bounds `(x0, x1, y0, y1)`, end-exclusive.
    pub fn bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (x0, (x0 + self.tile).min(self.width), y0, (y0 + self.tile).min(self.height))
    }
}

/// For each tile, indices into `projected` (kept in input order) of the
/// splats whose support disc overlaps the tile's pixel centres.
pub fn bin_tiles(projected: &[ProjectedGaussian], width: usize, height: usize, tile: usize) -> Vec<Vec<u32>> {
    let grid = TileGrid::new(width, height, tile);
    let mut lists = vec![Vec::new(); grid.count()];
    for (idx, p) in projected.iter().enumerate() {
        let [mx, my] = p.mean2d;
        let r = p.radius;
        let clamp_px = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
        let (px0, px1) = (clamp_px((mx - r).ceil(), width), clamp_px((mx + r).floor(), width));
        let (py0, py1) = (clamp_px((my - r).ceil(), height), clamp_px((my + r).floor(), height));
        if (mx + r) < 0.0 || (my + r) < 0.0 {
            continue;
        }
        for ty in py0 / grid.tile..=py1 / grid.tile {
            for tx in px0 / grid.tile..=px1 / grid.tile {
                let t = ty * grid.tiles_x + tx;
                let (x0, x1, y0, y1) = grid.bounds(t);
                let cx = mx.clamp(x0 as f64, (x1 - 1) as f64);
                let cy = my.clamp(y0 as f64, (y1 - 1) as f64);
                if (cx - mx).powi(2) + (cy - my).powi(2) <= r * r {
                    lists[t].push(idx as u32);
                }
            }
        }
    }
    lists
}

#[derive(Clone, Debug)]
struct TileRecord {
    /// Per tile pixel (row-major within the tile), start offset into
    /// `entries`; one extra trailing offset.
    starts: Vec<u32>,
    /// `(index into the sorted projection list, alpha)`.
    entries: Vec<(u32, f64)>,
    final_t: Vec<f64>,
}

/// Compositing state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderRecord {
    /// Depth-sorted projected splats.
    pub projected: Vec<ProjectedGaussian>,
    tiles: Vec<TileRecord>,
    tile_lists: Vec<Vec<u32>>,
    grid: TileGrid,
    fingerprint: u64,
}

impl RenderRecord {
    /// Number of composited contributions at pixel `(x, y)`.
    pub fn contributions(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let (t, local) = self.locate(x, y);
        let rec = &self.tiles[t];
        rec.entries[rec.starts[local] as usize..rec.starts[local + 1] as usize]
            .iter()
            .map(|&(j, a)| (self.projected[j as usize].source, a))
            .collect()
    }

    /// Transmittance left after compositing pixel `(x, y)`.
    pub fn final_transmittance(&self, x: usize, y: usize) -> f64 {
        let (t, local) = self.locate(x, y);
        self.tiles[t].final_t[local]
    }

    pub fn tile_lists(&self) -> &[Vec<u32>] {
        &self.tile_lists
    }

    fn locate(&self, x: usize, y: usize) -> (usize, usize) {
        let g = &self.grid;
        let t = (y / g.tile) * g.tiles_x + x / g.tile;
        let (x0, x1, y0, _) = g.bounds(t);
        (t, (y - y0) * (x1 - x0) + (x - x0))
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// `H × W × 3`
    pub color: Vec<f64>,
    /// `H × W`
    pub depth: Vec<f64>,
    /// `H × W × N`
    pub feature: Vec<f64>,
    /// `H × W`, `1 − final transmittance`.
    pub alpha: Vec<f64>,
    pub record: RenderRecord,
}

fn fingerprint(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> u64 {
    let mut h = DefaultHasher::new();
    for g in cloud.groups() {
        g.len().hash(&mut h);
        for v in g {
            v.to_bits().hash(&mut h);
        }
    }
    cloud.feature_dim.hash(&mut h);
    let k = &camera.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy].iter().chain(camera.world_to_camera.iter().flatten()) {
        v.to_bits().hash(&mut h);
    }
    (camera.width, camera.height).hash(&mut h);
    for v in settings
        .background
        .iter()
        .chain(&[settings.lowpass, settings.alpha_max, settings.alpha_min, settings.transmittance_min])
        .chain(&[settings.z_near, settings.radius_sigmas])
    {
        v.to_bits().hash(&mut h);
    }
    settings.tile_size.hash(&mut h);
    h.finish()
}

struct TileOut {
    color: Vec<f64>,
    depth: Vec<f64>,
    feature: Vec<f64>,
    record: TileRecord,
}

#[inline]
fn splat_alpha(p: &ProjectedGaussian, x: f64, y: f64, cutoff: f64, settings: &RenderSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = x - p.mean2d[0];
    let dy = y - p.mean2d[1];
    let [a, b, c] = p.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(q <= cutoff) {
        return None;
    }
    let g = (-0.5 * q).exp();
    let alpha = (p.opacity * g).min(settings.alpha_max);
    if alpha < settings.alpha_min {
        return None;
    }
    Some((alpha, g, dx, dy))
}

/// Renders color, depth, features and alpha for `camera`.
pub fn render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput, RenderError> {
    let projected = depth_sort(project(cloud, camera, settings)?);
    let (w, h) = (camera.width, camera.height);
    let n = cloud.feature_dim;
    let grid = TileGrid::new(w, h, settings.tile_size);
    let lists = bin_tiles(&projected, w, h, grid.tile);
    let cutoff = settings.radius_sigmas * settings.radius_sigmas;
    let tiles: Vec<TileOut> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t);
            let npx = (x1 - x0) * (y1 - y0);
            let mut out = TileOut {
                color: vec![0.0; 3 * npx],
                depth: vec![0.0; npx],
                feature: vec![0.0; n * npx],
                record: TileRecord {
                    starts: Vec::with_capacity(npx + 1),
                    entries: Vec::new(),
                    final_t: vec![1.0; npx],
                },
            };
            let list = &lists[t];
            let mut local = 0;
            for py in y0..y1 {
                for px in x0..x1 {
                    out.record.starts.push(out.record.entries.len() as u32);
                    let mut trans = 1.0;
                    let col = &mut out.color[3 * local..3 * local + 3];
                    let feat = &mut out.feature[n * local..n * (local + 1)];
                    let mut depth = 0.0;
                    for &j in list {
                        let p = &projected[j as usize];
                        let Some((alpha, ..)) = splat_alpha(p, px as f64, py as f64, cutoff, settings) else {
                            continue;
                        };
                        let wgt = alpha * trans;
                        for ch in 0..3 {
                            col[ch] += wgt * p.color[ch];
                        }
                        depth += wgt * p.view_depth;
                        let z = cloud.feature(p.source);
                        for (f, zv) in feat.iter_mut().zip(z) {
                            *f += wgt * zv;
                        }
                        out.record.entries.push((j, alpha));
                        trans *= 1.0 - alpha;
                        if trans < settings.transmittance_min {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        col[ch] += trans * settings.background[ch];
                    }
                    out.depth[local] = depth;
                    out.record.final_t[local] = trans;
                    local += 1;
                }
            }
            out.record.starts.push(out.record.entries.len() as u32);
            out
        })
        .collect();

    let mut color = vec![0.0; 3 * w * h];
    let mut depth = vec![0.0; w * h];
    let mut feature = vec![0.0; n * w * h];
    let mut alpha = vec![0.0; w * h];
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.bounds(t);
        let mut local = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let p = py * w + px;
                color[3 * p..3 * p + 3].copy_from_slice(&tile.color[3 * local..3 * local + 3]);
                depth[p] = tile.depth[local];
                feature[n * p..n * (p + 1)].copy_from_slice(&tile.feature[n * local..n * (local + 1)]);
                alpha[p] = 1.0 - tile.record.final_t[local];
                local += 1;
            }
        }
    }
    Ok(RenderOutput {
        width: w,
        height: h,
        feature_dim: n,
        color,
        depth,
        feature,
        alpha,
        record: RenderRecord {
            projected,
            tiles: tiles.into_iter().map(|t| t.record).collect(),
            tile_lists: lists,
            grid,
            fingerprint: fingerprint(cloud, camera, settings),
        },
    })
}

/// Upstream gradients of a scalar loss with respect to the render outputs;
/// `None` means zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderCotangents<'a> {
    pub color: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
    pub feature: Option<&'a [f64]>,
    pub alpha: Option<&'a [f64]>,
}

#[derive(Clone, Debug)]
pub struct RenderGradients {
    /// Gradients of the raw snapshot parameters.
    pub cloud: GaussianCloud,
    /// Screen-space positional gradient norm per source Gaussian, scaled to
    /// normalized device units; `None` for Gaussians that were not
    /// projected.
    pub view_space_norms: Vec<Option<f64>>,
}

/// Gradients of one projected splat, accumulated over pixels.
#[derive(Clone, Debug)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: Vec3,
    depth: f64,
}

impl SplatGrad {
    fn zero() -> Self {
        Self {
            mean2d: [0.0; 2],
            conic: [0.0; 3],
            opacity: 0.0,
            color: [0.0; 3],
            depth: 0.0,
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn check_len(name: &str, v: Option<&[f64]>, expect: usize) -> Result<(), RenderError> {
    match v {
        Some(s) if s.len() != expect => {
            Err(RenderError::Shape(format!("{name} gradient has {} values, expected {expect}", s.len())))
        }
        _ => Ok(()),
    }
}

/// Exact gradients of a scalar loss through compositing, projection,
/// covariance composition and the parameter activations.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    out: &RenderOutput,
    cot: RenderCotangents<'_>,
) -> Result<RenderGradients, RenderError> {
    if fingerprint(cloud, camera, settings) != out.record.fingerprint {
        return Err(RenderError::StaleRecord);
    }
    let (w, h) = (out.width, out.height);
    let n = out.feature_dim;
    check_len("color", cot.color, 3 * w * h)?;
    check_len("depth", cot.depth, w * h)?;
    check_len("feature", cot.feature, n * w * h)?;
    check_len("alpha", cot.alpha, w * h)?;
    let rec = &out.record;
    let projected = &rec.projected;
    let grid = rec.grid;
    let cutoff = settings.radius_sigmas * settings.radius_sigmas;
    let bg = settings.background;

    // Per-tile partial gradients, keyed by position in the tile list.
    let partials: Vec<(Vec<SplatGrad>, Vec<f64>)> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let list = &rec.tile_lists[t];
            let tr = &rec.tiles[t];
            let mut grads = vec![SplatGrad::zero(); list.len()];
            let mut fgrads = vec![0.0; list.len() * n];
            let (x0, x1, y0, y1) = grid.bounds(t);
            let mut trans_buf = Vec::new();
            let mut local = 0;
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = py * w + px;
                    let entries = &tr.entries[tr.starts[local] as usize..tr.starts[local + 1] as usize];
                    let t_final = tr.final_t[local];
                    local += 1;
                    let gc = cot.color.map_or([0.0; 3], |c| [c[3 * p], c[3 * p + 1], c[3 * p + 2]]);
                    let gd = cot.depth.map_or(0.0, |d| d[p]);
                    let ga = cot.alpha.map_or(0.0, |a| a[p]);
                    let gf = cot.feature.map(|f| &f[n * p..n * (p + 1)]);
                    if entries.is_empty() || (gc == [0.0; 3] && gd == 0.0 && ga == 0.0 && gf.is_none_or(|f| f.iter().all(|&v| v == 0.0))) {
                        continue;
                    }
                    trans_buf.clear();
                    let mut trans = 1.0;
                    for &(_, alpha) in entries {
                        trans_buf.push(trans);
                        trans *= 1.0 - alpha;
                    }
                    let mut suffix = t_final * (gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2]);
                    for (e, &(j, alpha)) in entries.iter().enumerate().rev() {
                        let sp = &projected[j as usize];
                        let ti = trans_buf[e];
                        let wgt = alpha * ti;
                        let z = cloud.feature(sp.source);
                        let mut gv = gc[0] * sp.color[0] + gc[1] * sp.color[1] + gc[2] * sp.color[2] + gd * sp.view_depth;
                        let pos = list.binary_search(&j).expect("entry comes from this tile's list");
                        if let Some(gf) = gf {
                            let fg = &mut fgrads[pos * n..(pos + 1) * n];
                            for ((acc, &g), &zv) in fg.iter_mut().zip(gf).zip(z) {
                                gv += g * zv;
                                *acc += wgt * g;
                            }
                        }
                        let one_minus = 1.0 - alpha;
                        let d_alpha = ti * gv - suffix / one_minus + ga * t_final / one_minus;
                        suffix += wgt * gv;
                        let sg = &mut grads[pos];
                        for ch in 0..3 {
                            sg.color[ch] += wgt * gc[ch];
                        }
                        sg.depth += wgt * gd;
                        let (_, g, dx, dy) = splat_alpha(sp, px as f64, py as f64, cutoff, settings)
                            .expect("recorded contribution re-evaluates");
                        if sp.opacity * g > settings.alpha_max {
                            continue;
                        }
                        sg.opacity += d_alpha * g;
                        let d_q = -0.5 * alpha * d_alpha;
                        let [a, b, c] = sp.conic;
                        sg.conic[0] += d_q * dx * dx;
                        sg.conic[1] += d_q * 2.0 * dx * dy;
                        sg.conic[2] += d_q * dy * dy;
                        sg.mean2d[0] -= d_q * (2.0 * a * dx + 2.0 * b * dy);
                        sg.mean2d[1] -= d_q * (2.0 * b * dx + 2.0 * c * dy);
                    }
                }
            }
            (grads, fgrads)
        })
        .collect();

    let mut splat = vec![SplatGrad::zero(); projected.len()];
    let mut feat_grad = vec![0.0; projected.len() * n];
    for (t, (grads, fgrads)) in partials.iter().enumerate() {
        for (pos, &j) in rec.tile_lists[t].iter().enumerate() {
            let j = j as usize;
            splat[j].add(&grads[pos]);
            for (a, b) in feat_grad[j * n..(j + 1) * n].iter_mut().zip(&fgrads[pos * n..(pos + 1) * n]) {
                *a += b;
            }
        }
    }

    let rot = rotation_block(&camera.world_to_camera);
    let rot_t = transpose3(&rot);
    let k = &camera.intrinsics;
    let rows: Vec<(usize, [f64; 15], f64)> = projected
        .par_iter()
        .zip(splat.par_iter())
        .map(|(sp, sg)| {
            let i = sp.source;
            let [a, b, c] = sp.cov2d;
            let det = a * c - b * b;
            let det2 = det * det;
            let [ga, gb, gc] = sg.conic;
            let d_a = -ga * c * c / det2 + gb * b * c / det2 - gc * b * b / det2;
            let d_b = ga * 2.0 * b * c / det2 + gb * (-1.0 / det - 2.0 * b * b / det2) + gc * 2.0 * a * b / det2;
            let d_c = -ga * b * b / det2 + gb * a * b / det2 - gc * a * a / det2;
            let g2 = [[d_a, 0.5 * d_b], [0.5 * d_b, d_c]];

            let t = sp.cam;
            let q = cloud.quaternion(i);
            let s = cloud.scale(i);
            let sigma = compose_covariance(&q, &s).expect("validated during projection");
            let m = mat3_mul(&mat3_mul(&rot, &sigma), &rot_t);
            let j = jacobian(k.fx, k.fy, &t);
            // dL/dM = Jᵀ G J
            let gj: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|col| g2[r][0] * j[0][col] + g2[r][1] * j[1][col]));
            let d_m: Mat3 = std::array::from_fn(|r| std::array::from_fn(|col| j[0][r] * gj[0][col] + j[1][r] * gj[1][col]));
            // dL/dJ = 2 G J M
            let d_j: [[f64; 3]; 2] =
                std::array::from_fn(|r| std::array::from_fn(|col| 2.0 * (0..3).map(|kk| gj[r][kk] * m[kk][col]).sum::<f64>()));
            let d_sigma = mat3_mul(&mat3_mul(&rot_t, &d_m), &rot);

            let (x, y, z) = (t[0], t[1], t[2]);
            let iz = 1.0 / z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut d_t = [0.0; 3];
            d_t[0] += d_j[0][2] * (-k.fx * iz2);
            d_t[1] += d_j[1][2] * (-k.fy * iz2);
            d_t[2] += d_j[0][0] * (-k.fx * iz2)
                + d_j[0][2] * (2.0 * k.fx * x * iz3)
                + d_j[1][1] * (-k.fy * iz2)
                + d_j[1][2] * (2.0 * k.fy * y * iz3);
            let [gmx, gmy] = sg.mean2d;
            d_t[0] += gmx * k.fx * iz;
            d_t[1] += gmy * k.fy * iz;
            d_t[2] += -gmx * k.fx * x * iz2 - gmy * k.fy * y * iz2 + sg.depth;
            let d_mu = mat3_vec(&rot_t, &d_t);

            let (d_q, d_s) = compose_covariance_backward(&q, &s, &d_sigma);
            let o = sp.opacity;
            let mut row = [0.0; 15];
            row[..3].copy_from_slice(&d_mu);
            row[3..7].copy_from_slice(&d_q);
            for ax in 0..3 {
                row[7 + ax] = d_s[ax] * s[ax];
                row[11 + ax] = sg.color[ax] * sp.color[ax] * (1.0 - sp.color[ax]);
            }
            row[10] = sg.opacity * o * (1.0 - o);
            let norm = ((gmx * 0.5 * w as f64).powi(2) + (gmy * 0.5 * h as f64).powi(2)).sqrt();
            (i, row, norm)
        })
        .collect();

    let mut grads = GaussianCloud::zeros(cloud.len(), n);
    let mut norms = vec![None; cloud.len()];
    for (jdx, (i, row, norm)) in rows.into_iter().enumerate() {
        grads.positions[3 * i..3 * i + 3].copy_from_slice(&row[..3]);
        grads.rotations[4 * i..4 * i + 4].copy_from_slice(&row[3..7]);
        grads.log_scales[3 * i..3 * i + 3].copy_from_slice(&row[7..10]);
        grads.opacity_logits[i] = row[10];
        grads.color_logits[3 * i..3 * i + 3].copy_from_slice(&row[11..14]);
        grads.features[n * i..n * (i + 1)].copy_from_slice(&feat_grad[jdx * n..(jdx + 1) * n]);
        norms[i] = Some(norm);
    }
    Ok(RenderGradients {
        cloud: grads,
        view_space_norms: norms,
    })
}
