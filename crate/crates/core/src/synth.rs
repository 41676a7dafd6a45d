//! Scripted synthetic scenes rendered with the engine's own rasterizer.
//!
//! A scene is an opaque textured backdrop plane facing an identity camera
//! plus `blobs` compact Gaussian clusters, each moving rigidly (sinusoidal
//! translation and a spin about the viewing axis). Blob `i` carries class
//! id `i + 1`; the backdrop is class 0. Teacher features give every class a
//! fixed unit-norm Hadamard row over the teacher channels, composited with
//! the same weights as color and then averaged down by `feature_downsample`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_dataset, DatasetError};
use crate::gaussians::{Camera, CameraFrame, GaussianCloud, Intrinsics};
use crate::linalg::{logit, IDENTITY4};
use crate::rasterizer::{render, RenderError, RenderSettings};
use crate::semantic::{resize_bilinear, FeatureMap, LabelMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic scene parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub blobs: usize,
    /// Power of two, at least `blobs + 2`.
    pub teacher_channels: usize,
    /// Peak translation per axis, world units.
    pub motion_amplitude: f64,
    /// Total spin over the sequence, radians.
    pub spin: f64,
    pub feature_downsample: usize,
    pub backdrop_depth: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 64,
            height: 64,
            frames: 20,
            blobs: 3,
            teacher_channels: 8,
            motion_amplitude: 0.2,
            spin: 0.8,
            feature_downsample: 2,
            backdrop_depth: 4.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Params(m.into()));
        if self.width < 4 || self.height < 4 || self.frames == 0 {
            return bad("resolution must be at least 4×4 with one or more frames");
        }
        if !self.teacher_channels.is_power_of_two() || self.teacher_channels < self.blobs + 2 {
            return bad("teacher_channels must be a power of two of at least blobs + 2");
        }
        if self.feature_downsample == 0
            || self.width % self.feature_downsample != 0
            || self.height % self.feature_downsample != 0
        {
            return bad("feature_downsample must divide the resolution");
        }
        if !(self.motion_amplitude >= 0.0 && self.spin.is_finite() && self.backdrop_depth > 1.0) {
            return bad("motion must be finite and non-negative, backdrop_depth above 1");
        }
        Ok(())
    }
}

/// Satellites per blob (in addition to the stacked core).
const SATELLITES: usize = 4;
/// Coincident copies forming each blob's opaque core.
const CORE_STACK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobScript {
    pub class_id: u32,
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    pub phase: [f64; 3],
    pub frequency: f64,
    pub spin_rate: f64,
    pub scale: [f64; 3],
    pub color: [f64; 3],
}

impl BlobScript {
    pub fn center(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.base[a] + self.amplitude[a] * (2.0 * PI * self.frequency * t + self.phase[a]).sin())
    }

    pub fn angle(&self, t: f64) -> f64 {
        self.spin_rate * t
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub params: SynthParams,
    pub camera: Camera,
    pub blobs: Vec<BlobScript>,
    backdrop: GaussianCloud,
}

/// Row `class + 1` of the Sylvester Hadamard matrix, scaled to unit norm.
pub fn class_pattern(class: u32, channels: usize) -> Vec<f64> {
    let row = class as usize + 1;
    let norm = (channels as f64).sqrt();
    (0..channels)
        .map(|j| if (row & j).count_ones() % 2 == 0 { 1.0 / norm } else { -1.0 / norm })
        .collect()
}

impl SyntheticScene {
    pub fn new(params: SynthParams) -> Result<Self, SynthError> {
        params.validate()?;
        let mut rng = Pcg64::seed_from_u64(params.seed);
        let (w, h) = (params.width as f64, params.height as f64);
        let f = w.max(h);
        let camera = Camera {
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: (w - 1.0) / 2.0,
                cy: (h - 1.0) / 2.0,
            },
            world_to_camera: IDENTITY4,
            width: params.width,
            height: params.height,
        };

        let zb = params.backdrop_depth;
        let half_x = 1.15 * zb * (w / 2.0) / f;
        let half_y = 1.15 * zb * (h / 2.0) / f;
        let cells_x = (params.width / 4).max(4);
        let cells_y = (params.height / 4).max(4);
        let step_x = 2.0 * half_x / (cells_x - 1) as f64;
        let step_y = 2.0 * half_y / (cells_y - 1) as f64;
        let tint: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let mut backdrop = GaussianCloud::zeros(cells_x * cells_y, params.teacher_channels);
        let pattern = class_pattern(0, params.teacher_channels);
        for gy in 0..cells_y {
            for gx in 0..cells_x {
                let i = gy * cells_x + gx;
                let x = -half_x + gx as f64 * step_x;
                let y = -half_y + gy as f64 * step_y;
                backdrop.positions[3 * i..3 * i + 3].copy_from_slice(&[x, y, zb]);
                backdrop.rotations[4 * i] = 1.0;
                let s = [0.8 * step_x, 0.8 * step_y, 0.05 * step_x.min(step_y)];
                for a in 0..3 {
                    backdrop.log_scales[3 * i + a] = s[a].ln();
                }
                backdrop.opacity_logits[i] = logit(0.995);
                for c in 0..3 {
                    let v = 0.5 + 0.3 * (2.3 * x + tint[c]).sin() * (1.9 * y + tint[c + 3]).cos();
                    backdrop.color_logits[3 * i + c] = logit(v);
                }
                backdrop.features[i * params.teacher_channels..(i + 1) * params.teacher_channels]
                    .copy_from_slice(&pattern);
            }
        }

        // Blobs are placed by rejection so their swept footprints never
        // overlap in the image.
        let mut blobs: Vec<BlobScript> = Vec::with_capacity(params.blobs);
        let footprint = |b: &BlobScript| {
            let z = b.base[2] - b.amplitude[2];
            let s = b.scale[0].max(b.scale[1]);
            (f / z) * (2.5 * s + b.amplitude[0].max(b.amplitude[1]))
        };
        for b in 0..params.blobs {
            let mut tries = 0;
            let blob = loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(SynthError::Params(format!("cannot place {} non-overlapping blobs", params.blobs)));
                }
                let z = rng.random_range(0.55 * zb..0.7 * zb);
                let reach_x = 0.6 * z * (w / 2.0) / f;
                let reach_y = 0.6 * z * (h / 2.0) / f;
                let base = [rng.random_range(-reach_x..reach_x), rng.random_range(-reach_y..reach_y), z];
                let amp = params.motion_amplitude;
                let amplitude = [
                    amp * rng.random_range(0.5..1.0),
                    amp * rng.random_range(0.5..1.0),
                    0.5 * amp * rng.random_range(0.0..1.0),
                ];
                let phase = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
                let radius = 0.035 * zb;
                let scale = [
                    radius * rng.random_range(0.8..1.2),
                    radius * rng.random_range(0.6..1.0),
                    radius * 0.8,
                ];
                let hue = b as f64 / params.blobs.max(1) as f64;
                let color = std::array::from_fn(|c| 0.5 + 0.42 * (2.0 * PI * (hue + c as f64 / 3.0)).cos());
                let spin_sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                let candidate = BlobScript {
                    class_id: b as u32 + 1,
                    base,
                    amplitude,
                    phase,
                    frequency: rng.random_range(0.5..1.0),
                    spin_rate: spin_sign * params.spin,
                    scale,
                    color,
                };
                let [u, v] = camera.intrinsics.project(&candidate.base);
                let clear = blobs.iter().all(|o| {
                    let [ou, ov] = camera.intrinsics.project(&o.base);
                    ((u - ou).powi(2) + (v - ov).powi(2)).sqrt() > footprint(o) + footprint(&candidate)
                });
                if clear {
                    break candidate;
                }
            };
            blobs.push(blob);
        }
        Ok(Self {
            params,
            camera,
            blobs,
            backdrop,
        })
    }

    /// Full scripted cloud at time `t`; features hold the class patterns.
    pub fn cloud_at(&self, t: f64) -> GaussianCloud {
        let ct = self.params.teacher_channels;
        let per_blob = CORE_STACK + SATELLITES;
        let mut cloud = self.backdrop.clone();
        let mut extra = GaussianCloud::zeros(self.blobs.len() * per_blob, ct);
        for (b, blob) in self.blobs.iter().enumerate() {
            let c = blob.center(t);
            let theta = blob.angle(t);
            let (sin, cos) = (0.5 * theta).sin_cos();
            let q = [cos, 0.0, 0.0, sin];
            let pattern = class_pattern(blob.class_id, ct);
            for k in 0..per_blob {
                let i = b * per_blob + k;
                let (offset, scale, shade) = if k < CORE_STACK {
                    ([0.0; 2], blob.scale, 1.0)
                } else {
                    let phi = 2.0 * PI * (k - CORE_STACK) as f64 / SATELLITES as f64;
                    let local = [1.1 * blob.scale[0] * phi.cos(), 1.1 * blob.scale[1] * phi.sin()];
                    let s = blob.scale.map(|v| 0.3 * v);
                    (local, s, if k % 2 == 0 { 0.6 } else { 1.25 })
                };
                let (st, ct_) = theta.sin_cos();
                let rotated = [ct_ * offset[0] - st * offset[1], st * offset[0] + ct_ * offset[1]];
                extra.positions[3 * i..3 * i + 3].copy_from_slice(&[c[0] + rotated[0], c[1] + rotated[1], c[2]]);
                extra.rotations[4 * i..4 * i + 4].copy_from_slice(&q);
                for a in 0..3 {
                    extra.log_scales[3 * i + a] = scale[a].ln();
                    extra.color_logits[3 * i + a] = logit((blob.color[a] * shade).clamp(0.03, 0.97));
                }
                extra.opacity_logits[i] = logit(0.995);
                extra.features[i * ct..(i + 1) * ct].copy_from_slice(&pattern);
            }
        }
        for (dst, src) in cloud.groups_mut().into_iter().zip(extra.groups()) {
            dst.extend_from_slice(src);
        }
        cloud
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        if self.params.frames > 1 {
            frame as f64 / (self.params.frames - 1) as f64
        } else {
            0.0
        }
    }

    /// Renders frame `index` with teacher features and labels.
    pub fn frame(&self, index: usize) -> Result<CameraFrame, SynthError> {
        let p = &self.params;
        let t = self.time_of(index);
        let out = render(&self.cloud_at(t), &self.camera, &RenderSettings::default())?;
        let (fh, fw) = (p.height / p.feature_downsample, p.width / p.feature_downsample);
        let ct = p.teacher_channels;
        let teacher = resize_bilinear(&out.feature, p.height, p.width, ct, fh, fw);
        let classes = 1 + self.blobs.len();
        let patterns: Vec<Vec<f64>> = (0..classes as u32).map(|c| class_pattern(c, ct)).collect();
        let labels = teacher
            .chunks_exact(ct)
            .map(|v| {
                let mut best = (f64::NEG_INFINITY, 0u32);
                for (c, pat) in patterns.iter().enumerate() {
                    let w: f64 = v.iter().zip(pat).map(|(a, b)| a * b).sum();
                    if w > best.0 {
                        best = (w, c as u32);
                    }
                }
                best.1
            })
            .collect();
        let features = FeatureMap::from_hwc(&teacher, fh, fw, ct).map_err(|e| SynthError::Params(e.to_string()))?;
        let labels = LabelMap::new(fh, fw, labels).map_err(|e| SynthError::Params(e.to_string()))?;
        Ok(CameraFrame {
            camera: self.camera.clone(),
            time: t,
            image: out.color,
            depth: out.depth,
            mask: vec![true; p.width * p.height],
            features: Some(features),
            labels: Some(labels),
        })
    }

    pub fn frames(&self) -> Result<Vec<CameraFrame>, SynthError> {
        (0..self.params.frames).map(|i| self.frame(i)).collect()
    }
}

/// Generates the scene described by `params` and writes it under `root`.
pub fn synth_generate(params: &SynthParams, root: &Path) -> Result<SyntheticScene, SynthError> {
    let scene = SyntheticScene::new(params.clone())?;
    write_dataset(root, &scene.frames()?)?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            width: 32,
            height: 32,
            frames: 4,
            ..SynthParams::default()
        }
    }

    #[test]
    fn patterns_are_orthonormal() {
        for a in 0..6u32 {
            for b in 0..6u32 {
                let d: f64 = class_pattern(a, 8).iter().zip(class_pattern(b, 8)).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12, "{a} {b} {d}");
            }
        }
    }

    #[test]
    fn zero_motion_frames_are_identical() {
        let scene = SyntheticScene::new(SynthParams {
            motion_amplitude: 0.0,
            spin: 0.0,
            ..small()
        })
        .unwrap();
        let a = scene.frame(0).unwrap();
        let b = scene.frame(3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn blob_centre_depth_matches_script() {
        let scene = SyntheticScene::new(small()).unwrap();
        for i in 0..scene.params.frames {
            let frame = scene.frame(i).unwrap();
            for blob in &scene.blobs {
                let c = blob.center(frame.time);
                let [u, v] = scene.camera.intrinsics.project(&c);
                let (x, y) = (u.round() as usize, v.round() as usize);
                let d = frame.depth[y * scene.params.width + x];
                assert!((d - c[2]).abs() < 1e-3, "frame {i} blob {} depth {d} vs {}", blob.class_id, c[2]);
            }
        }
    }

    #[test]
    fn labels_cover_every_blob() {
        let scene = SyntheticScene::new(small()).unwrap();
        let frame = scene.frame(1).unwrap();
        let labels = frame.labels.unwrap();
        for blob in &scene.blobs {
            assert!(labels.labels.contains(&blob.class_id));
        }
        assert!(labels.labels.contains(&0));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SyntheticScene::new(SynthParams { teacher_channels: 6, ..small() }).is_err());
        assert!(SyntheticScene::new(SynthParams { blobs: 7, ..small() }).is_err());
        assert!(SyntheticScene::new(SynthParams { feature_downsample: 3, ..small() }).is_err());
    }
}
