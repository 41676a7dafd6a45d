//! Central finite-difference checks of the full differentiable pipeline.
//!
//! A seeded five-Gaussian scene is deformed at a fixed time, rendered at
//! 16×16, decoded to teacher space, and reduced to a scalar with fixed
//! random weights on every output plus the grid smoothness term. The
//! analytic gradient of that scalar is compared against central differences
//! for sampled entries of every parameter group.
//!
//! The scene is kept in the smooth regime of the rasterizer: no alpha floor,
//! a wide splat support and low opacities, so no contribution switches on
//! or off inside a finite-difference step.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::Serialize;

use crate::deformation::{deform, deform_backward, DeformationConfig, DeformationNet};
use crate::gaussians::{Camera, GaussianCloud, Intrinsics, GROUP_NAMES};
use crate::hexplane::{HexPlaneConfig, HexPlaneField};
use crate::linalg::{quat_to_rotation, IDENTITY4};
use crate::rasterizer::{render, render_backward, RenderCotangents, RenderSettings};
use crate::semantic::{FeatureMap, PointwiseDecoder};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Entries checked per group (all of them when the group is smaller).
    pub samples_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 5,
            samples_per_group: 24,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// The scene and the fixed output weights defining the scalar under test.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub cloud: GaussianCloud,
    pub field: HexPlaneField,
    pub net: DeformationNet,
    pub decoder: PointwiseDecoder,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub time: f64,
    pub teacher_size: (usize, usize),
    pub tv_weight: f64,
    w_color: Vec<f64>,
    w_depth: Vec<f64>,
    w_alpha: Vec<f64>,
    w_decoded: Vec<f64>,
}

/// Parameter groups of a [`GradScene`], in check order.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Group {
    Cloud(usize),
    Grid,
    Net(usize),
    Decoder(usize),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Grads {
    cloud: GaussianCloud,
    field: Vec<f64>,
    net: Vec<Vec<f64>>,
    decoder: [Vec<f64>; 2],
}

impl GradScene {
    pub fn new(seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed);
        let (w, h) = (16, 16);
        let n = 4;
        let teacher = 3;
        let mut camera = Camera {
            intrinsics: Intrinsics {
                fx: 18.0,
                fy: 18.0,
                cx: 7.5,
                cy: 7.5,
            },
            world_to_camera: IDENTITY4,
            width: w,
            height: h,
        };
        let q = [0.97f64, 0.1, -0.15, 0.12];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = quat_to_rotation(&q.map(|v| v / qn));
        for i in 0..3 {
            camera.world_to_camera[i][..3].copy_from_slice(&r[i]);
        }
        camera.world_to_camera[2][3] = 0.3;

        let k = 5;
        let mut cloud = GaussianCloud::zeros(k, n);
        for i in 0..k {
            cloud.positions[3 * i..3 * i + 3].copy_from_slice(&[
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(1.6..2.4),
            ]);
            for a in 0..4 {
                cloud.rotations[4 * i + a] = rng.random_range(-1.0..1.0);
            }
        }
        for v in cloud.log_scales.iter_mut() {
            *v = rng.random_range(-2.3..-1.4);
        }
        for v in cloud.opacity_logits.iter_mut() {
            *v = rng.random_range(-2.0..-0.8);
        }
        for v in cloud.color_logits.iter_mut().chain(cloud.features.iter_mut()) {
            *v = rng.random_range(-1.5..1.5);
        }

        let hex = HexPlaneConfig {
            multipliers: vec![1, 2],
            base_resolution: [3, 3, 3, 3],
            output_coordinate_dim: 6,
            ..HexPlaneConfig::default()
        };
        let (lo, hi) = cloud.bounds();
        let mut field = HexPlaneField::new(hex, lo, hi, &mut rng).expect("valid grid config");
        for v in field.data.iter_mut() {
            *v = rng.random_range(0.3..1.2);
        }
        let mut net = DeformationNet::new(
            DeformationConfig {
                width: 8,
                depth: 2,
                ..DeformationConfig::default()
            },
            field.output_dim(),
            n,
            &mut rng,
        )
        .expect("valid network config");
        // Heads and the semantic output start at zero; give them small
        // values so every layer receives gradient.
        for p in net.params_mut() {
            for v in p.iter_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let decoder = PointwiseDecoder::kaiming(teacher, n, &mut rng);
        let px = w * h;
        let teacher_size = (8, 8);
        let mut weights = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w_color = weights(3 * px);
        let w_depth = weights(px);
        let w_alpha = weights(px);
        let w_decoded = weights(teacher * teacher_size.0 * teacher_size.1);
        Self {
            cloud,
            field,
            net,
            decoder,
            camera,
            settings: RenderSettings {
                alpha_min: 0.0,
                radius_sigmas: 8.0,
                background: [0.2, 0.5, 0.1],
                ..RenderSettings::default()
            },
            time: 0.37,
            teacher_size,
            tv_weight: 0.3,
            w_color,
            w_depth,
            w_alpha,
            w_decoded,
        }
    }

    /// The scalar whose gradient is checked.
    pub fn loss(&self) -> f64 {
        let (snap, _) = deform(&self.cloud, &self.field, &self.net, self.time).expect("deform");
        let out = render(&snap, &self.camera, &self.settings).expect("render");
        let (th, tw) = self.teacher_size;
        let (dec, _) = self.decoder.forward(&out.feature, out.height, out.width, th, tw).expect("decode");
        dot(&out.color, &self.w_color)
            + dot(&out.depth, &self.w_depth)
            + dot(&out.alpha, &self.w_alpha)
            + dot(&dec.data, &self.w_decoded)
            + self.tv_weight * self.field.tv_loss()
    }

    fn gradients(&self) -> Grads {
        let (snap, cache) = deform(&self.cloud, &self.field, &self.net, self.time).expect("deform");
        let out = render(&snap, &self.camera, &self.settings).expect("render");
        let (th, tw) = self.teacher_size;
        let (_, dcache) = self.decoder.forward(&out.feature, out.height, out.width, th, tw).expect("decode");
        let d_dec = FeatureMap::new(self.decoder.teacher_channels(), th, tw, self.w_decoded.clone()).expect("shape");
        let (d_feat, dgrad) = self.decoder.backward(&dcache, &d_dec).expect("decoder backward");
        let rg = render_backward(
            &snap,
            &self.camera,
            &self.settings,
            &out,
            RenderCotangents {
                color: Some(&self.w_color),
                depth: Some(&self.w_depth),
                feature: Some(&d_feat),
                alpha: Some(&self.w_alpha),
            },
        )
        .expect("render backward");
        let back = deform_backward(&self.field, &self.net, &cache, &rg.cloud).expect("deform backward");
        let mut field = back.field;
        self.field.tv_loss_backward(self.tv_weight, &mut field);
        Grads {
            cloud: back.cloud,
            field,
            net: back.net.slices().into_iter().map(<[f64]>::to_vec).collect(),
            decoder: [dgrad.weight.into_data(), dgrad.bias.into_data()],
        }
    }

    fn groups(&self) -> Vec<(Group, String, usize)> {
        let mut out: Vec<(Group, String, usize)> = GROUP_NAMES
            .iter()
            .enumerate()
            .map(|(g, name)| (Group::Cloud(g), name.to_string(), self.cloud.groups()[g].len()))
            .collect();
        out.push((Group::Grid, "hexplane".into(), self.field.data.len()));
        let mut names = Vec::new();
        let mut layer_names = |prefix: &str, layers: usize| {
            for l in 0..layers {
                names.push(format!("{prefix}.{l}.weight"));
                names.push(format!("{prefix}.{l}.bias"));
            }
        };
        layer_names("f_out", self.net.f_out.layers().len());
        for g in 0..4 {
            layer_names(&format!("extractor{g}"), self.net.extractors[g].layers().len());
            layer_names(&format!("head{g}"), self.net.heads[g].layers().len());
        }
        layer_names("f_feat", self.net.f_feat.layers().len());
        for (s, (name, p)) in names.into_iter().zip(self.net.params()).enumerate() {
            out.push((Group::Net(s), name, p.len()));
        }
        out.push((Group::Decoder(0), "decoder.weight".into(), self.decoder.weight.len()));
        out.push((Group::Decoder(1), "decoder.bias".into(), self.decoder.bias.len()));
        out
    }

    fn nudge(&mut self, group: Group, index: usize, delta: f64) {
        match group {
            Group::Cloud(g) => self.cloud.groups_mut()[g][index] += delta,
            Group::Grid => self.field.data[index] += delta,
            Group::Net(s) => self.net.params_mut()[s][index] += delta,
            Group::Decoder(s) => self.decoder.params_mut()[s][index] += delta,
        }
    }
}

fn analytic_of(grads: &Grads, group: Group) -> &[f64] {
    match group {
        Group::Cloud(g) => grads.cloud.groups()[g],
        Group::Grid => &grads.field,
        Group::Net(s) => &grads.net[s],
        Group::Decoder(s) => &grads.decoder[s],
    }
}

/// Checks every parameter group of the seeded scene.
pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let mut scene = GradScene::new(opts.seed);
    let grads = scene.gradients();
    let mut rng = Pcg64::seed_from_u64(opts.seed ^ 0xF1D1);
    let mut groups = Vec::new();
    for (group, name, len) in scene.groups() {
        let analytic = analytic_of(&grads, group).to_vec();
        // Favour entries that actually carry gradient; grid cells far from
        // every Gaussian only see the smoothness term.
        let mut idx: Vec<usize> = (0..len).filter(|&i| analytic[i] != 0.0).collect();
        if idx.len() > opts.samples_per_group {
            idx = rand::seq::index::sample(&mut rng, idx.len(), opts.samples_per_group)
                .into_iter()
                .map(|j| idx[j])
                .collect();
            idx.sort_unstable();
        }
        if idx.is_empty() {
            idx = (0..len.min(opts.samples_per_group)).collect();
        }
        let mut check = GroupCheck {
            group: name,
            checked: idx.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in idx {
            scene.nudge(group, i, opts.step);
            let plus = scene.loss();
            scene.nudge(group, i, -2.0 * opts.step);
            let minus = scene.loss();
            scene.nudge(group, i, opts.step);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-6);
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        groups.push(check);
    }
    GradcheckReport {
        tolerance: opts.tolerance,
        groups,
    }
}
