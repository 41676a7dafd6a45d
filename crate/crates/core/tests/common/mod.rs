//! Test-only reference implementations shared by the integration tests.
#![allow(dead_code)]

use semsplat_core::gaussians::{Camera, GaussianCloud, Intrinsics};
use semsplat_core::rasterizer::RenderSettings;

pub struct OracleImage {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub feature: Vec<f64>,
    pub alpha: Vec<f64>,
}

struct Splat {
    depth: f64,
    mean: [f64; 2],
    inv: [[f64; 2]; 2],
    opacity: f64,
    color: [f64; 3],
    source: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn rotation(q: &[f64]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Per-pixel reference renderer: every Gaussian is tested against every
/// pixel, in a global depth order, with no tiling or culling.
pub fn oracle_render(cloud: &GaussianCloud, cam: &Camera, s: &RenderSettings) -> OracleImage {
    let m = &cam.world_to_camera;
    let view = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
    let Intrinsics { fx, fy, cx, cy } = cam.intrinsics;
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let p = &cloud.positions[3 * i..3 * i + 3];
        let t: Vec<f64> = (0..3).map(|r| view[r][0] * p[0] + view[r][1] * p[1] + view[r][2] * p[2] + m[r][3]).collect();
        if t[2] <= s.z_near {
            continue;
        }
        let r = rotation(&cloud.rotations[4 * i..4 * i + 4]);
        let mut sc = [[0.0; 3]; 3];
        for k in 0..3 {
            sc[k][k] = cloud.log_scales[3 * i + k].exp();
        }
        let rs = matmul(&r, &sc);
        let sigma = matmul(&rs, &transpose(&rs));
        let sv = matmul(&matmul(&view, &sigma), &transpose(&view));
        let j = [
            [fx / t[2], 0.0, -fx * t[0] / (t[2] * t[2])],
            [0.0, fy / t[2], -fy * t[1] / (t[2] * t[2])],
            [0.0, 0.0, 0.0],
        ];
        let c = matmul(&matmul(&j, &sv), &transpose(&j));
        let (a, b, d) = (c[0][0] + s.lowpass, c[0][1], c[1][1] + s.lowpass);
        let det = a * d - b * b;
        if det <= 0.0 {
            continue;
        }
        splats.push(Splat {
            depth: t[2],
            mean: [fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy],
            inv: [[d / det, -b / det], [-b / det, a / det]],
            opacity: sigmoid(cloud.opacity_logits[i]),
            color: std::array::from_fn(|k| sigmoid(cloud.color_logits[3 * i + k])),
            source: i,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.source.cmp(&b.source)));

    let (w, h, n) = (cam.width, cam.height, cloud.feature_dim);
    let mut img = OracleImage {
        color: vec![0.0; 3 * w * h],
        depth: vec![0.0; w * h],
        feature: vec![0.0; n * w * h],
        alpha: vec![0.0; w * h],
    };
    let cutoff = s.radius_sigmas * s.radius_sigmas;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut trans = 1.0;
            for g in &splats {
                let dx = x as f64 - g.mean[0];
                let dy = y as f64 - g.mean[1];
                let q = g.inv[0][0] * dx * dx + 2.0 * g.inv[0][1] * dx * dy + g.inv[1][1] * dy * dy;
                if q > cutoff {
                    continue;
                }
                let alpha = (g.opacity * (-0.5 * q).exp()).min(s.alpha_max);
                if alpha < s.alpha_min {
                    continue;
                }
                let wgt = trans * alpha;
                for k in 0..3 {
                    img.color[3 * p + k] += wgt * g.color[k];
                }
                img.depth[p] += wgt * g.depth;
                for k in 0..n {
                    img.feature[n * p + k] += wgt * cloud.features[n * g.source + k];
                }
                trans *= 1.0 - alpha;
                if trans < s.transmittance_min {
                    break;
                }
            }
            for k in 0..3 {
                img.color[3 * p + k] += trans * s.background[k];
            }
            img.alpha[p] = 1.0 - trans;
        }
    }
    img
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn pinhole(width: usize, height: usize, focal: f64) -> Camera {
    let mut world_to_camera = [[0.0; 4]; 4];
    for (i, row) in world_to_camera.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    Camera {
        intrinsics: Intrinsics {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        },
        world_to_camera,
        width,
        height,
    }
}
