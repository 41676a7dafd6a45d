//! Multi-resolution factorized space-time grid: six 2D planes per level over
//! the coordinate pairs of `(x, y, z, t)`, fused by elementwise product and
//! concatenated across levels.
//!
//! Plane order within a level is `(x,y), (x,z), (x,t), (y,z), (y,t), (z,t)`.
//! A plane over axes `(a, b)` stores `res[b]` rows of `res[a]` cells, each cell
//! holding `channels` values contiguously. Grid coordinates are
//! corner-aligned: normalized coordinate `u ∈ [0, 1]` maps to `u·(res − 1)`.

use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vec3;

pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[derive(Debug, Error, PartialEq)]
pub enum HexPlaneError {
    #[error("hexplane configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HexPlaneConfig {
    /// Spatial resolution multipliers, one level each.
    #[serde(alias = "multiresolution_levels")]
    pub multipliers: Vec<usize>,
    /// Base resolution `(x, y, z, t)`; the time axis is not multiplied.
    pub base_resolution: [usize; 4],
    /// Width of the concatenated latent. Split evenly across levels when
    /// divisible, otherwise `feat_dim_per_level` is used as is.
    pub output_coordinate_dim: usize,
    pub feat_dim_per_level: usize,
    /// Uniform init range for planes without a time axis.
    pub spatial_init: [f64; 2],
    /// Constant init value for planes with a time axis.
    pub time_init: f64,
    /// Fractional padding of the bounding box on each side.
    pub aabb_padding: f64,
}

impl Default for HexPlaneConfig {
    fn default() -> Self {
        Self {
            multipliers: vec![1, 2, 4, 8],
            base_resolution: [64, 64, 64, 100],
            output_coordinate_dim: 64,
            feat_dim_per_level: 32,
            spatial_init: [0.1, 0.5],
            time_init: 1.0,
            aabb_padding: 0.05,
        }
    }
}

impl HexPlaneConfig {
    pub fn channels_per_level(&self) -> usize {
        let levels = self.multipliers.len();
        if levels > 0 && self.output_coordinate_dim % levels == 0 {
            self.output_coordinate_dim / levels
        } else {
            self.feat_dim_per_level
        }
    }

    pub fn output_dim(&self) -> usize {
        self.channels_per_level() * self.multipliers.len()
    }

    pub fn validate(&self) -> Result<(), HexPlaneError> {
        if self.multipliers.is_empty() || self.multipliers.contains(&0) {
            return Err(HexPlaneError::Config("multipliers must be nonempty and positive".into()));
        }
        if self.base_resolution.iter().any(|&r| r < 2) {
            return Err(HexPlaneError::Config("every base resolution must be at least 2".into()));
        }
        if self.channels_per_level() == 0 {
            return Err(HexPlaneError::Config("per-level feature dim must be positive".into()));
        }
        if !(self.spatial_init[0] <= self.spatial_init[1]) || !self.time_init.is_finite() {
            return Err(HexPlaneError::Config("invalid init range".into()));
        }
        if !(self.aabb_padding >= 0.0) {
            return Err(HexPlaneError::Config("aabb padding must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexPlaneField {
    pub config: HexPlaneConfig,
    /// `(lower, upper)` corners used to normalize positions.
    pub aabb: (Vec3, Vec3),
    /// All plane values, level-major then plane order.
    pub data: Vec<f64>,
    resolutions: Vec<[usize; 4]>,
    offsets: Vec<[usize; 6]>,
    channels: usize,
}

/// Bilinear taps along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    frac: f64,
    /// `d(grid coordinate)/d(input coordinate)`, zero when clamped.
    slope: f64,
}

fn tap(u: f64, res: usize, du_dx: f64) -> Tap {
    let inside = (0.0..=1.0).contains(&u);
    let u = u.clamp(0.0, 1.0);
    let x = u * (res - 1) as f64;
    let i0 = (x.floor() as usize).min(res - 2);
    Tap {
        i0,
        frac: x - i0 as f64,
        slope: if inside { du_dx * (res - 1) as f64 } else { 0.0 },
    }
}

fn layout(config: &HexPlaneConfig) -> (Vec<[usize; 4]>, Vec<[usize; 6]>, usize) {
    let channels = config.channels_per_level();
    let mut resolutions = Vec::new();
    let mut offsets = Vec::new();
    let mut total = 0;
    for &m in &config.multipliers {
        let b = config.base_resolution;
        let res = [b[0] * m, b[1] * m, b[2] * m, b[3]];
        let mut off = [0; 6];
        for (p, &(a, bb)) in PLANE_AXES.iter().enumerate() {
            off[p] = total;
            total += res[a] * res[bb] * channels;
        }
        resolutions.push(res);
        offsets.push(off);
    }
    (resolutions, offsets, total)
}

impl HexPlaneField {
    /// Rebuilds a field from a stored (already padded) box and plane values.
    pub fn from_parts(config: HexPlaneConfig, aabb: (Vec3, Vec3), data: Vec<f64>) -> Result<Self, HexPlaneError> {
        config.validate()?;
        let (resolutions, offsets, total) = layout(&config);
        if data.len() != total {
            return Err(HexPlaneError::Config(format!("{} plane values, layout needs {total}", data.len())));
        }
        if (0..3).any(|a| !(aabb.0[a] < aabb.1[a])) {
            return Err(HexPlaneError::Config("invalid bounding box".into()));
        }
        Ok(Self {
            channels: config.channels_per_level(),
            config,
            aabb,
            data,
            resolutions,
            offsets,
        })
    }

    /// Builds a field whose box encloses `lo..hi` plus padding.
    pub fn new<R: Rng + ?Sized>(config: HexPlaneConfig, lo: Vec3, hi: Vec3, rng: &mut R) -> Result<Self, HexPlaneError> {
        config.validate()?;
        if (0..3).any(|a| !(lo[a] <= hi[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
            return Err(HexPlaneError::Config("invalid bounding box".into()));
        }
        let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-6);
        let mut plo = lo;
        let mut phi = hi;
        for a in 0..3 {
            let ext = hi[a] - lo[a];
            let pad = if ext > 0.0 { ext * config.aabb_padding } else { span * config.aabb_padding.max(0.05) };
            plo[a] -= pad;
            phi[a] += pad;
        }
        let channels = config.channels_per_level();
        let (resolutions, offsets, total) = layout(&config);
        let mut data = vec![0.0; total];
        for (l, off) in offsets.iter().enumerate() {
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let n = resolutions[l][a] * resolutions[l][b] * channels;
                let plane = &mut data[off[p]..off[p] + n];
                if b == 3 {
                    plane.fill(config.time_init);
                } else {
                    let [lo_v, hi_v] = config.spatial_init;
                    for v in plane.iter_mut() {
                        *v = if hi_v > lo_v { rng.random_range(lo_v..hi_v) } else { lo_v };
                    }
                }
            }
        }
        Ok(Self {
            config,
            aabb: (plo, phi),
            data,
            resolutions,
            offsets,
            channels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn channels_per_level(&self) -> usize {
        self.channels
    }

    pub fn output_dim(&self) -> usize {
        self.channels * self.num_levels()
    }

    pub fn resolution(&self, level: usize) -> [usize; 4] {
        self.resolutions[level]
    }

    /// Flat range of one plane inside [`Self::data`].
    pub fn plane_range(&self, level: usize, plane: usize) -> std::ops::Range<usize> {
        let (a, b) = PLANE_AXES[plane];
        let res = self.resolutions[level];
        let start = self.offsets[level][plane];
        start..start + res[a] * res[b] * self.channels
    }

    fn cell(&self, level: usize, plane: usize, ia: usize, ib: usize) -> usize {
        let (a, _) = PLANE_AXES[plane];
        self.offsets[level][plane] + (ib * self.resolutions[level][a] + ia) * self.channels
    }

    fn normalized(&self, mu: &Vec3, t: f64) -> ([f64; 4], [f64; 4]) {
        let (lo, hi) = &self.aabb;
        let mut u = [0.0; 4];
        let mut du = [0.0; 4];
        for a in 0..3 {
            du[a] = 1.0 / (hi[a] - lo[a]);
            u[a] = (mu[a] - lo[a]) * du[a];
        }
        u[3] = t;
        du[3] = 1.0;
        (u, du)
    }

    fn taps(&self, level: usize, u: &[f64; 4], du: &[f64; 4]) -> [Tap; 4] {
        let res = self.resolutions[level];
        std::array::from_fn(|a| tap(u[a], res[a], du[a]))
    }

    /// Interpolated value of one plane, written into `out`.
    fn sample(&self, level: usize, plane: usize, taps: &[Tap; 4], out: &mut [f64]) {
        let (a, b) = PLANE_AXES[plane];
        let (ta, tb) = (taps[a], taps[b]);
        let c = self.channels;
        let corners = [
            (ta.i0, tb.i0, (1.0 - ta.frac) * (1.0 - tb.frac)),
            (ta.i0 + 1, tb.i0, ta.frac * (1.0 - tb.frac)),
            (ta.i0, tb.i0 + 1, (1.0 - ta.frac) * tb.frac),
            (ta.i0 + 1, tb.i0 + 1, ta.frac * tb.frac),
        ];
        out.fill(0.0);
        for (ia, ib, w) in corners {
            let base = self.cell(level, plane, ia, ib);
            for (o, v) in out.iter_mut().zip(&self.data[base..base + c]) {
                *o += w * v;
            }
        }
    }

    /// Latent vector for position `mu` at time `t`, written into `out`
    /// (length [`Self::output_dim`]).
    pub fn query_into(&self, mu: &Vec3, t: f64, out: &mut [f64]) {
        let (u, du) = self.normalized(mu, t);
        let c = self.channels;
        let mut buf = vec![0.0; c];
        for l in 0..self.num_levels() {
            let taps = self.taps(l, &u, &du);
            let dst = &mut out[l * c..(l + 1) * c];
            dst.fill(1.0);
            for p in 0..6 {
                self.sample(l, p, &taps, &mut buf);
                for (d, v) in dst.iter_mut().zip(&buf) {
                    *d *= v;
                }
            }
        }
    }

    pub fn query(&self, mu: &Vec3, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.query_into(mu, t, &mut out);
        out
    }

    /// Row-major `[K × output_dim]` latents for a set of positions.
    pub fn query_batch(&self, positions: &[f64], t: f64) -> Vec<f64> {
        let d = self.output_dim();
        let mut out = vec![0.0; positions.len() / 3 * d];
        out.par_chunks_mut(d).zip(positions.par_chunks(3)).for_each(|(o, p)| {
            self.query_into(&[p[0], p[1], p[2]], t, o);
        });
        out
    }

    /// Accumulates `dL/d(grid)` into `grad` (same layout as [`Self::data`])
    /// and returns `dL/dμ`. Clamped coordinates receive no position gradient.
    pub fn query_backward(&self, mu: &Vec3, t: f64, d_f: &[f64], grad: &mut [f64]) -> Vec3 {
        let (u, du) = self.normalized(mu, t);
        let c = self.channels;
        let mut vals = vec![vec![0.0; c]; 6];
        let mut d_mu = [0.0; 3];
        let mut others = vec![0.0; c];
        for l in 0..self.num_levels() {
            let taps = self.taps(l, &u, &du);
            for (p, v) in vals.iter_mut().enumerate() {
                self.sample(l, p, &taps, v);
            }
            let g = &d_f[l * c..(l + 1) * c];
            for p in 0..6 {
                for (ch, o) in others.iter_mut().enumerate() {
                    let mut prod = g[ch];
                    for (q, v) in vals.iter().enumerate() {
                        if q != p {
                            prod *= v[ch];
                        }
                    }
                    *o = prod;
                }
                let (a, b) = PLANE_AXES[p];
                let (ta, tb) = (taps[a], taps[b]);
                let corners = [
                    (ta.i0, tb.i0, (1.0 - ta.frac) * (1.0 - tb.frac), -(1.0 - tb.frac), -(1.0 - ta.frac)),
                    (ta.i0 + 1, tb.i0, ta.frac * (1.0 - tb.frac), 1.0 - tb.frac, -ta.frac),
                    (ta.i0, tb.i0 + 1, (1.0 - ta.frac) * tb.frac, -tb.frac, 1.0 - ta.frac),
                    (ta.i0 + 1, tb.i0 + 1, ta.frac * tb.frac, tb.frac, ta.frac),
                ];
                for (ia, ib, w, dwa, dwb) in corners {
                    let base = self.cell(l, p, ia, ib);
                    let cellv = &self.data[base..base + c];
                    let mut dot = 0.0;
                    for ch in 0..c {
                        grad[base + ch] += w * others[ch];
                        dot += others[ch] * cellv[ch];
                    }
                    if a < 3 {
                        d_mu[a] += dot * dwa * ta.slope;
                    }
                    if b < 3 {
                        d_mu[b] += dot * dwb * tb.slope;
                    }
                }
            }
        }
        d_mu
    }

    /// Squared differences between axis-adjacent cells, averaged per plane
    /// over `channels × adjacent pairs`, summed over planes and levels.
    pub fn tv_loss(&self) -> f64 {
        let mut total = 0.0;
        self.for_each_tv_pair(|i, j, norm| {
            let d = self.data[i] - self.data[j];
            total += d * d * norm;
        });
        total
    }

    /// Adds `scale · dTV/d(grid)` into `grad`.
    pub fn tv_loss_backward(&self, scale: f64, grad: &mut [f64]) {
        self.for_each_tv_pair(|i, j, norm| {
            let g = 2.0 * (self.data[i] - self.data[j]) * norm * scale;
            grad[i] += g;
            grad[j] -= g;
        });
    }

    fn for_each_tv_pair(&self, mut f: impl FnMut(usize, usize, f64)) {
        let c = self.channels;
        for l in 0..self.num_levels() {
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let (cols, rows) = (self.resolutions[l][a], self.resolutions[l][b]);
                let pairs = rows * (cols - 1) + (rows - 1) * cols;
                let norm = 1.0 / (pairs * c) as f64;
                for ib in 0..rows {
                    for ia in 0..cols {
                        let here = self.cell(l, p, ia, ib);
                        if ia + 1 < cols {
                            let right = self.cell(l, p, ia + 1, ib);
                            for ch in 0..c {
                                f(right + ch, here + ch, norm);
                            }
                        }
                        if ib + 1 < rows {
                            let down = self.cell(l, p, ia, ib + 1);
                            for ch in 0..c {
                                f(down + ch, here + ch, norm);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_pcg::Pcg64;

    fn small_config(channels: usize, levels: Vec<usize>) -> HexPlaneConfig {
        HexPlaneConfig {
            output_coordinate_dim: channels * levels.len(),
            multipliers: levels,
            base_resolution: [3, 4, 5, 6],
            ..Default::default()
        }
    }

    fn field(cfg: HexPlaneConfig, seed: u64) -> HexPlaneField {
        let mut rng = Pcg64::seed_from_u64(seed);
        HexPlaneField::new(cfg, [-1.0, -1.0, 0.0], [1.0, 2.0, 3.0], &mut rng).unwrap()
    }

    fn randomize(f: &mut HexPlaneField, seed: u64) {
        let mut rng = Pcg64::seed_from_u64(seed);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn default_layout_matches_reference_dims() {
        let cfg = HexPlaneConfig::default();
        assert_eq!(cfg.channels_per_level(), 16);
        assert_eq!(cfg.output_dim(), 64);
        let odd = HexPlaneConfig {
            output_coordinate_dim: 30,
            feat_dim_per_level: 7,
            ..Default::default()
        };
        assert_eq!(odd.output_dim(), 28);
    }

    #[test]
    fn constant_one_grids_give_all_ones() {
        let mut f = field(small_config(3, vec![1, 2]), 0);
        f.data.fill(1.0);
        let q = f.query(&[0.3, 0.1, 1.7], 0.4);
        assert_eq!(q, vec![1.0; 6]);
        let mut g = vec![0.0; f.data.len()];
        let dmu = f.query_backward(&[0.3, 0.1, 1.7], 0.4, &[1.0; 6], &mut g);
        assert_eq!(dmu, [0.0; 3]);
    }

    #[test]
    fn zero_plane_annihilates_its_level() {
        let mut f = field(small_config(2, vec![1, 2]), 1);
        randomize(&mut f, 2);
        let r = f.plane_range(1, 4);
        f.data[r].fill(0.0);
        let q = f.query(&[0.2, 0.5, 1.0], 0.7);
        assert!(q[..2].iter().all(|&v| v != 0.0));
        assert_eq!(&q[2..], &[0.0, 0.0]);
    }

    #[test]
    fn cell_corner_query_is_plain_lookup_product() {
        let cfg = small_config(2, vec![1]);
        let mut f = field(cfg, 3);
        randomize(&mut f, 4);
        let (lo, hi) = f.aabb;
        let res = f.resolution(0);
        let idx = [1usize, 2, 3, 4];
        let mu: Vec3 = std::array::from_fn(|a| lo[a] + (hi[a] - lo[a]) * idx[a] as f64 / (res[a] - 1) as f64);
        let t = idx[3] as f64 / (res[3] - 1) as f64;
        let q = f.query(&mu, t);
        for ch in 0..2 {
            let mut expect = 1.0;
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let start = f.plane_range(0, p).start;
                expect *= f.data[start + (idx[b] * res[a] + idx[a]) * 2 + ch];
            }
            assert!((q[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_hand_gradient() {
        let mut f = field(small_config(1, vec![1]), 5);
        randomize(&mut f, 6);
        let mu = [0.1, 0.4, 1.2];
        let t = 0.33;
        let mut g = vec![0.0; f.data.len()];
        f.query_backward(&mu, t, &[2.5], &mut g);
        let (u, du) = f.normalized(&mu, t);
        let taps = f.taps(0, &u, &du);
        let mut vals = [0.0; 6];
        for (p, v) in vals.iter_mut().enumerate() {
            let mut b = [0.0];
            f.sample(0, p, &taps, &mut b);
            *v = b[0];
        }
        let others: f64 = vals[1..].iter().product();
        let (ta, tb) = (taps[0], taps[1]);
        let weights = [
            ((ta.i0, tb.i0), (1.0 - ta.frac) * (1.0 - tb.frac)),
            ((ta.i0 + 1, tb.i0), ta.frac * (1.0 - tb.frac)),
            ((ta.i0, tb.i0 + 1), (1.0 - ta.frac) * tb.frac),
            ((ta.i0 + 1, tb.i0 + 1), ta.frac * tb.frac),
        ];
        for ((ia, ib), w) in weights {
            let cell = f.cell(0, 0, ia, ib);
            assert!((g[cell] - 2.5 * others * w).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut f = field(small_config(2, vec![1, 2]), 7);
        randomize(&mut f, 8);
        let mu = [0.23, 0.71, 2.2];
        let t = 0.61;
        let mut rng = Pcg64::seed_from_u64(9);
        let probe: Vec<f64> = (0..f.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |f: &HexPlaneField, mu: &Vec3| f.query(mu, t).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let mut g = vec![0.0; f.data.len()];
        let dmu = f.query_backward(&mu, t, &probe, &mut g);
        let h = 1e-5;
        for a in 0..3 {
            let (mut p, mut m) = (mu, mu);
            p[a] += h;
            m[a] -= h;
            let n = (loss(&f, &p) - loss(&f, &m)) / (2.0 * h);
            assert!((n - dmu[a]).abs() <= 1e-6 * (1.0 + n.abs()), "mu{a}: {n} vs {}", dmu[a]);
        }
        for i in (0..f.data.len()).step_by(7) {
            let mut fp = f.clone();
            fp.data[i] += h;
            let mut fm = f.clone();
            fm.data[i] -= h;
            let n = (loss(&fp, &mu) - loss(&fm, &mu)) / (2.0 * h);
            assert!((n - g[i]).abs() <= 1e-7 * (1.0 + n.abs()), "cell {i}");
        }
    }

    #[test]
    fn clamped_positions_have_zero_position_gradient() {
        let mut f = field(small_config(2, vec![1]), 10);
        randomize(&mut f, 11);
        let mut g = vec![0.0; f.data.len()];
        let dmu = f.query_backward(&[50.0, 0.5, 1.0], 0.5, &[1.0, 1.0], &mut g);
        assert_eq!(dmu[0], 0.0);
        assert!(dmu[1] != 0.0);
    }

    #[test]
    fn tv_hand_case_and_gradient() {
        let cfg = HexPlaneConfig {
            multipliers: vec![1],
            base_resolution: [2, 2, 2, 2],
            output_coordinate_dim: 1,
            ..Default::default()
        };
        let mut f = field(cfg, 12);
        f.data.fill(1.0);
        assert_eq!(f.tv_loss(), 0.0);
        // plane (x,y): rows over y, columns over x → [[0,1],[0,1]]
        let r = f.plane_range(0, 0);
        f.data[r].copy_from_slice(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(f.tv_loss(), 2.0 / 4.0);

        randomize(&mut f, 13);
        assert!(f.tv_loss() >= 0.0);
        let mut g = vec![0.0; f.data.len()];
        f.tv_loss_backward(1.0, &mut g);
        let h = 1e-6;
        for i in 0..f.data.len() {
            let mut p = f.clone();
            p.data[i] += h;
            let mut m = f.clone();
            m.data[i] -= h;
            let n = (p.tv_loss() - m.tv_loss()) / (2.0 * h);
            assert!((n - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn query_is_lipschitz_and_deterministic() {
        let mut f = field(small_config(2, vec![1, 2]), 14);
        randomize(&mut f, 15);
        let mut rng = Pcg64::seed_from_u64(16);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let mu: Vec3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..2.0), rng.random_range(0.0..3.0)];
            let t = rng.random_range(0.0..1.0);
            let a = f.query(&mu, t);
            assert_eq!(a, f.query(&mu, t));
            let b = f.query(&[mu[0] + eps, mu[1] - eps, mu[2] + eps], t);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / eps);
        }
        assert!(worst < 100.0, "empirical Lipschitz bound {worst}");
    }
}
