//! Teacher feature maps, the pointwise decoder that lifts rendered features
//! into teacher space, the L1 distillation loss, prototype segmentation and
//! segmentation metrics.
//!
//! # Feature file layout
//!
//! All integers little-endian:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `FE4D`                            |
//! | 4      | 2         | format version (`u16`, currently 1)     |
//! | 6      | 4         | channels `C` (`u32`)                    |
//! | 10     | 4         | height `H` (`u32`)                      |
//! | 14     | 4         | width `W` (`u32`)                       |
//! | 18     | 4·C·H·W   | `f32` values, channel-major (c, row, column) |

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gemm, Activation, LinearLayer, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"FE4D";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

/// Label id reserved for "no class".
pub const BACKGROUND: u32 = 0;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("feature file format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no class prototypes available")]
    NoPrototypes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `C × H × W` feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, SemanticError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(SemanticError::Shape(format!(
                "feature map dimensions must be positive, got {channels}×{height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(SemanticError::Shape(format!(
                "{channels}×{height}×{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a channel-major map from a channel-last `H × W × C` buffer.
    pub fn from_hwc(hwc: &[f64], height: usize, width: usize, channels: usize) -> Result<Self, SemanticError> {
        if hwc.len() != height * width * channels {
            return Err(SemanticError::Shape(format!(
                "hwc buffer has {} values, expected {}",
                hwc.len(),
                height * width * channels
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; hwc.len()];
        for p in 0..plane {
            for c in 0..channels {
                data[c * plane + p] = hwc[p * channels + c];
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn to_hwc(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Feature vector of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for dim in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SemanticError> {
        let fail = |offset: usize, message: &str| SemanticError::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 4 {
            return Err(fail(bytes.len(), "truncated magic"));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(fail(0, "bad magic, expected FE4D"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(fail(4, &format!("unsupported version {version}")));
        }
        let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (channels, height, width) = (dim(6), dim(10), dim(14));
        if channels == 0 || height == 0 || width == 0 {
            return Err(fail(6, "zero dimension"));
        }
        let count = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| fail(6, "dimension overflow"))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(fail(bytes.len(), &format!("truncated payload, expected {expected} bytes")));
        }
        if bytes.len() > expected {
            return Err(fail(expected, "trailing bytes after payload"));
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(HEADER_LEN + 4 * i, "non-finite value"));
            }
            data.push(v as f64);
        }
        Self::new(channels, height, width, data)
    }

    pub fn write(&self, path: &Path) -> Result<(), SemanticError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap, SemanticError> {
    FeatureMap::from_bytes(&std::fs::read(path)?)
}

/// Per-axis sampling taps of a half-pixel-centred bilinear resize.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a channel-last `H × W × C` buffer. Equal sizes copy.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let weights = [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ];
            let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for ((sy, sx), wgt) in weights {
                if wgt == 0.0 {
                    continue;
                }
                let s = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += wgt * v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(
    d_out: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if h == out_h && w == out_w {
        return d_out.to_vec();
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut d_src = vec![0.0; h * w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = &d_out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for ((sy, sx), wgt) in [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let d = &mut d_src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += wgt * gv;
                }
            }
        }
    }
    d_src
}

/// 1×1 convolution from the rendered feature width to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseDecoder {
    /// `[C_t × N]`
    pub weight: Tensor,
    /// `[C_t]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Resized input kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    resized: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl PointwiseDecoder {
    pub fn new(teacher_channels: usize, rendered_channels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[teacher_channels, rendered_channels]),
            bias: Tensor::zeros(&[teacher_channels]),
        }
    }

    /// Kaiming-uniform weight, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(teacher_channels: usize, rendered_channels: usize, rng: &mut R) -> Self {
        let layer = LinearLayer::kaiming_uniform(rendered_channels, teacher_channels, Activation::None, rng);
        Self {
            weight: layer.weight,
            bias: layer.bias,
        }
    }

    pub fn teacher_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn rendered_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), self.bias.data()]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), self.bias.data_mut()]
    }

    /// `rendered` is channel-last `H × W × N`.
    pub fn forward(
        &self,
        rendered: &[f64],
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<(FeatureMap, DecodeCache), SemanticError> {
        let n = self.rendered_channels();
        let ct = self.teacher_channels();
        if rendered.len() != h * w * n {
            return Err(SemanticError::Shape(format!(
                "rendered map has {} values, expected {h}×{w}×{n}",
                rendered.len()
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(SemanticError::Shape("output size must be positive".into()));
        }
        let resized = resize_bilinear(rendered, h, w, n, out_h, out_w);
        let pixels = out_h * out_w;
        let mut out = vec![0.0; ct * pixels];
        for (c, plane) in out.chunks_exact_mut(pixels).enumerate() {
            plane.fill(self.bias.data()[c]);
        }
        // outᵀ[C_t × P] = W[C_t × N] · resizedᵀ[N × P]
        gemm(ct, n, pixels, self.weight.data(), n, 1, &resized, 1, n, &mut out, true);
        Ok((
            FeatureMap::new(ct, out_h, out_w, out)?,
            DecodeCache {
                resized,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
            },
        ))
    }

    /// Returns `dL/d rendered` (channel-last, input resolution) and
    /// parameter gradients.
    pub fn backward(&self, cache: &DecodeCache, d_out: &FeatureMap) -> Result<(Vec<f64>, DecoderGrad), SemanticError> {
        let n = self.rendered_channels();
        let ct = self.teacher_channels();
        let pixels = cache.out_h * cache.out_w;
        if d_out.channels != ct || d_out.height != cache.out_h || d_out.width != cache.out_w {
            return Err(SemanticError::Shape("decoder gradient does not match cached output".into()));
        }
        let mut dw = vec![0.0; ct * n];
        gemm(ct, pixels, n, &d_out.data, pixels, 1, &cache.resized, n, 1, &mut dw, false);
        let db: Vec<f64> = d_out.data.chunks_exact(pixels).map(|p| p.iter().sum()).collect();
        let mut d_resized = vec![0.0; pixels * n];
        gemm(pixels, ct, n, &d_out.data, 1, pixels, self.weight.data(), n, 1, &mut d_resized, false);
        let d_rendered =
            resize_bilinear_backward(&d_resized, cache.in_h, cache.in_w, n, cache.out_h, cache.out_w);
        Ok((
            d_rendered,
            DecoderGrad {
                weight: Tensor::from_vec(&[ct, n], dw).expect("shape"),
                bias: Tensor::from_vec(&[ct], db).expect("shape"),
            },
        ))
    }
}

/// Resize + pointwise map of a rendered `H × W × N` map to `out_h × out_w`.
pub fn decode_features(
    dec: &PointwiseDecoder,
    rendered: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap, SemanticError> {
    dec.forward(rendered, h, w, out_h, out_w).map(|(m, _)| m)
}

/// Per-pixel L1 over channels, averaged over pixels.
pub fn feature_loss(pred: &FeatureMap, gt: &FeatureMap) -> Result<f64, SemanticError> {
    if !pred.same_shape(gt) {
        return Err(SemanticError::Shape(format!(
            "prediction {}×{}×{} vs teacher {}×{}×{}",
            pred.channels, pred.height, pred.width, gt.channels, gt.height, gt.width
        )));
    }
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / (pred.height * pred.width) as f64)
}

/// Gradient of [`feature_loss`] with respect to `pred`.
pub fn feature_loss_grad(pred: &FeatureMap, gt: &FeatureMap, scale: f64) -> Result<FeatureMap, SemanticError> {
    if !pred.same_shape(gt) {
        return Err(SemanticError::Shape("feature loss gradient shape mismatch".into()));
    }
    let k = scale / (pred.height * pred.width) as f64;
    let data = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                k
            } else if d < 0.0 {
                -k
            } else {
                0.0
            }
        })
        .collect();
    FeatureMap::new(pred.channels, pred.height, pred.width, data)
}

/// Dense per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, SemanticError> {
        if labels.len() != height * width {
            return Err(SemanticError::Shape(format!(
                "{height}×{width} label map needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resample (pixel-centre aligned).
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let pick = |o: usize, out: usize, inp: usize| {
            (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
        };
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = pick(y, height, self.height);
            for x in 0..width {
                labels.push(self.get(sy, pick(x, width, self.width)));
            }
        }
        LabelMap { height, width, labels }
    }
}

/// Unit-normalised per-class mean features in teacher space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub classes: Vec<u32>,
    pub vectors: Vec<Vec<f64>>,
    /// Minimum cosine similarity for a non-background assignment.
    pub threshold: f64,
}

impl ClassPrototypes {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Mean feature per class over all member pixels, labels resampled to the
/// feature resolution by nearest neighbour.
pub fn fit_prototypes(
    features: &[FeatureMap],
    labels: &[LabelMap],
    classes: &[u32],
    threshold: f64,
) -> Result<ClassPrototypes, SemanticError> {
    if features.len() != labels.len() {
        return Err(SemanticError::Shape(format!(
            "{} feature maps but {} label maps",
            features.len(),
            labels.len()
        )));
    }
    let channels = features.first().map_or(0, |f| f.channels);
    let mut sums = vec![vec![0.0; channels]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (fmap, lmap) in features.iter().zip(labels) {
        if fmap.channels != channels {
            return Err(SemanticError::Shape("feature maps disagree on channel count".into()));
        }
        let lab = lmap.resize_nearest(fmap.height, fmap.width);
        let plane = fmap.height * fmap.width;
        for (p, &l) in lab.labels.iter().enumerate() {
            if let Some(k) = classes.iter().position(|&c| c == l) {
                counts[k] += 1;
                for (c, s) in sums[k].iter_mut().enumerate() {
                    *s += fmap.data[c * plane + p];
                }
            }
        }
    }
    let mut out = ClassPrototypes {
        classes: Vec::new(),
        vectors: Vec::new(),
        threshold,
    };
    for (k, &class) in classes.iter().enumerate() {
        if counts[k] == 0 {
            log::warn!("class {class} has no labelled pixels; no prototype fitted");
            continue;
        }
        match normalized(&sums[k]) {
            Some(v) => {
                out.classes.push(class);
                out.vectors.push(v);
            }
            None => log::warn!("class {class} has a zero mean feature; no prototype fitted"),
        }
    }
    if out.is_empty() {
        log::warn!("no prototypes fitted");
    }
    Ok(out)
}

/// Cosine-similarity argmax against the prototypes; below-threshold pixels
/// become [`BACKGROUND`]. Ties go to the lower class id.
pub fn segment(features: &FeatureMap, protos: &ClassPrototypes) -> Result<LabelMap, SemanticError> {
    if protos.is_empty() {
        return Err(SemanticError::NoPrototypes);
    }
    if protos.vectors[0].len() != features.channels {
        return Err(SemanticError::Shape(format!(
            "prototypes have {} channels, features {}",
            protos.vectors[0].len(),
            features.channels
        )));
    }
    let mut order: Vec<usize> = (0..protos.classes.len()).collect();
    order.sort_by_key(|&k| protos.classes[k]);
    let plane = features.height * features.width;
    let mut labels = vec![BACKGROUND; plane];
    for (p, label) in labels.iter_mut().enumerate() {
        let v: Vec<f64> = (0..features.channels).map(|c| features.data[c * plane + p]).collect();
        let Some(v) = normalized(&v) else { continue };
        let mut best: Option<(f64, u32)> = None;
        for &k in &order {
            let sim: f64 = v.iter().zip(&protos.vectors[k]).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, protos.classes[k]));
            }
        }
        if let Some((sim, class)) = best {
            if sim >= protos.threshold {
                *label = class;
            }
        }
    }
    LabelMap::new(features.height, features.width, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegScores {
    pub iou: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: u32,
    /// Ground-truth pixel count.
    pub support: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub scores: SegScores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegReport {
    pub per_class: Vec<ClassScores>,
    /// Support-weighted mean over classes present in the ground truth.
    pub aggregate: Option<SegScores>,
}

impl SegReport {
    /// Largest `|DSC − 2·IoU/(1+IoU)|` over classes; the two are computed
    /// independently from the confusion counts.
    pub fn dsc_iou_deviation(&self) -> f64 {
        self.per_class
            .iter()
            .map(|c| (c.scores.dsc - 2.0 * c.scores.iou / (1.0 + c.scores.iou)).abs())
            .fold(0.0, f64::max)
    }

    pub fn class(&self, class: u32) -> Option<&ClassScores> {
        self.per_class.iter().find(|c| c.class == class)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    // An empty denominator means the class is absent from both maps.
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn seg_metrics(pred: &LabelMap, gt: &LabelMap, classes: &[u32]) -> Result<SegReport, SemanticError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(SemanticError::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            match (p == class, g == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let scores = SegScores {
            iou: ratio(tp, tp + fp + fn_),
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            recall: if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
            precision: if tp + fp == 0 {
                if fn_ == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                tp as f64 / (tp + fp) as f64
            },
        };
        per_class.push(ClassScores {
            class,
            support: tp + fn_,
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            scores,
        });
    }
    let total: usize = per_class.iter().map(|c| c.support).sum();
    let aggregate = (total > 0).then(|| {
        let mut agg = SegScores {
            iou: 0.0,
            dsc: 0.0,
            recall: 0.0,
            precision: 0.0,
        };
        for c in &per_class {
            let w = c.support as f64 / total as f64;
            agg.iou += w * c.scores.iou;
            agg.dsc += w * c.scores.dsc;
            agg.recall += w * c.scores.recall;
            agg.precision += w * c.scores.precision;
        }
        agg
    });
    Ok(SegReport { per_class, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_map(rng: &mut Pcg64, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn zero_payload_header_reads_as_zero_map() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FE4D");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for d in [256u32, 51, 64] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.resize(18 + 4 * 256 * 51 * 64, 0);
        let m = FeatureMap::from_bytes(&bytes).unwrap();
        assert_eq!((m.channels, m.height, m.width), (256, 51, 64));
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sam_default_shape_round_trips_through_disk() {
        let mut rng = Pcg64::seed_from_u64(3);
        let m = random_map(&mut rng, 256, 64, 64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        m.write(&path).unwrap();
        let back = load_feature_map(&path).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
        assert_eq!((back.channels, back.height, back.width), (256, 64, 64));
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let m = FeatureMap::zeros(2, 3, 4);
        let mut bytes = m.to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        match FeatureMap::from_bytes(truncated) {
            Err(SemanticError::Format { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("unexpected {other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(FeatureMap::from_bytes(&bytes), Err(SemanticError::Format { offset: 0, .. })));
    }

    #[test]
    fn identity_block_decoder_preserves_rendered_channels() {
        let (n, ct, h, w) = (3, 5, 4, 6);
        let mut dec = PointwiseDecoder::new(ct, n);
        for i in 0..n {
            dec.weight.data_mut()[i * n + i] = 1.0;
        }
        let mut rng = Pcg64::seed_from_u64(5);
        let rendered: Vec<f64> = (0..h * w * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = decode_features(&dec, &rendered, h, w, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ct {
                    let expect = if c < n { rendered[(y * w + x) * n + c] } else { 0.0 };
                    assert_eq!(out.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn zero_weight_decoder_emits_bias() {
        let mut dec = PointwiseDecoder::new(2, 3);
        dec.bias.data_mut().copy_from_slice(&[0.25, -1.5]);
        let rendered = vec![0.7; 4 * 4 * 3];
        let out = decode_features(&dec, &rendered, 4, 4, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(0, y, x), 0.25);
                assert_eq!(out.get(1, y, x), -1.5);
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(9);
        let (n, ct, h, w, oh, ow) = (3, 4, 5, 7, 3, 4);
        let mut dec = PointwiseDecoder::kaiming(ct, n, &mut rng);
        for b in dec.bias.data_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
        let rendered: Vec<f64> = (0..h * w * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = random_map(&mut rng, ct, oh, ow);
        let loss = |dec: &PointwiseDecoder, r: &[f64]| -> f64 {
            let out = decode_features(dec, r, h, w, oh, ow).unwrap();
            out.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = dec.forward(&rendered, h, w, oh, ow).unwrap();
        let (d_r, grads) = dec.backward(&cache, &probe).unwrap();
        let eps = 1e-6;
        for i in 0..rendered.len() {
            let mut p = rendered.clone();
            p[i] += eps;
            let mut m = rendered.clone();
            m[i] -= eps;
            let num = (loss(&dec, &p) - loss(&dec, &m)) / (2.0 * eps);
            assert!((num - d_r[i]).abs() < 1e-7, "rendered {i}");
        }
        for i in 0..dec.weight.len() {
            let mut p = dec.clone();
            p.weight.data_mut()[i] += eps;
            let mut m = dec.clone();
            m.weight.data_mut()[i] -= eps;
            let num = (loss(&p, &rendered) - loss(&m, &rendered)) / (2.0 * eps);
            assert!((num - grads.weight.data()[i]).abs() < 1e-7, "weight {i}");
        }
        for i in 0..ct {
            let mut p = dec.clone();
            p.bias.data_mut()[i] += eps;
            let mut m = dec.clone();
            m.bias.data_mut()[i] -= eps;
            let num = (loss(&p, &rendered) - loss(&m, &rendered)) / (2.0 * eps);
            assert!((num - grads.bias.data()[i]).abs() < 1e-7, "bias {i}");
        }
    }

    #[test]
    fn half_size_resize_averages_two_by_two_blocks() {
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        let out = resize_bilinear(&src, 4, 4, 1, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn feature_loss_cases() {
        let a = FeatureMap::new(2, 1, 1, vec![0.5, -0.5]).unwrap();
        let z = FeatureMap::zeros(2, 1, 1);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_loss(&a, &z).unwrap(), 1.0);
        assert!(feature_loss(&a, &FeatureMap::zeros(3, 1, 1)).is_err());

        let mut rng = Pcg64::seed_from_u64(2);
        let p = random_map(&mut rng, 3, 4, 5);
        let g = random_map(&mut rng, 3, 4, 5);
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..5 {
                let mut l1 = 0.0;
                for c in 0..3 {
                    l1 += (p.get(c, y, x) - g.get(c, y, x)).abs();
                }
                oracle += l1;
            }
        }
        oracle /= 20.0;
        let got = feature_loss(&p, &g).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert_eq!(got, feature_loss(&g, &p).unwrap());
    }

    #[test]
    fn single_class_prototype_is_normalized_vector() {
        let v = [3.0, 4.0];
        let mut data = Vec::new();
        for c in 0..2 {
            data.extend(std::iter::repeat_n(v[c], 6));
        }
        let f = FeatureMap::new(2, 2, 3, data).unwrap();
        let l = LabelMap::new(2, 3, vec![1; 6]).unwrap();
        let p = fit_prototypes(&[f], &[l], &[1], 0.5).unwrap();
        assert_eq!(p.classes, vec![1]);
        assert!((p.vectors[0][0] - 0.6).abs() < 1e-15 && (p.vectors[0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_clusters_give_their_means() {
        let mut rng = Pcg64::seed_from_u64(4);
        let (h, w) = (4, 4);
        let mut labels = Vec::new();
        let mut hwc = Vec::new();
        let mut sums = [[0.0; 3]; 2];
        for p in 0..h * w {
            let class = if p % 2 == 0 { 1 } else { 2 };
            let center = if class == 1 { [5.0, 0.0, 0.0] } else { [0.0, 0.0, 5.0] };
            labels.push(class);
            for c in 0..3 {
                let v = center[c] + rng.random_range(-0.1..0.1);
                sums[class as usize - 1][c] += v;
                hwc.push(v);
            }
        }
        let f = FeatureMap::from_hwc(&hwc, h, w, 3).unwrap();
        let l = LabelMap::new(h, w, labels).unwrap();
        let p = fit_prototypes(&[f], &[l], &[1, 2, 3], 0.5).unwrap();
        assert_eq!(p.classes, vec![1, 2]);
        for k in 0..2 {
            let expect = normalized(&sums[k]).unwrap();
            for c in 0..3 {
                assert!((p.vectors[k][c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_mask_yields_no_prototypes() {
        let f = FeatureMap::zeros(2, 2, 2);
        let l = LabelMap::new(2, 2, vec![BACKGROUND; 4]).unwrap();
        let p = fit_prototypes(&[f.clone()], &[l], &[1], 0.5).unwrap();
        assert!(p.is_empty());
        assert!(matches!(segment(&f, &p), Err(SemanticError::NoPrototypes)));
    }

    #[test]
    fn segment_assigns_matching_class_and_background() {
        let protos = ClassPrototypes {
            classes: vec![2, 1],
            vectors: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            threshold: 0.5,
        };
        let f = FeatureMap::from_hwc(&[0.0, 1.0, 1.0, 0.0, -1.0, -1.0, 1.0, 1.0], 2, 2, 2).unwrap();
        let seg = segment(&f, &protos).unwrap();
        // the last pixel ties between classes 1 and 2 at cos = 0.707
        assert_eq!(seg.labels, vec![2, 1, BACKGROUND, 1]);
    }

    #[test]
    fn segment_is_scale_invariant() {
        let mut rng = Pcg64::seed_from_u64(8);
        let f = random_map(&mut rng, 4, 5, 5);
        let protos = ClassPrototypes {
            classes: vec![1, 2, 3],
            vectors: (0..3).map(|_| normalized(&random_map(&mut rng, 4, 1, 1).data).unwrap()).collect(),
            threshold: 0.2,
        };
        let mut scaled = f.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 9.0);
        assert_eq!(segment(&f, &protos).unwrap(), segment(&scaled, &protos).unwrap());
    }

    #[test]
    fn metric_hand_cases() {
        let gt = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let pred = LabelMap::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let r = seg_metrics(&pred, &gt, &[1]).unwrap();
        let c = r.class(1).unwrap().scores;
        assert_eq!(c.iou, 0.5);
        assert_eq!(c.dsc, 2.0 / 3.0);
        assert_eq!(c.recall, 0.5);
        assert_eq!(c.precision, 1.0);
        assert!(r.dsc_iou_deviation() < 1e-12);

        let same = seg_metrics(&gt, &gt, &[0, 1]).unwrap();
        for c in &same.per_class {
            assert_eq!(c.scores, SegScores { iou: 1.0, dsc: 1.0, recall: 1.0, precision: 1.0 });
        }
        let complement = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let r = seg_metrics(&complement, &gt, &[1]).unwrap();
        assert_eq!(r.class(1).unwrap().scores.iou, 0.0);
        assert_eq!(r.class(1).unwrap().scores.dsc, 0.0);
    }
}
