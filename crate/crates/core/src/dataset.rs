//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   images/000000.png      RGB (8 or 16 bit)
//!   depth/000000.png       16-bit depth, multiplied by `meters_per_unit`
//!   depth/000000.feat      or raw float depth in the feature container (C = 1)
//!   masks/000000.png       optional, nonzero = valid
//!   features/000000.feat   optional teacher features
//!   labels/000000.png      optional per-pixel class ids (0 = background)
//!   poses_bounds.txt       one row of 17 numbers per frame
//!   times.txt              optional, one timestamp in [0, 1] per frame
//! ```
//!
//! Each pose row is a row-major 3×5 block followed by two depth bounds. The
//! first three columns are the camera-to-world rotation with axes ordered
//! (down, right, backward), the fourth the camera centre, the fifth
//! `(height, width, focal)`. They are converted to the x-right, y-down,
//! z-forward convention used by the renderer, with the principal point at
//! the image centre `((W − 1)/2, (H − 1)/2)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

use crate::gaussians::{Camera, CameraFrame, Intrinsics};
use crate::linalg::{rigid_inverse, IDENTITY4};
use crate::semantic::{load_feature_map, FeatureMap, LabelMap, SemanticError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("dataset is inconsistent: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    /// Scale applied to 16-bit depth PNG values.
    pub meters_per_unit: f64,
    /// Ignore pose rotations/translations and place every camera at the
    /// world origin looking down +z.
    pub identity_poses: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            meters_per_unit: 1.0 / 1000.0,
            identity_poses: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<CameraFrame>,
    pub has_features: bool,
    pub has_labels: bool,
}

impl Dataset {
    /// Sorted distinct nonzero label ids across all frames.
    pub fn classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .frames
            .iter()
            .filter_map(|f| f.labels.as_ref())
            .flat_map(|l| l.labels.iter().copied())
            .filter(|&l| l != 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

/// `(train, test)` index lists; test frames are those with
/// `i ≡ offset (mod every)`. `every = 0` keeps everything for training.
pub fn split_every(count: usize, every: usize, offset: usize) -> (Vec<usize>, Vec<usize>) {
    if every == 0 {
        return ((0..count).collect(), Vec::new());
    }
    (0..count).partition(|&i| i % every != offset % every)
}

/// Camera-to-world matrix (renderer convention) → pose row.
pub fn pose_row(camera: &Camera) -> [f64; 17] {
    let c2w = camera.camera_to_world();
    let mut row = [0.0; 17];
    for r in 0..3 {
        let cols = [c2w[r][1], c2w[r][0], -c2w[r][2], c2w[r][3], 0.0];
        row[r * 5..r * 5 + 5].copy_from_slice(&cols);
    }
    row[4] = camera.height as f64;
    row[9] = camera.width as f64;
    row[14] = camera.intrinsics.fx;
    row[15] = 0.01;
    row[16] = 100.0;
    row
}

/// Parses one pose row into a camera.
pub fn camera_from_row(row: &[f64], identity: bool) -> Result<Camera, String> {
    if row.len() != 17 {
        return Err(format!("expected 17 values, found {}", row.len()));
    }
    let (h, w, f) = (row[4], row[9], row[14]);
    if !(h >= 1.0 && w >= 1.0 && h.fract() == 0.0 && w.fract() == 0.0) || !(f > 0.0) {
        return Err(format!("invalid height/width/focal ({h}, {w}, {f})"));
    }
    let world_to_camera = if identity {
        IDENTITY4
    } else {
        let mut c2w = IDENTITY4;
        for r in 0..3 {
            let b = &row[r * 5..r * 5 + 5];
            c2w[r] = [b[1], b[0], -b[2], b[3]];
        }
        rigid_inverse(&c2w)
    };
    let camera = Camera {
        intrinsics: Intrinsics {
            fx: f,
            fy: f,
            cx: (w - 1.0) / 2.0,
            cy: (h - 1.0) / 2.0,
        },
        world_to_camera,
        width: w as usize,
        height: h as usize,
    };
    camera.validate().map_err(|e| e.to_string())?;
    Ok(camera)
}

fn read_poses(path: &Path, identity: bool) -> Result<Vec<Camera>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| fmt_err(path, format!("line {}: {e}", ln + 1)))?;
        out.push(camera_from_row(&vals, identity).map_err(|m| fmt_err(path, format!("line {}: {m}", ln + 1)))?);
    }
    Ok(out)
}

fn read_times(path: &Path, count: usize) -> Result<Vec<f64>, DatasetError> {
    if !path.exists() {
        return Ok((0..count)
            .map(|i| if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 })
            .collect());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let times: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let times = times.map_err(|e| fmt_err(path, e.to_string()))?;
    if times.len() != count {
        return Err(DatasetError::Inconsistent(format!("{} timestamps for {count} frames", times.len())));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(fmt_err(path, format!("timestamp {t} outside [0, 1]")));
    }
    Ok(times)
}

fn count_files(dir: &Path, ext: &str) -> Result<usize, DatasetError> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut n = 0;
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        if e.path().extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize), DatasetError> {
    let img = image::open(path).map_err(|e| fmt_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.to_rgb32f().into_raw().into_iter().map(f64::from).collect();
    Ok((data, w, h))
}

fn load_gray16(path: &Path) -> Result<(Vec<u16>, usize, usize), DatasetError> {
    let img = image::open(path).map_err(|e| fmt_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.to_luma16().into_raw(), w, h))
}

fn load_gray8_or_16_ids(path: &Path) -> Result<(Vec<u32>, usize, usize), DatasetError> {
    let img = image::open(path).map_err(|e| fmt_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => other.to_luma16().into_raw().into_iter().map(u32::from).collect(),
    };
    Ok((ids, w, h))
}

fn sem_err(path: &Path, e: SemanticError) -> DatasetError {
    fmt_err(path, e.to_string())
}

/// Loads every frame under `root`.
pub fn load_dataset(root: &Path, opts: &DatasetOptions) -> Result<Dataset, DatasetError> {
    let images = root.join("images");
    let count = count_files(&images, "png")?;
    if count == 0 {
        return Err(DatasetError::Inconsistent(format!("no images under {}", images.display())));
    }
    let poses_path = root.join("poses_bounds.txt");
    let cameras = read_poses(&poses_path, opts.identity_poses)?;
    if cameras.len() != count {
        return Err(DatasetError::Inconsistent(format!("{} pose rows for {count} images", cameras.len())));
    }
    let times = read_times(&root.join("times.txt"), count)?;
    let depth_dir = root.join("depth");
    let mask_dir = root.join("masks");
    let feat_dir = root.join("features");
    let label_dir = root.join("labels");
    for (dir, ext) in [(&mask_dir, "png"), (&feat_dir, "feat"), (&label_dir, "png")] {
        let n = count_files(dir, ext)?;
        if n != 0 && n != count {
            return Err(DatasetError::Inconsistent(format!("{} has {n} files for {count} frames", dir.display())));
        }
    }
    let depth_count = count_files(&depth_dir, "png")? + count_files(&depth_dir, "feat")?;
    if depth_count != count {
        return Err(DatasetError::Inconsistent(format!("{} depth maps for {count} frames", depth_count)));
    }
    let has_masks = count_files(&mask_dir, "png")? > 0;
    let has_features = count_files(&feat_dir, "feat")? > 0;
    let has_labels = count_files(&label_dir, "png")? > 0;

    let mut frames = Vec::with_capacity(count);
    for (i, (camera, time)) in cameras.into_iter().zip(times).enumerate() {
        let ipath = images.join(frame_name(i, "png"));
        let (image, w, h) = load_rgb(&ipath)?;
        if (w, h) != (camera.width, camera.height) {
            return Err(fmt_err(&ipath, format!("image is {w}×{h} but pose says {}×{}", camera.width, camera.height)));
        }
        let dpng = depth_dir.join(frame_name(i, "png"));
        let dfeat = depth_dir.join(frame_name(i, "feat"));
        let depth = if dfeat.exists() {
            let m = load_feature_map(&dfeat).map_err(|e| sem_err(&dfeat, e))?;
            if (m.channels, m.height, m.width) != (1, h, w) {
                return Err(fmt_err(&dfeat, "depth map must be 1×H×W"));
            }
            m.data
        } else {
            let (raw, dw, dh) = load_gray16(&dpng)?;
            if (dw, dh) != (w, h) {
                return Err(fmt_err(&dpng, "depth size differs from image"));
            }
            raw.into_iter().map(|v| f64::from(v) * opts.meters_per_unit).collect()
        };
        let mask = if has_masks {
            let mpath = mask_dir.join(frame_name(i, "png"));
            let (m, mw, mh) = load_gray8_or_16_ids(&mpath)?;
            if (mw, mh) != (w, h) {
                return Err(fmt_err(&mpath, "mask size differs from image"));
            }
            m.into_iter().map(|v| v != 0).collect()
        } else {
            vec![true; w * h]
        };
        let features = if has_features {
            let fpath = feat_dir.join(frame_name(i, "feat"));
            Some(load_feature_map(&fpath).map_err(|e| sem_err(&fpath, e))?)
        } else {
            None
        };
        let labels = if has_labels {
            let lpath = label_dir.join(frame_name(i, "png"));
            let (l, lw, lh) = load_gray8_or_16_ids(&lpath)?;
            Some(LabelMap::new(lh, lw, l).map_err(|e| sem_err(&lpath, e))?)
        } else {
            None
        };
        let frame = CameraFrame {
            camera,
            time,
            image,
            depth,
            mask,
            features,
            labels,
        };
        frame.validate().map_err(|e| fmt_err(&ipath, e.to_string()))?;
        frames.push(frame);
    }
    if let Some(f0) = frames.first().and_then(|f| f.features.as_ref()) {
        if frames.iter().any(|f| f.features.as_ref().is_some_and(|m| m.channels != f0.channels)) {
            return Err(DatasetError::Inconsistent("feature maps disagree on channel count".into()));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        frames,
        has_features,
        has_labels,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, data: &[f64], width: usize, height: usize) -> Result<(), DatasetError> {
    let raw: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).ok_or_else(|| fmt_err(path, "buffer size"))?;
    img.save(path).map_err(|e| fmt_err(path, e.to_string()))
}

/// 16-bit depth PNG; values are divided by `meters_per_unit` and rounded.
pub fn save_depth_png(path: &Path, depth: &[f64], width: usize, height: usize, meters_per_unit: f64) -> Result<(), DatasetError> {
    let raw: Vec<u16> = depth
        .iter()
        .map(|&d| (d / meters_per_unit).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).ok_or_else(|| fmt_err(path, "buffer size"))?;
    img.save(path).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn save_gray8_png(path: &Path, values: &[u8], width: usize, height: usize) -> Result<(), DatasetError> {
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec()).ok_or_else(|| fmt_err(path, "buffer size"))?;
    img.save(path).map_err(|e| fmt_err(path, e.to_string()))
}

/// Writes frames in the layout documented at the top of this module. Depth
/// is stored losslessly as a single-channel feature file.
pub fn write_dataset(root: &Path, frames: &[CameraFrame]) -> Result<(), DatasetError> {
    for sub in ["images", "depth", "masks", "features", "labels"] {
        fs::create_dir_all(root.join(sub)).map_err(io_err(root))?;
    }
    let mut poses = String::new();
    let mut times = String::new();
    for (i, f) in frames.iter().enumerate() {
        let (w, h) = (f.width(), f.height());
        save_rgb_png(&root.join("images").join(frame_name(i, "png")), &f.image, w, h)?;
        let dpath = root.join("depth").join(frame_name(i, "feat"));
        FeatureMap::new(1, h, w, f.depth.clone())
            .map_err(|e| sem_err(&dpath, e))?
            .write(&dpath)
            .map_err(|e| sem_err(&dpath, e))?;
        let mask: Vec<u8> = f.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        save_gray8_png(&root.join("masks").join(frame_name(i, "png")), &mask, w, h)?;
        if let Some(feat) = &f.features {
            let p = root.join("features").join(frame_name(i, "feat"));
            feat.write(&p).map_err(|e| sem_err(&p, e))?;
        }
        if let Some(l) = &f.labels {
            let p = root.join("labels").join(frame_name(i, "png"));
            let ids: Vec<u8> = l.labels.iter().map(|&v| v.min(255) as u8).collect();
            save_gray8_png(&p, &ids, l.width, l.height)?;
        }
        let row = pose_row(&f.camera);
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        poses.push_str(&line.join(" "));
        poses.push('\n');
        times.push_str(&format!("{:.17e}\n", f.time));
    }
    let p = root.join("poses_bounds.txt");
    fs::write(&p, poses).map_err(io_err(&p))?;
    let p = root.join("times.txt");
    fs::write(&p, times).map_err(io_err(&p))?;
    for sub in ["features", "labels"] {
        let dir = root.join(sub);
        if fs::read_dir(&dir).map_err(io_err(&dir))?.next().is_none() {
            fs::remove_dir(&dir).map_err(io_err(&dir))?;
        }
    }
    Ok(())
}
