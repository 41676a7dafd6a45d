//! Versioned binary checkpoints.
//!
//! All integers and floats are little-endian. An *array* is a `u64` count
//! followed by that many `f64` values.
//!
//! ```text
//! magic            b"SSCK"
//! version          u16
//! config hash      8 bytes (digest of the embedded config)
//! config           u64 byte length, UTF-8 TOML
//! iteration        u64
//! stage            u8 (0 coarse, 1 fine)
//! stage iteration  u64
//! coarse capped    u8
//! scene extent     f64
//! cloud            u64 rows, u64 feature width, six arrays in group order
//! grid box         6 × f64 (lower corner, upper corner)
//! grid values      array
//! networks         u64 slice count, one array per slice
//! decoder          u8 present; if 1: u64 teacher channels, weight array, bias array
//! optimizers       cloud (6), grid (1), networks (n), decoder (0 or 2) states,
//!                  each: u64 step count, m array, v array
//! density stats    accum array, u64 count length, u32 counts
//! ```
//!
//! Loading parses the whole file before building anything, so a bad file
//! never yields a partial state.

use std::path::Path;

use rand::SeedableRng;
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::deformation::DeformationNet;
use crate::gaussians::{GaussianCloud, GradStats};
use crate::hexplane::HexPlaneField;
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::semantic::PointwiseDecoder;
use crate::training::{Stage, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u16 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("config hash mismatch: the embedded config does not match its recorded digest")]
    ConfigHash,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn array(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn adam(&mut self, s: &AdamState) {
        self.u64(s.step_count);
        self.array(&s.m);
        self.array(&s.v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let at = self.pos;
        let n = self.u64()?;
        // Every counted element occupies at least one byte.
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or(CheckpointError::Truncated(at))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn adam(&mut self, config: AdamConfig) -> Result<AdamState, CheckpointError> {
        let step_count = self.u64()?;
        let m = self.array()?;
        let v = self.array()?;
        if m.len() != v.len() {
            return Err(CheckpointError::Malformed("optimizer moments differ in length".into()));
        }
        Ok(AdamState {
            m,
            v,
            step_count,
            config,
        })
    }
}

fn malformed(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(m.into())
}

/// Serializes `state` together with the config it was trained under.
pub fn checkpoint_bytes(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.0.extend_from_slice(&cfg.hash());
    let text = cfg.to_toml();
    w.u64(text.len() as u64);
    w.0.extend_from_slice(text.as_bytes());
    w.u64(state.iteration);
    w.u8(match state.stage {
        Stage::Coarse => 0,
        Stage::Fine => 1,
    });
    w.u64(state.stage_iteration);
    w.u8(state.coarse_capped as u8);
    w.f64(state.scene_extent);
    w.u64(state.cloud.len() as u64);
    w.u64(state.cloud.feature_dim as u64);
    for g in state.cloud.groups() {
        w.array(g);
    }
    for v in state.field.aabb.0.iter().chain(&state.field.aabb.1) {
        w.f64(*v);
    }
    w.array(&state.field.data);
    let slices = state.net.params();
    w.u64(slices.len() as u64);
    for s in slices {
        w.array(s);
    }
    match &state.decoder {
        Some(d) => {
            w.u8(1);
            w.u64(d.teacher_channels() as u64);
            w.array(d.weight.data());
            w.array(d.bias.data());
        }
        None => w.u8(0),
    }
    for s in state
        .cloud_opt
        .iter()
        .chain(std::iter::once(&state.field_opt))
        .chain(&state.net_opt)
        .chain(&state.decoder_opt)
    {
        w.adam(s);
    }
    w.array(&state.grad_stats.accum);
    w.u64(state.grad_stats.count.len() as u64);
    for c in &state.grad_stats.count {
        w.0.extend_from_slice(&c.to_le_bytes());
    }
    w.0
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(cfg, state))?;
    Ok(())
}

/// Parses a checkpoint produced by [`checkpoint_bytes`].
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TrainConfig, TrainState), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let hash: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| malformed("config is not UTF-8"))?;
    let cfg = TrainConfig::from_toml(text).map_err(|e| malformed(e.to_string()))?;
    if cfg.hash() != hash {
        return Err(CheckpointError::ConfigHash);
    }
    let iteration = r.u64()?;
    let stage = match r.u8()? {
        0 => Stage::Coarse,
        1 => Stage::Fine,
        s => return Err(malformed(format!("unknown stage {s}"))),
    };
    let stage_iteration = r.u64()?;
    let coarse_capped = r.u8()? != 0;
    let scene_extent = r.f64()?;

    let rows = r.u64()? as usize;
    let feature_dim = r.u64()? as usize;
    let mut cloud = GaussianCloud::zeros(0, feature_dim);
    let widths = [3, 4, 3, 1, 3, feature_dim];
    for (g, w) in cloud.groups_mut().into_iter().zip(widths) {
        *g = r.array()?;
        if g.len() != rows * w {
            return Err(malformed("cloud group length does not match row count"));
        }
    }

    let mut corners = [0.0; 6];
    for c in &mut corners {
        *c = r.f64()?;
    }
    let grid = r.array()?;
    let field = HexPlaneField::from_parts(
        cfg.hexplane.clone(),
        ([corners[0], corners[1], corners[2]], [corners[3], corners[4], corners[5]]),
        grid,
    )
    .map_err(|e| malformed(e.to_string()))?;

    // The structure comes from the config; every value is then overwritten.
    let mut net = DeformationNet::new(cfg.deformation.clone(), field.output_dim(), feature_dim, &mut Pcg64::seed_from_u64(0))
        .map_err(|e| malformed(e.to_string()))?;
    let count = r.u64()? as usize;
    let mut slices = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        slices.push(r.array()?);
    }
    {
        let targets = net.params_mut();
        if targets.len() != slices.len() || targets.iter().zip(&slices).any(|(t, s)| t.len() != s.len()) {
            return Err(malformed("network shapes do not match the config"));
        }
        for (t, s) in targets.into_iter().zip(&slices) {
            t.copy_from_slice(s);
        }
    }

    let decoder = match r.u8()? {
        0 => None,
        1 => {
            let ct = r.u64()? as usize;
            let weight = r.array()?;
            let bias = r.array()?;
            if weight.len() != ct * feature_dim || bias.len() != ct {
                return Err(malformed("decoder shape does not match"));
            }
            Some(PointwiseDecoder {
                weight: Tensor::from_vec(&[ct, feature_dim], weight).map_err(|e| malformed(e.to_string()))?,
                bias: Tensor::from_vec(&[ct], bias).map_err(|e| malformed(e.to_string()))?,
            })
        }
        b => return Err(malformed(format!("bad decoder flag {b}"))),
    };

    let mut cloud_opt = Vec::with_capacity(6);
    for g in cloud.groups() {
        let s = r.adam(AdamConfig::GAUSSIAN)?;
        if s.m.len() != g.len() {
            return Err(malformed("cloud optimizer size mismatch"));
        }
        cloud_opt.push(s);
    }
    let field_opt = r.adam(AdamConfig::NETWORK)?;
    if field_opt.m.len() != field.data.len() {
        return Err(malformed("grid optimizer size mismatch"));
    }
    let mut net_opt = Vec::with_capacity(slices.len());
    for s in &slices {
        let st = r.adam(AdamConfig::NETWORK)?;
        if st.m.len() != s.len() {
            return Err(malformed("network optimizer size mismatch"));
        }
        net_opt.push(st);
    }
    let mut decoder_opt = Vec::new();
    if let Some(d) = &decoder {
        for p in d.params() {
            let st = r.adam(AdamConfig::NETWORK)?;
            if st.m.len() != p.len() {
                return Err(malformed("decoder optimizer size mismatch"));
            }
            decoder_opt.push(st);
        }
    }

    let accum = r.array()?;
    let n = r.len()?;
    let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
    let count: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if accum.len() != rows || count.len() != rows {
        return Err(malformed("density statistics size mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((
        cfg,
        TrainState {
            cloud,
            field,
            net,
            decoder,
            cloud_opt,
            field_opt,
            net_opt,
            decoder_opt,
            grad_stats: GradStats { accum, count },
            stage,
            stage_iteration,
            iteration,
            scene_extent,
            coarse_capped,
        },
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState), CheckpointError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
