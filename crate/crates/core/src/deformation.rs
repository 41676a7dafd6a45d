//! Time-dependent deformation of the canonical cloud: latent → hidden state →
//! four geometric branches (position, rotation, scale, opacity) plus a
//! semantic update driven by the concatenated branch features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussians::GaussianCloud;
use crate::hexplane::HexPlaneField;
use crate::numerics::{Activation, LinearLayer, Mlp, MlpCache, MlpGrads, NumericsError, Tensor};

/// Output widths of the position, rotation, scale and opacity heads.
pub const BRANCH_DIMS: [usize; 4] = [3, 4, 3, 1];

#[derive(Debug, Error)]
pub enum DeformationError {
    #[error("deformation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Hidden width `W`; branch features are `W/2` wide.
    pub width: usize,
    /// Number of layers in the latent decoder.
    pub depth: usize,
    pub enable_hexplane: bool,
    pub enable_f_feat: bool,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 8,
            enable_hexplane: true,
            enable_f_feat: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNet {
    pub config: DeformationConfig,
    /// Latent → hidden state, `depth` relu layers.
    pub f_out: Mlp,
    /// Per-branch feature extractors, `W → W/2 → W/2`, relu.
    pub extractors: [Mlp; 4],
    /// Per-branch linear heads `W/2 → d_g`, zero-initialized.
    pub heads: [Mlp; 4],
    /// Concatenated branch features `4·W/2 → W → N`; relu hidden layer,
    /// zero-initialized output layer.
    pub f_feat: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGrads {
    pub f_out: MlpGrads,
    pub extractors: [MlpGrads; 4],
    pub heads: [MlpGrads; 4],
    pub f_feat: MlpGrads,
}

impl DeformationGrads {
    pub fn zeros_like(net: &DeformationNet) -> Self {
        Self {
            f_out: MlpGrads::zeros_like(&net.f_out),
            extractors: std::array::from_fn(|g| MlpGrads::zeros_like(&net.extractors[g])),
            heads: std::array::from_fn(|g| MlpGrads::zeros_like(&net.heads[g])),
            f_feat: MlpGrads::zeros_like(&net.f_feat),
        }
    }

    /// Flat views in the order of [`DeformationNet::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.f_out.slices();
        for g in 0..4 {
            out.extend(self.extractors[g].slices());
            out.extend(self.heads[g].slices());
        }
        out.extend(self.f_feat.slices());
        out
    }
}

/// Intermediate state of [`DeformationNet::forward`].
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// `[K × W]`
    pub hidden: Tensor,
    /// `[K × d_g]` per branch.
    pub deltas: [Tensor; 4],
    /// `[K × W/2]` per branch.
    pub branch_features: [Tensor; 4],
    /// `[K × N]`, zero when the semantic update is disabled.
    pub delta_z: Tensor,
}

#[derive(Clone, Debug)]
pub struct NetCache {
    out: MlpCache,
    extractors: Vec<MlpCache>,
    heads: Vec<MlpCache>,
    feat: Option<MlpCache>,
    rows: usize,
}

impl DeformationNet {
    /// Kaiming-uniform hidden layers; zero heads and zero semantic output.
    pub fn new<R: Rng + ?Sized>(
        config: DeformationConfig,
        latent_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self, DeformationError> {
        let w = config.width;
        if w < 2 || w % 2 != 0 {
            return Err(DeformationError::Config(format!("width must be even and ≥ 2, got {w}")));
        }
        if config.depth == 0 || latent_dim == 0 {
            return Err(DeformationError::Config("depth and latent width must be positive".into()));
        }
        let half = w / 2;
        let mut out_layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let input = if i == 0 { latent_dim } else { w };
            out_layers.push(LinearLayer::kaiming_uniform(input, w, Activation::Relu, rng));
        }
        let f_out = Mlp::new(out_layers)?;
        let extractors = std::array::from_fn(|_| {
            Mlp::new(vec![
                LinearLayer::kaiming_uniform(w, half, Activation::Relu, rng),
                LinearLayer::kaiming_uniform(half, half, Activation::Relu, rng),
            ])
            .expect("matching dims")
        });
        let heads = std::array::from_fn(|g| {
            Mlp::new(vec![LinearLayer::zeros(half, BRANCH_DIMS[g], Activation::None)]).expect("single layer")
        });
        let f_feat = Mlp::new(vec![
            LinearLayer::kaiming_uniform(4 * half, w, Activation::Relu, rng),
            LinearLayer::zeros(w, feature_dim, Activation::None),
        ])?;
        Ok(Self {
            config,
            f_out,
            extractors,
            heads,
            f_feat,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.f_out.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.f_feat.output_dim()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// All parameter slices, network by network: `f_out`, then per branch
    /// extractor and head, then `f_feat`.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.f_out.params();
        for g in 0..4 {
            out.extend(self.extractors[g].params());
            out.extend(self.heads[g].params());
        }
        out.extend(self.f_feat.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            f_out,
            extractors,
            heads,
            f_feat,
            ..
        } = self;
        let mut out = f_out.params_mut();
        for (e, h) in extractors.iter_mut().zip(heads.iter_mut()) {
            out.extend(e.params_mut());
            out.extend(h.params_mut());
        }
        out.extend(f_feat.params_mut());
        out
    }

    /// `h = f_out(latent)` for a `[K × latent_dim]` batch.
    pub fn decode_hidden(&self, latent: &Tensor) -> Result<Tensor, DeformationError> {
        Ok(self.f_out.forward(latent)?.0)
    }

    /// Branch features `h_g` and deltas `Δg` for a `[K × W]` hidden batch.
    pub fn decode_branches(&self, hidden: &Tensor) -> Result<([Tensor; 4], [Tensor; 4]), DeformationError> {
        let mut feats = Vec::with_capacity(4);
        let mut deltas = Vec::with_capacity(4);
        for g in 0..4 {
            let (hg, _) = self.extractors[g].forward(hidden)?;
            deltas.push(self.heads[g].forward(&hg)?.0);
            feats.push(hg);
        }
        Ok((to_array(deltas), to_array(feats)))
    }

    /// `z' = z + f_feat([h_μ ‖ h_R ‖ h_S ‖ h_o])`; `z` unchanged when the
    /// semantic update is disabled.
    pub fn update_semantics(&self, branch_features: &[Tensor; 4], z: &Tensor) -> Result<Tensor, DeformationError> {
        if !self.config.enable_f_feat {
            return Ok(z.clone());
        }
        let u = concat_columns(branch_features);
        let (dz, _) = self.f_feat.forward(&u)?;
        let mut out = z.clone();
        if out.len() != dz.len() {
            return Err(DeformationError::Config(format!(
                "feature width {} but semantic update produces {}",
                z.cols(),
                dz.cols()
            )));
        }
        for (o, d) in out.data_mut().iter_mut().zip(dz.data()) {
            *o += d;
        }
        Ok(out)
    }

    /// Full batched pass over latents `[K × latent_dim]`.
    pub fn forward(&self, latent: &Tensor) -> Result<(BranchOutputs, NetCache), DeformationError> {
        let rows = latent.rows();
        let (hidden, out_cache) = self.f_out.forward(latent)?;
        let mut feats = Vec::with_capacity(4);
        let mut deltas = Vec::with_capacity(4);
        let mut ext_caches = Vec::with_capacity(4);
        let mut head_caches = Vec::with_capacity(4);
        for g in 0..4 {
            let (hg, ec) = self.extractors[g].forward(&hidden)?;
            let (dg, hc) = self.heads[g].forward(&hg)?;
            feats.push(hg);
            deltas.push(dg);
            ext_caches.push(ec);
            head_caches.push(hc);
        }
        let feats: [Tensor; 4] = to_array(feats);
        let (delta_z, feat_cache) = if self.config.enable_f_feat {
            let (dz, fc) = self.f_feat.forward(&concat_columns(&feats))?;
            (dz, Some(fc))
        } else {
            (Tensor::zeros(&[rows, self.feature_dim()]), None)
        };
        Ok((
            BranchOutputs {
                hidden,
                deltas: to_array(deltas),
                branch_features: feats,
                delta_z,
            },
            NetCache {
                out: out_cache,
                extractors: ext_caches,
                heads: head_caches,
                feat: feat_cache,
                rows,
            },
        ))
    }

    /// Backward of [`Self::forward`] given gradients of the four deltas and
    /// of `Δz`; returns `dL/d latent` and parameter gradients.
    pub fn backward(
        &self,
        cache: &NetCache,
        d_deltas: &[Tensor; 4],
        d_delta_z: &Tensor,
    ) -> Result<(Tensor, DeformationGrads), DeformationError> {
        let half = self.width() / 2;
        let rows = cache.rows;
        let mut d_feats: Vec<Vec<f64>> = vec![vec![0.0; rows * half]; 4];
        let f_feat_grads = match &cache.feat {
            Some(fc) => {
                let (du, grads) = self.f_feat.backward(fc, d_delta_z)?;
                for (r, row) in du.data().chunks_exact(4 * half).enumerate() {
                    for g in 0..4 {
                        d_feats[g][r * half..(r + 1) * half].copy_from_slice(&row[g * half..(g + 1) * half]);
                    }
                }
                grads
            }
            None => MlpGrads::zeros_like(&self.f_feat),
        };
        let mut d_hidden = vec![0.0; rows * self.width()];
        let mut ext_grads = Vec::with_capacity(4);
        let mut head_grads = Vec::with_capacity(4);
        for g in 0..4 {
            let (dh_g, hg) = self.heads[g].backward(&cache.heads[g], &d_deltas[g])?;
            for (a, b) in d_feats[g].iter_mut().zip(dh_g.data()) {
                *a += b;
            }
            let d_feat = Tensor::from_vec(&[rows, half], std::mem::take(&mut d_feats[g]))?;
            let (dh, eg) = self.extractors[g].backward(&cache.extractors[g], &d_feat)?;
            for (a, b) in d_hidden.iter_mut().zip(dh.data()) {
                *a += b;
            }
            ext_grads.push(eg);
            head_grads.push(hg);
        }
        let d_hidden = Tensor::from_vec(&[rows, self.width()], d_hidden)?;
        let (d_latent, out_grads) = self.f_out.backward(&cache.out, &d_hidden)?;
        Ok((
            d_latent,
            DeformationGrads {
                f_out: out_grads,
                extractors: to_array(ext_grads),
                heads: to_array(head_grads),
                f_feat: f_feat_grads,
            },
        ))
    }
}

fn to_array<T>(v: Vec<T>) -> [T; 4] {
    v.try_into().ok().expect("exactly four branches")
}

fn concat_columns(parts: &[Tensor; 4]) -> Tensor {
    let rows = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(&[rows, total], out).expect("consistent widths")
}

/// Everything needed to push snapshot gradients back to the canonical cloud,
/// the grids and the networks.
#[derive(Clone, Debug)]
pub struct DeformCache {
    net: NetCache,
    time: f64,
    positions: Vec<f64>,
    use_field: bool,
}

/// Gradients produced by [`deform_backward`].
#[derive(Clone, Debug)]
pub struct DeformBackward {
    /// Gradient with respect to the canonical raw parameters.
    pub cloud: GaussianCloud,
    pub net: DeformationGrads,
    /// Same layout as [`HexPlaneField::data`].
    pub field: Vec<f64>,
}

/// Deformed raw parameters at time `t`. Deltas are added to the raw
/// (pre-activation) position, quaternion, log-scales and opacity logit;
/// colors pass through; features get the semantic update.
pub fn deform(
    cloud: &GaussianCloud,
    field: &HexPlaneField,
    net: &DeformationNet,
    t: f64,
) -> Result<(GaussianCloud, DeformCache), DeformationError> {
    let k = cloud.len();
    let latent_dim = net.latent_dim();
    let use_field = net.config.enable_hexplane;
    let latent = if use_field {
        if field.output_dim() != latent_dim {
            return Err(DeformationError::Config(format!(
                "grid latent width {} but decoder expects {latent_dim}",
                field.output_dim()
            )));
        }
        field.query_batch(&cloud.positions, t)
    } else {
        vec![0.0; k * latent_dim]
    };
    let latent = Tensor::from_vec(&[k, latent_dim], latent)?;
    let (out, cache) = net.forward(&latent)?;
    let mut snap = cloud.clone();
    let targets = [
        &mut snap.positions,
        &mut snap.rotations,
        &mut snap.log_scales,
        &mut snap.opacity_logits,
    ];
    for (dst, delta) in targets.into_iter().zip(&out.deltas) {
        for (a, b) in dst.iter_mut().zip(delta.data()) {
            *a += b;
        }
    }
    if net.config.enable_f_feat {
        if out.delta_z.cols() != cloud.feature_dim {
            return Err(DeformationError::Config(format!(
                "cloud feature width {} but semantic update produces {}",
                cloud.feature_dim,
                out.delta_z.cols()
            )));
        }
        for (a, b) in snap.features.iter_mut().zip(out.delta_z.data()) {
            *a += b;
        }
    }
    Ok((
        snap,
        DeformCache {
            net: cache,
            time: t,
            positions: cloud.positions.clone(),
            use_field,
        },
    ))
}

/// Chains `d_snapshot` (gradients of the deformed raw parameters) back
/// through [`deform`].
pub fn deform_backward(
    field: &HexPlaneField,
    net: &DeformationNet,
    cache: &DeformCache,
    d_snapshot: &GaussianCloud,
) -> Result<DeformBackward, DeformationError> {
    let k = d_snapshot.len();
    let d_deltas = [
        Tensor::from_vec(&[k, 3], d_snapshot.positions.clone())?,
        Tensor::from_vec(&[k, 4], d_snapshot.rotations.clone())?,
        Tensor::from_vec(&[k, 3], d_snapshot.log_scales.clone())?,
        Tensor::from_vec(&[k, 1], d_snapshot.opacity_logits.clone())?,
    ];
    let d_dz = Tensor::from_vec(&[k, d_snapshot.feature_dim], d_snapshot.features.clone())?;
    let (d_latent, net_grads) = net.backward(&cache.net, &d_deltas, &d_dz)?;
    let mut d_cloud = d_snapshot.clone();
    let mut d_field = vec![0.0; field.data.len()];
    if cache.use_field {
        let ld = net.latent_dim();
        for (i, row) in d_latent.data().chunks_exact(ld).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = &cache.positions[3 * i..3 * i + 3];
            let d_mu = field.query_backward(&[p[0], p[1], p[2]], cache.time, row, &mut d_field);
            for a in 0..3 {
                d_cloud.positions[3 * i + a] += d_mu[a];
            }
        }
    }
    Ok(DeformBackward {
        cloud: d_cloud,
        net: net_grads,
        field: d_field,
    })
}
