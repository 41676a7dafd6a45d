//! Dense math substrate: flat row-major tensors, fully-connected layers with
//! hand-written backward passes, Adam, and the exponential learning-rate
//! schedule used by every parameter group.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("stale activation cache (cached for parameter version {cached}, network is at {current})")]
    StaleCache { cached: u64, current: u64 },
    #[error("non-finite gradient {value} at index {index}; step aborted")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericsError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NumericsError::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix; a vector is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Length of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    activation: Activation,
}

impl LinearLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    /// He/Kaiming uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn kaiming_uniform<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(input, output, activation);
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in layer.weight.data_mut() {
            *w = dist.sample(rng);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Gradients for one layer, same shapes as the layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// Flat views in the same order as [`Mlp::params`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect()
    }
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    version: u64,
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
}

/// A stack of linear layers. `version` changes whenever parameters are
/// handed out mutably so that caches from older forwards are rejected.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    version: u64,
}

/// Equality is on the layers only; the cache version is bookkeeping.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self, NumericsError> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NumericsError::Dimension(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LinearLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::output_dim)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter slices: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
            .collect()
    }

    /// Forward a batch `[B × in]` (or a single vector `[in]`).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache), NumericsError> {
        if x.cols() != self.input_dim() {
            return Err(NumericsError::Dimension(format!(
                "input width {} but first layer expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let batch = x.rows();
        let single = x.shape().len() <= 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let (inp, out) = (layer.input_dim(), layer.output_dim());
            let mut z = vec![0.0; batch * out];
            for row in z.chunks_exact_mut(out) {
                row.copy_from_slice(layer.bias.data());
            }
            gemm(
                batch,
                inp,
                out,
                current.data(),
                inp,
                1,
                layer.weight.data(),
                1,
                inp,
                &mut z,
                true,
            );
            let z = Tensor::from_vec(&[batch, out], z)?;
            let mut a = z.clone();
            if layer.activation == Activation::Relu {
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            inputs.push(current);
            preacts.push(z);
            current = a;
        }
        if single {
            current.shape = vec![self.output_dim()];
        }
        Ok((
            current,
            MlpCache {
                version: self.version,
                inputs,
                preacts,
            },
        ))
    }

    /// Backward pass; returns `dL/dx` (same shape as the forward input) and
    /// parameter gradients.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dl_dy: &Tensor,
    ) -> Result<(Tensor, MlpGrads), NumericsError> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(NumericsError::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        let batch = cache.inputs.first().map_or(0, Tensor::rows);
        if dl_dy.len() != batch * self.output_dim() {
            return Err(NumericsError::Dimension(format!(
                "upstream gradient has {} values, expected {}",
                dl_dy.len(),
                batch * self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = dl_dy.data().to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (inp, out) = (layer.input_dim(), layer.output_dim());
            let z = &cache.preacts[li];
            if layer.activation == Activation::Relu {
                for (g, &zv) in upstream.iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let x = &cache.inputs[li];
            // dW = dZᵀ · X
            let mut dw = vec![0.0; out * inp];
            gemm(out, batch, inp, &upstream, 1, out, x.data(), inp, 1, &mut dw, false);
            let mut db = vec![0.0; out];
            for row in upstream.chunks_exact(out) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            // dX = dZ · W
            let mut dx = vec![0.0; batch * inp];
            gemm(
                batch,
                out,
                inp,
                &upstream,
                out,
                1,
                layer.weight.data(),
                inp,
                1,
                &mut dx,
                false,
            );
            grads.push(LayerGrad {
                weight: Tensor::from_vec(&[out, inp], dw)?,
                bias: Tensor::from_vec(&[out], db)?,
            });
            upstream = dx;
        }
        grads.reverse();
        let input_shape = cache.inputs[0].shape().to_vec();
        let dx = if dl_dy.shape().len() <= 1 {
            Tensor::from_vec(&[self.input_dim()], upstream)?
        } else {
            Tensor::from_vec(&input_shape, upstream)?
        };
        Ok((dx, MlpGrads { layers: grads }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Defaults for per-Gaussian parameters.
    pub const GAUSSIAN: Self = Self {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-15,
    };
    /// Defaults for network and grid parameters.
    pub const NETWORK: Self = Self {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuild moments for a reshuffled set of rows. `None` rows start
    /// from zero moments.
    pub fn remap_rows(&mut self, row_len: usize, origins: &[Option<usize>]) {
        self.m = remap_rows(&self.m, row_len, origins);
        self.v = remap_rows(&self.v, row_len, origins);
    }

    pub fn reset_moments(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}

/// Gathers `row_len`-wide rows by origin; `None` produces a zero row.
pub fn remap_rows(data: &[f64], row_len: usize, origins: &[Option<usize>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(origins.len() * row_len);
    for origin in origins {
        match origin {
            Some(i) => out.extend_from_slice(&data[i * row_len..(i + 1) * row_len]),
            None => out.extend(std::iter::repeat_n(0.0, row_len)),
        }
    }
    out
}

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero are left untouched (parameter and
/// both moments), so parameters that received no signal this step do not
/// drift on stale momentum. The step counter advances regardless.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(NumericsError::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumericsError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(NumericsError::NonFiniteGradient { index, value });
    }
    state.step_count += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if g == 0.0 {
            continue;
        }
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Exponential (log-linear) decay from `lr_init` to `lr_final` over
/// `max_steps`, with an optional sine warm-up ramp starting at `delay_mult`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub max_steps: u64,
    #[serde(default = "one")]
    pub delay_mult: f64,
    #[serde(default)]
    pub delay_steps: u64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn new(lr_init: f64, lr_final: f64, max_steps: u64) -> Self {
        Self {
            lr_init,
            lr_final,
            max_steps,
            delay_mult: 1.0,
            delay_steps: 0,
        }
    }

    pub fn with_delay(mut self, delay_mult: f64, delay_steps: u64) -> Self {
        self.delay_mult = delay_mult;
        self.delay_steps = delay_steps;
        self
    }

    /// A schedule that stays at `lr` forever.
    pub fn constant(lr: f64) -> Self {
        Self::new(lr, lr, 1)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(NumericsError::Config(format!(
                "learning rates must be positive (init {}, final {})",
                self.lr_init, self.lr_final
            )));
        }
        if !(self.delay_mult > 0.0 && self.delay_mult <= 1.0) {
            return Err(NumericsError::Config(format!(
                "delay multiplier must lie in (0, 1], got {}",
                self.delay_mult
            )));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, t: u64) -> Result<f64, NumericsError> {
        self.validate()?;
        let progress = if self.max_steps == 0 {
            1.0
        } else {
            (t.min(self.max_steps) as f64) / self.max_steps as f64
        };
        let log_lr = self.lr_init.ln() * (1.0 - progress) + self.lr_final.ln() * progress;
        let ramp = if self.delay_steps > 0 {
            let x = (t as f64 / self.delay_steps as f64).clamp(0.0, 1.0);
            self.delay_mult + (1.0 - self.delay_mult) * (0.5 * std::f64::consts::PI * x).sin()
        } else {
            1.0
        };
        // Pin the endpoints so the decayed value is exactly lr_final.
        let lr = if progress >= 1.0 {
            self.lr_final
        } else if progress == 0.0 {
            self.lr_init
        } else {
            log_lr.exp()
        };
        Ok(ramp * lr)
    }
}
