//! Layer kinds with hand-derived forward and backward passes.
//!
//! A [`Layer`] owns its trainable [`Param`]s (value plus accumulated
//! gradient), any non-trainable buffers (BatchNorm running statistics) and
//! the cache its last forward pass left behind for backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{column_moments, matmul, matmul_nt, matmul_tn, rng_normal, Matrix, Rng};

/// Self-normalizing SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Self-normalizing SELU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Selu,
    Sigmoid,
    Relu,
    /// Row-wise.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        dim: usize,
        eps: f64,
        momentum: f64,
    },
    Dropout {
        dim: usize,
        rate: f64,
    },
    Activation {
        activation: Activation,
        dim: usize,
    },
    /// Valid cross-correlation with stride 1. Input columns are laid out
    /// channel-major: `in_channels` blocks of `in_len` positions.
    Conv1D {
        in_channels: usize,
        in_len: usize,
        out_channels: usize,
        kernel_size: usize,
    },
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense { in_dim, out_dim }
    }

    pub fn batch_norm(dim: usize) -> Self {
        LayerSpec::BatchNorm {
            dim,
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        LayerSpec::Dropout { dim, rate }
    }

    pub fn activation(activation: Activation, dim: usize) -> Self {
        LayerSpec::Activation { activation, dim }
    }

    pub fn conv1d(in_channels: usize, in_len: usize, out_channels: usize, kernel_size: usize) -> Self {
        LayerSpec::Conv1D {
            in_channels,
            in_len,
            out_channels,
            kernel_size,
        }
    }

    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::BatchNorm { dim, .. } | LayerSpec::Dropout { dim, .. } | LayerSpec::Activation { dim, .. } => {
                dim
            }
            LayerSpec::Conv1D {
                in_channels, in_len, ..
            } => in_channels * in_len,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::BatchNorm { dim, .. } | LayerSpec::Dropout { dim, .. } | LayerSpec::Activation { dim, .. } => {
                dim
            }
            LayerSpec::Conv1D {
                in_len,
                out_channels,
                kernel_size,
                ..
            } => out_channels * (in_len + 1).saturating_sub(kernel_size),
        }
    }

    /// Short human-readable label, e.g. `Dense(16→8)`.
    pub fn label(&self) -> String {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => format!("Dense({in_dim}→{out_dim})"),
            LayerSpec::BatchNorm { dim, .. } => format!("BatchNorm({dim})"),
            LayerSpec::Dropout { rate, .. } => format!("Dropout({rate})"),
            LayerSpec::Activation { activation, .. } => format!("{activation:?}"),
            LayerSpec::Conv1D {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => format!("Conv1D({in_channels}→{out_channels}, k={kernel_size})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::domain("LayerSpec", detail));
        match *self {
            LayerSpec::Dense { in_dim, out_dim } if in_dim == 0 || out_dim == 0 => {
                bad(format!("dense dims must be >= 1, got {in_dim}→{out_dim}"))
            }
            LayerSpec::BatchNorm { dim, eps, momentum } => {
                if dim == 0 {
                    bad("batch norm dim must be >= 1".into())
                } else if eps.is_nan() || eps <= 0.0 {
                    bad(format!("batch norm eps must be > 0, got {eps}"))
                } else if !(0.0..=1.0).contains(&momentum) {
                    bad(format!("batch norm momentum must be in [0, 1], got {momentum}"))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Dropout { rate, .. } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate must be in [0, 1), got {rate}"))
            }
            LayerSpec::Conv1D {
                in_channels,
                in_len,
                out_channels,
                kernel_size,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_size == 0 {
                    bad("conv1d channels and kernel size must be >= 1".into())
                } else if kernel_size > in_len {
                    Err(Error::shape(
                        "LayerSpec",
                        format!("kernel of size {kernel_size} is longer than feature axis {in_len}"),
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Exact trainable-parameter count. Running statistics are not counted.
pub fn param_count(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
        LayerSpec::BatchNorm { dim, .. } => 2 * dim,
        LayerSpec::Dropout { .. } | LayerSpec::Activation { .. } => 0,
        LayerSpec::Conv1D {
            in_channels,
            out_channels,
            kernel_size,
            ..
        } => kernel_size * in_channels * out_channels + out_channels,
    }
}

/// A trainable tensor and the gradient accumulated for it.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    fn new(name: &'static str, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name, value, grad }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal with stddev `1/sqrt(fan_in)`, zero bias.
    LecunNormal,
    Zeros,
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Matrix),
    BatchNorm {
        x_hat: Matrix,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Mask(Matrix),
    Output(Matrix),
}

#[derive(Debug, Clone)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Param>,
    /// BatchNorm running mean and variance; empty for other kinds.
    running: Vec<Param>,
    cache: Option<Cache>,
}

impl Layer {
    pub fn new(spec: LayerSpec, init: Init, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let lecun = |rng: &mut Rng, rows: usize, cols: usize, fan_in: usize| match init {
            Init::LecunNormal => rng_normal(rng, rows, cols, 0.0, 1.0 / (fan_in as f64).sqrt()),
            Init::Zeros => Ok(Matrix::zeros(rows, cols)),
        };
        let (params, running) = match spec {
            LayerSpec::Dense { in_dim, out_dim } => (
                vec![
                    Param::new("weight", lecun(rng, in_dim, out_dim, in_dim)?),
                    Param::new("bias", Matrix::zeros(1, out_dim)),
                ],
                vec![],
            ),
            LayerSpec::BatchNorm { dim, .. } => (
                vec![
                    Param::new("gamma", Matrix::filled(1, dim, 1.0)),
                    Param::new("beta", Matrix::zeros(1, dim)),
                ],
                vec![
                    Param::new("running_mean", Matrix::zeros(1, dim)),
                    Param::new("running_var", Matrix::filled(1, dim, 1.0)),
                ],
            ),
            LayerSpec::Conv1D {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => {
                let fan_in = in_channels * kernel_size;
                (
                    vec![
                        Param::new("kernel", lecun(rng, out_channels, fan_in, fan_in)?),
                        Param::new("bias", Matrix::zeros(1, out_channels)),
                    ],
                    vec![],
                )
            }
            LayerSpec::Dropout { .. } | LayerSpec::Activation { .. } => (vec![], vec![]),
        };
        Ok(Self {
            spec,
            params,
            running,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Non-trainable state that still has to be persisted (BatchNorm running stats).
    pub fn buffers(&self) -> &[Param] {
        &self.running
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.running
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params
            .iter()
            .chain(&self.running)
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Overwrites a parameter or buffer by name; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.running.iter_mut())
            .find(|p| p.name == name)
            .ok_or_else(|| Error::State(format!("{} has no parameter `{name}`", self.spec.label())))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "Layer::set_param",
                format!("`{name}` is {:?}, got {:?}", slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<Matrix> {
        if x.cols() != self.spec.in_dim() {
            return Err(Error::shape(
                "Layer::forward",
                format!(
                    "{} expects {} columns, got {}",
                    self.spec.label(),
                    self.spec.in_dim(),
                    x.cols()
                ),
            ));
        }
        match self.spec {
            LayerSpec::Dense { .. } => dense_forward(self, x),
            LayerSpec::BatchNorm { .. } => batchnorm_forward(self, x, mode),
            LayerSpec::Dropout { rate, .. } => {
                let (y, mask) = dropout_forward(rate, x, mode, rng)?;
                self.cache = Some(Cache::Mask(mask));
                Ok(y)
            }
            LayerSpec::Activation { activation, .. } => {
                let y = activation_forward(activation, x);
                // SELU/ReLU derivatives need the input, sigmoid/softmax the output
                self.cache = Some(match activation {
                    Activation::Selu | Activation::Relu => Cache::Input(x.clone()),
                    Activation::Sigmoid | Activation::Softmax => Cache::Output(y.clone()),
                });
                Ok(y)
            }
            LayerSpec::Conv1D { .. } => conv1d_forward(self, x),
        }
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        layer_backward(self, upstream)
    }
}

/// `y = x·W + b`.
pub fn dense_forward(layer: &mut Layer, x: &Matrix) -> Result<Matrix> {
    let LayerSpec::Dense { in_dim, .. } = layer.spec else {
        return Err(Error::State(format!("dense_forward on {}", layer.spec.label())));
    };
    if x.cols() != in_dim {
        return Err(Error::shape(
            "dense_forward",
            format!("expected {in_dim} columns, got {}", x.cols()),
        ));
    }
    let y = matmul(x, &layer.params[0].value)?.add_row(&layer.params[1].value)?;
    layer.cache = Some(Cache::Input(x.clone()));
    Ok(y)
}

pub fn batchnorm_forward(layer: &mut Layer, x: &Matrix, mode: Mode) -> Result<Matrix> {
    let LayerSpec::BatchNorm { dim, eps, momentum } = layer.spec else {
        return Err(Error::State(format!("batchnorm_forward on {}", layer.spec.label())));
    };
    if x.cols() != dim {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("expected {dim} columns, got {}", x.cols()),
        ));
    }
    let (mean, var) = match mode {
        Mode::Training => {
            if x.rows() < 2 {
                return Err(Error::domain(
                    "batchnorm_forward",
                    format!("training mode needs at least 2 rows, got {}", x.rows()),
                ));
            }
            let (mean, var) = column_moments(x)?;
            let [rm, rv] = &mut layer.running[..] else {
                unreachable!("batch norm always has two running buffers")
            };
            for (r, m) in rm.value.as_mut_slice().iter_mut().zip(mean.as_slice()) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in rv.value.as_mut_slice().iter_mut().zip(var.as_slice()) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
            (mean, var)
        }
        Mode::Inference => (layer.running[0].value.clone(), layer.running[1].value.clone()),
    };
    let inv_std: Vec<f64> = var.as_slice().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gamma = layer.params[0].value.as_slice();
    let beta = layer.params[1].value.as_slice();
    let mut x_hat = x.clone();
    let mut y = Matrix::zeros(x.rows(), dim);
    for r in 0..x.rows() {
        let xh = x_hat.row_mut(r);
        for c in 0..dim {
            xh[c] = (xh[c] - mean.as_slice()[c]) * inv_std[c];
        }
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = gamma[c] * x_hat.get(r, c) + beta[c];
        }
    }
    layer.cache = Some(Cache::BatchNorm { x_hat, inv_std, mode });
    Ok(y)
}

/// Inverted dropout. Returns the output and the mask it was multiplied by
/// (entries are `0` or `1/(1-rate)`; all ones at inference).
pub fn dropout_forward(rate: f64, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(
            "dropout_forward",
            format!("rate must be in [0, 1), got {rate}"),
        ));
    }
    if mode == Mode::Inference || rate == 0.0 {
        return Ok((x.clone(), Matrix::filled(x.rows(), x.cols(), 1.0)));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.as_mut_slice() {
        if rng.uniform() < keep {
            *m = scale;
        }
    }
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, mask))
}

pub fn selu(v: f64) -> f64 {
    if v > 0.0 {
        SELU_LAMBDA * v
    } else {
        SELU_LAMBDA * SELU_ALPHA * v.exp_m1()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(kind: Activation, x: &Matrix) -> Matrix {
    match kind {
        Activation::Selu => x.map(selu),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Softmax => {
            let mut y = x.clone();
            for r in 0..y.rows() {
                let row = y.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            y
        }
    }
}

pub fn conv1d_forward(layer: &mut Layer, x: &Matrix) -> Result<Matrix> {
    let LayerSpec::Conv1D {
        in_channels,
        in_len,
        out_channels,
        kernel_size,
    } = layer.spec
    else {
        return Err(Error::State(format!("conv1d_forward on {}", layer.spec.label())));
    };
    if x.cols() != in_channels * in_len {
        return Err(Error::shape(
            "conv1d_forward",
            format!(
                "expected {in_channels}x{in_len} = {} columns, got {}",
                in_channels * in_len,
                x.cols()
            ),
        ));
    }
    let out_len = in_len - kernel_size + 1;
    let kernel = &layer.params[0].value;
    let bias = layer.params[1].value.as_slice();
    let mut y = Matrix::zeros(x.rows(), out_channels * out_len);
    for n in 0..x.rows() {
        let xr = x.row(n);
        let yr = y.row_mut(n);
        for co in 0..out_channels {
            let k = kernel.row(co);
            for t in 0..out_len {
                let mut s = bias[co];
                for ci in 0..in_channels {
                    let window = &xr[ci * in_len + t..ci * in_len + t + kernel_size];
                    let taps = &k[ci * kernel_size..(ci + 1) * kernel_size];
                    s += window.iter().zip(taps).map(|(a, b)| a * b).sum::<f64>();
                }
                yr[co * out_len + t] = s;
            }
        }
    }
    layer.cache = Some(Cache::Input(x.clone()));
    Ok(y)
}

/// Gradient w.r.t. the layer input. Parameter gradients are accumulated
/// (added) into the layer's `Param::grad`s.
pub fn layer_backward(layer: &mut Layer, upstream: &Matrix) -> Result<Matrix> {
    let cache = layer
        .cache
        .as_ref()
        .ok_or_else(|| Error::State(format!("backward on {} without a forward pass", layer.spec.label())))?;
    let out_dim = layer.spec.out_dim();
    if upstream.cols() != out_dim {
        return Err(Error::shape(
            "layer_backward",
            format!(
                "{} output has {out_dim} columns, upstream has {}",
                layer.spec.label(),
                upstream.cols()
            ),
        ));
    }
    let rows_of = |m: &Matrix| m.rows();
    let cached_rows = match cache {
        Cache::Input(m) | Cache::Mask(m) | Cache::Output(m) => rows_of(m),
        Cache::BatchNorm { x_hat, .. } => rows_of(x_hat),
    };
    if upstream.rows() != cached_rows {
        return Err(Error::shape(
            "layer_backward",
            format!("forward saw {cached_rows} rows, upstream has {}", upstream.rows()),
        ));
    }

    match (layer.spec.clone(), cache) {
        (LayerSpec::Dense { .. }, Cache::Input(x)) => {
            let dw = matmul_tn(x, upstream)?;
            let db = upstream.column_sums();
            let dx = matmul_nt(upstream, &layer.params[0].value)?;
            layer.params[0].grad.add_assign(&dw)?;
            layer.params[1].grad.add_assign(&db)?;
            Ok(dx)
        }
        (LayerSpec::BatchNorm { dim, .. }, Cache::BatchNorm { x_hat, inv_std, mode }) => {
            let n = upstream.rows() as f64;
            let gamma = layer.params[0].value.as_slice().to_vec();
            let mut dgamma = vec![0.0; dim];
            let mut dbeta = vec![0.0; dim];
            for r in 0..upstream.rows() {
                for c in 0..dim {
                    let g = upstream.get(r, c);
                    dgamma[c] += g * x_hat.get(r, c);
                    dbeta[c] += g;
                }
            }
            let mut dx = Matrix::zeros(upstream.rows(), dim);
            match mode {
                Mode::Training => {
                    // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = dy·γ
                    for r in 0..upstream.rows() {
                        for c in 0..dim {
                            let dxhat = upstream.get(r, c) * gamma[c];
                            let sum_dxhat = dbeta[c] * gamma[c];
                            let sum_dxhat_xhat = dgamma[c] * gamma[c];
                            let v = inv_std[c] / n * (n * dxhat - sum_dxhat - x_hat.get(r, c) * sum_dxhat_xhat);
                            dx.set(r, c, v);
                        }
                    }
                }
                Mode::Inference => {
                    for r in 0..upstream.rows() {
                        for c in 0..dim {
                            dx.set(r, c, upstream.get(r, c) * gamma[c] * inv_std[c]);
                        }
                    }
                }
            }
            for (g, d) in layer.params[0].grad.as_mut_slice().iter_mut().zip(&dgamma) {
                *g += d;
            }
            for (g, d) in layer.params[1].grad.as_mut_slice().iter_mut().zip(&dbeta) {
                *g += d;
            }
            Ok(dx)
        }
        (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => upstream.zip_map(mask, |g, m| g * m),
        (LayerSpec::Activation { activation, .. }, cache) => match (activation, cache) {
            (Activation::Selu, Cache::Input(x)) => upstream.zip_map(x, |g, v| {
                g * if v > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * v.exp()
                }
            }),
            (Activation::Relu, Cache::Input(x)) => upstream.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }),
            (Activation::Sigmoid, Cache::Output(y)) => upstream.zip_map(y, |g, s| g * s * (1.0 - s)),
            (Activation::Softmax, Cache::Output(y)) => {
                // dx = y ⊙ (g − Σ g⊙y) row-wise
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = upstream.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                        *out = yr[c] * (gr[c] - dot);
                    }
                }
                Ok(dx)
            }
            _ => unreachable!("activation cache kind is fixed by forward"),
        },
        (
            LayerSpec::Conv1D {
                in_channels,
                in_len,
                out_channels,
                kernel_size,
            },
            Cache::Input(x),
        ) => {
            let out_len = in_len - kernel_size + 1;
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            let mut dk = Matrix::zeros(out_channels, in_channels * kernel_size);
            let mut db = Matrix::zeros(1, out_channels);
            let kernel = &layer.params[0].value;
            for n in 0..x.rows() {
                let xr = x.row(n);
                let gr = upstream.row(n);
                for co in 0..out_channels {
                    let k = kernel.row(co);
                    for t in 0..out_len {
                        let g = gr[co * out_len + t];
                        if g == 0.0 {
                            continue;
                        }
                        db.as_mut_slice()[co] += g;
                        for ci in 0..in_channels {
                            for j in 0..kernel_size {
                                let xi = ci * in_len + t + j;
                                let ki = ci * kernel_size + j;
                                dk.row_mut(co)[ki] += g * xr[xi];
                                dx.row_mut(n)[xi] += g * k[ki];
                            }
                        }
                    }
                }
            }
            layer.params[0].grad.add_assign(&dk)?;
            layer.params[1].grad.add_assign(&db)?;
            Ok(dx)
        }
        _ => unreachable!("cache kind is fixed by forward"),
    }
}
