use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::conv2d;
use super::params::{Init, Scope};
use crate::error::{Error, Result};

/// Per-call forward state: train/eval switch plus the dropout stream.
pub struct Forward<'a> {
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if !self.train || rate <= 0.0 {
            return Ok(x.clone());
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training forward without rng".into()))?;
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Fails with `NonFinite(what)` if any element is NaN or infinite.
pub fn check_finite(x: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    let total = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(super::ops::leaky_relu(x, slope)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(super::ops::relu(x)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_all()?.sqrt()?;
    let norm = (norm + 1e-12)?;
    Ok(v.broadcast_div(&norm)?)
}

/// Power iterations run when a layer is built, so that eval-mode forwards on
/// a fresh layer already see a sensible estimate.
pub const SN_WARMUP_ITERATIONS: usize = 15;

/// One-step power-iteration spectral normalization with persistent vectors.
pub struct SpectralNorm {
    u: Var,
    v: Var,
}

impl SpectralNorm {
    pub fn new(scope: &mut Scope<'_>, rows: usize, cols: usize) -> Result<Self> {
        let u = scope.buffer("sn_u", &[rows, 1], Init::Normal(1.0))?;
        let v = scope.buffer("sn_v", &[cols, 1], Init::Normal(1.0))?;
        u.set(&l2_normalize(u.as_tensor())?)?;
        v.set(&l2_normalize(v.as_tensor())?)?;
        Ok(Self { u, v })
    }

    /// Advances the persistent estimate by one power iteration on `w`.
    pub fn power_iteration(&self, w: &Tensor) -> Result<()> {
        let w = w.detach();
        let v = l2_normalize(&w.t()?.matmul(self.u.as_tensor())?)?;
        let u = l2_normalize(&w.matmul(&v)?)?;
        self.v.set(&v)?;
        self.u.set(&u)?;
        Ok(())
    }

    pub fn warm_start(&self, w: &Tensor) -> Result<()> {
        for _ in 0..SN_WARMUP_ITERATIONS {
            self.power_iteration(w)?;
        }
        Ok(())
    }

    /// Current estimate of the largest singular value, differentiable in `w`.
    pub fn sigma(&self, w: &Tensor) -> Result<Tensor> {
        let s = self.u.as_tensor().t()?.matmul(&w.matmul(self.v.as_tensor())?)?;
        Ok(s.reshape(())?)
    }

    /// Returns `w / sigma(w)` for a matrix-shaped `w`; a zero weight is
    /// returned unchanged.
    pub fn normalize(&self, w: &Tensor, update: bool) -> Result<Tensor> {
        if update {
            self.power_iteration(w)?;
        }
        let sigma = self.sigma(w)?;
        let value = sigma.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if value.abs() < 1e-12 || !value.is_finite() {
            return Ok(w.clone());
        }
        Ok(w.broadcast_div(&sigma)?)
    }
}

/// Appends `parts` under `name` when the layer is spectrally normalized.
pub fn collect_spectral<'a>(out: &mut Vec<(String, Tensor, &'a SpectralNorm)>, name: String, parts: Option<(Tensor, &'a SpectralNorm)>) {
    if let Some((w, sn)) = parts {
        out.push((name, w, sn));
    }
}

/// Affine map `y = x W^T + b` over the last dimension.
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Self::build(scope, d_in, d_out, true, false)
    }

    pub fn spectral(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Self::build(scope, d_in, d_out, true, true)
    }

    pub fn build(scope: &mut Scope<'_>, d_in: usize, d_out: usize, bias: bool, spectral: bool) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = scope.param("weight", &[d_out, d_in], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        let sn = if spectral {
            let sn = SpectralNorm::new(scope, d_out, d_in)?;
            sn.warm_start(weight.as_tensor())?;
            Some(sn)
        } else {
            None
        };
        Ok(Self { weight, bias, sn })
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }

    /// Raw weight matrix and its normalizer, if spectrally normalized.
    pub fn spectral_parts(&self) -> Result<Option<(Tensor, &SpectralNorm)>> {
        Ok(self.sn.as_ref().map(|sn| (self.weight.as_tensor().clone(), sn)))
    }

    pub fn effective_weight(&self, update: bool) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(self.weight.as_tensor(), update),
            None => Ok(self.weight.as_tensor().clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let w = self.effective_weight(ctx.is_train())?;
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if d_in != w.dim(1)? {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                w.dim(1)?,
                dims
            )));
        }
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Square-kernel convolution with same-padding (`pad = k/2`) and optional
/// spectral normalization of the `(Cout, Cin*k*k)` weight matrix.
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    sn: Option<SpectralNorm>,
}

impl Conv2d {
    pub fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, kernel: usize, stride: usize, spectral: bool) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = scope.param("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?;
        let bias = scope.param("bias", &[c_out], Init::Zeros)?;
        let sn = if spectral {
            let sn = SpectralNorm::new(scope, c_out, fan_in)?;
            sn.warm_start(&weight.as_tensor().reshape((c_out, fan_in))?)?;
            Some(sn)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            sn,
        })
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2).unwrap_or(0)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn spectral_parts(&self) -> Result<Option<(Tensor, &SpectralNorm)>> {
        match &self.sn {
            Some(sn) => Ok(Some((self.weight_matrix()?, sn))),
            None => Ok(None),
        }
    }

    /// The weight as a `(Cout, Cin*k*k)` matrix.
    pub fn weight_matrix(&self) -> Result<Tensor> {
        let c_out = self.weight.dim(0)?;
        Ok(self.weight.as_tensor().reshape((c_out, ()))?)
    }

    pub fn effective_weight(&self, update: bool) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => {
                let m = sn.normalize(&self.weight_matrix()?, update)?;
                Ok(m.reshape(self.weight.shape())?)
            }
            None => Ok(self.weight.as_tensor().clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let w = self.effective_weight(ctx.is_train())?;
        let k = self.kernel();
        Ok(conv2d(x, &w, Some(self.bias.as_tensor()), self.stride, k / 2)?)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Forward<'_>) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if ctx.is_train() {
            let (y, stats) = super::ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dtype = self.running_mean.dtype();
            let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let var: Vec<f64> = stats.iter().map(|s| s.1 * unbiased).collect();
            let mean = Tensor::from_vec(mean, c, x.device())?.to_dtype(dtype)?;
            let var = Tensor::from_vec(var, c, x.device())?.to_dtype(dtype)?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (var * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let b = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

/// 2x nearest-neighbour upsampling of `(N, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(super::ops::upsample2x(x)?)
}
