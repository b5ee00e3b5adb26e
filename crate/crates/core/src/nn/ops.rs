//! Elementwise and normalization kernels with hand-written backward passes.
//!
//! The generic autograd versions of these build several intermediate
//! tensors per call; on CPU that dominates the cost of the small networks.

use std::ops::AddAssign;

use num_traits::Zero;
use std::sync::{Arc, Mutex};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

pub(crate) trait Elem: WithDType + Default {}
impl Elem for f32 {}
impl Elem for f64 {}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("kernel input must be contiguous"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

macro_rules! dispatch {
    ($storage:expr, |$t:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(_) => {
                type $t = f32;
                $body
            }
            CpuStorage::F64(_) => {
                type $t = f64;
                $body
            }
            _ => bail!("unsupported dtype"),
        }
    };
}

macro_rules! dispatch_dtype {
    ($dtype:expr, |$t:ident| $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
            other => bail!("unsupported dtype {other:?}"),
        }
    };
}

/// `max(x, 0) + slope · min(x, 0)`.
#[derive(Debug, Clone, Copy)]
struct LeakyRelu {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch!(s, |T| {
            let slope = T::from_f64(self.slope);
            let v: Vec<T> = slice::<T>(s, l)?.iter().map(|&x| if x > T::zero() { x } else { x * slope }).collect();
            T::to_cpu_storage_owned(v)
        });
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = dispatch_dtype!(arg.dtype(), |T| {
            let slope = T::from_f64(self.slope);
            let x = host::<T>(arg)?;
            let g = host::<T>(grad)?;
            let v: Vec<T> = x.iter().zip(&g).map(|(&x, &g)| if x > T::zero() { g } else { g * slope }).collect();
            Tensor::from_vec(v, arg.shape(), arg.device())?
        });
        Ok(Some(g))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}

pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    leaky_relu(x, 0.0)
}

/// Nearest-neighbour 2× upsampling; its adjoint sums 2×2 blocks.
#[derive(Debug, Clone, Copy)]
struct Upsample2x;

#[derive(Debug, Clone, Copy)]
struct BlockSum2x;

fn upsample_host<T: Copy + Default>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            let row = &mut dst[2 * y * 2 * w..][..2 * w];
            for (x, &v) in src[y * w..][..w].iter().enumerate() {
                row[2 * x] = v;
                row[2 * x + 1] = v;
            }
            let (top, bottom) = dst[2 * y * 2 * w..][..4 * w].split_at_mut(2 * w);
            bottom.copy_from_slice(top);
        }
    }
    out
}

fn block_sum_host<T: Copy + Default + AddAssign>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        let src = &g[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[(y / 2) * ow + x / 2] += src[y * w + x];
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = dispatch!(s, |T| T::to_cpu_storage_owned(upsample_host(slice::<T>(s, l)?, n * c, h, w)));
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(BlockSum2x)?))
    }
}

impl CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block_sum2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!("block_sum2x: odd spatial size {h}x{w}")
        }
        let out = dispatch!(s, |T| T::to_cpu_storage_owned(block_sum_host(slice::<T>(s, l)?, n * c, h, w)));
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2x)?))
    }
}

pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Adds a per-channel bias to `(N, C, ...)`.
#[derive(Debug, Clone, Copy)]
struct ChannelBias;

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let (c, plane) = (dims[1], dims[2..].iter().product::<usize>());
        let out = dispatch!(s1, |T| {
            let x = slice::<T>(s1, l1)?;
            let b = slice::<T>(s2, l2)?;
            let mut y = x.to_vec();
            for (i, chunk) in y.chunks_mut(plane).enumerate() {
                let bias = b[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            T::to_cpu_storage_owned(y)
        });
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = if b.track_op() {
            let dims = x.dims();
            let (c, plane) = (dims[1], dims[2..].iter().product::<usize>());
            Some(dispatch_dtype!(x.dtype(), |T| {
                let g = host::<T>(grad)?;
                let mut acc = vec![T::default(); c];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    acc[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
                Tensor::from_vec(acc, c, x.device())?
            }))
        } else {
            None
        };
        Ok((x.track_op().then(|| grad.clone()), gb))
    }
}

/// `x + bias` broadcast over every axis except the channel axis (dim 1).
pub fn channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 || bias.dims() != [dims[1]] {
        bail!("channel_bias: bias {:?} does not match input {:?}", bias.shape(), x.shape())
    }
    x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)
}

/// Training-mode batch normalization of `(N, C, H, W)` with batch
/// statistics. The per-channel `(mean, biased variance)` of the last forward
/// is left in `stats`.
#[derive(Debug, Clone)]
struct BatchNormTrain {
    eps: f64,
    stats: Arc<Mutex<Vec<(f64, f64)>>>,
}

fn channel_stats<T: Elem>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
    let m = (n * hw) as f64;
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..n {
                for &v in &x[(b * c + ch) * hw..][..hw] {
                    sum += v.to_f64();
                }
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                for &v in &x[(b * c + ch) * hw..][..hw] {
                    let d = v.to_f64() - mean;
                    sq += d * d;
                }
            }
            (mean, sq / m)
        })
        .collect()
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let out = dispatch!(s1, |T| {
            let x = slice::<T>(s1, l1)?;
            let gamma = slice::<T>(s2, l2)?;
            let beta = slice::<T>(s3, l3)?;
            let stats = channel_stats(x, n, c, hw);
            let mut y = vec![T::default(); x.len()];
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let inv = 1.0 / (var + self.eps).sqrt();
                let scale = T::from_f64(gamma[ch].to_f64() * inv);
                let shift = T::from_f64(beta[ch].to_f64() - gamma[ch].to_f64() * mean * inv);
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for (o, &v) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                        *o = v * scale + shift;
                    }
                }
            }
            *self.stats.lock().expect("stats lock") = stats;
            T::to_cpu_storage_owned(y)
        });
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let dev = x.device();
        dispatch_dtype!(x.dtype(), |T| {
            let xs = host::<T>(x)?;
            let gs = host::<T>(grad)?;
            let gam = host::<T>(gamma)?;
            let stats = channel_stats(&xs, n, c, hw);
            let mut dx = vec![T::default(); xs.len()];
            let mut dgamma = vec![T::default(); c];
            let mut dbeta = vec![T::default(); c];
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let inv = 1.0 / (var + self.eps).sqrt();
                let (mut sg, mut sgx) = (0.0, 0.0);
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        let g = gs[i].to_f64();
                        sg += g;
                        sgx += g * (xs[i].to_f64() - mean) * inv;
                    }
                }
                dbeta[ch] = T::from_f64(sg);
                dgamma[ch] = T::from_f64(sgx);
                let k = gam[ch].to_f64() * inv;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        let xhat = (xs[i].to_f64() - mean) * inv;
                        dx[i] = T::from_f64(k * (gs[i].to_f64() - sg / m - xhat * sgx / m));
                    }
                }
            }
            Ok((
                x.track_op().then(|| Tensor::from_vec(dx, x.shape(), dev)).transpose()?,
                Some(Tensor::from_vec(dgamma, c, dev)?),
                Some(Tensor::from_vec(dbeta, c, dev)?),
            ))
        })
    }
}

/// Batch-statistics normalization; returns the output and the per-channel
/// `(mean, biased variance)` used.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<(Tensor, Vec<(f64, f64)>)> {
    let op = BatchNormTrain {
        eps,
        stats: Arc::new(Mutex::new(Vec::new())),
    };
    let stats = op.stats.clone();
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let stats = std::mem::take(&mut *stats.lock().expect("stats lock"));
    Ok((y, stats))
}
