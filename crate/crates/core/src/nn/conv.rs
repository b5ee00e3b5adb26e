//! 2-D convolution as im2col + GEMM in a single custom op, with a hand-written
//! backward that skips the gradients nobody asked for.

use candle_core::{bail, CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

/// Convolution geometry for one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output columns `[lo, hi)` for horizontal tap `kj`.
    fn ox_range(&self, kj: usize, ow: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kj {
            ((self.w - 1 + self.pad - kj) / self.stride + 1).min(ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every in-bounds tap of one input plane as a run of output
    /// columns: `f(column offset, input offset, run length)`, where input
    /// steps by `stride` and columns by one. Columns are laid out as
    /// `(C*k*k, N*OH*OW)`, so taps of the same plane are `tap_stride` apart.
    fn for_each_run(&self, base: usize, tap_stride: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        for ki in 0..self.kernel {
            for kj in 0..self.kernel {
                let (lo, hi) = self.ox_range(kj, ow);
                if lo == hi {
                    continue;
                }
                let row = base + (ki * self.kernel + kj) * tap_stride;
                for oy in 0..oh {
                    let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let ix = lo * self.stride + kj - self.pad;
                    f(row + oy * ow + lo, iy as usize * self.w + ix, hi - lo);
                }
            }
        }
    }

    fn column_base(&self, n: usize, b: usize, ci: usize) -> (usize, usize) {
        let (oh, ow) = self.out_hw();
        let tap_stride = n * oh * ow;
        let kk = self.kernel * self.kernel;
        (ci * kk * tap_stride + b * oh * ow, tap_stride)
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], n: usize, c: usize) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let in_plane = self.h * self.w;
        let s = self.stride;
        let mut out = vec![T::default(); n * c * self.kernel * self.kernel * oh * ow];
        for b in 0..n {
            for ci in 0..c {
                let plane = &src[(b * c + ci) * in_plane..][..in_plane];
                let (base, stride) = self.column_base(n, b, ci);
                self.for_each_run(base, stride, |col, pix, len| {
                    let dst = &mut out[col..col + len];
                    if s == 1 {
                        dst.copy_from_slice(&plane[pix..pix + len]);
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = plane[pix + i * s];
                        }
                    }
                });
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], n: usize, c: usize) -> Vec<T> {
        let in_plane = self.h * self.w;
        let s = self.stride;
        let mut out = vec![T::default(); n * c * in_plane];
        for b in 0..n {
            for ci in 0..c {
                let plane = &mut out[(b * c + ci) * in_plane..][..in_plane];
                let (base, stride) = self.column_base(n, b, ci);
                self.for_each_run(base, stride, |col, pix, len| {
                    let cols = &src[col..col + len];
                    if s == 1 {
                        for (d, &v) in plane[pix..pix + len].iter_mut().zip(cols) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in cols.iter().enumerate() {
                            plane[pix + i * s] += v;
                        }
                    }
                });
            }
        }
        out
    }
}

/// Strided GEMM `C = alpha·A·B + beta·C` over `f32`/`f64`.
trait Gemm: Copy + Default + std::ops::AddAssign + WithDType {
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(m: usize, k: usize, n: usize, beta: Self, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, c: *mut Self, rsc: isize, csc: isize);
}

impl Gemm for f32 {
    unsafe fn gemm(m: usize, k: usize, n: usize, beta: f32, a: *const f32, rsa: isize, csa: isize, b: *const f32, rsb: isize, csb: isize, c: *mut f32, rsc: isize, csc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Gemm for f64 {
    unsafe fn gemm(m: usize, k: usize, n: usize, beta: f64, a: *const f64, rsa: isize, csa: isize, b: *const f64, rsb: isize, csb: isize, c: *mut f64, rsc: isize, csc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Fused im2col + GEMM convolution of `(x, weight)` without bias.
#[derive(Debug, Clone, Copy)]
struct ConvOp {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvOp {
    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            h,
            w,
        }
    }

    fn forward<T: Gemm>(&self, x: &[T], (n, c, h, w): (usize, usize, usize, usize), wt: &[T], cout: usize) -> Vec<T> {
        let g = self.geometry(h, w);
        let (oh, ow) = g.out_hw();
        let (cols_n, ckk) = (n * oh * ow, c * self.kernel * self.kernel);
        let cols = g.unfold(x, n, c);
        let mut flat = vec![T::default(); cout * cols_n];
        // SAFETY: `wt` is cout×ckk, `cols` ckk×cols_n and `flat` cout×cols_n,
        // all dense row-major.
        unsafe {
            T::gemm(cout, ckk, cols_n, T::zero(), wt.as_ptr(), ckk as isize, 1, cols.as_ptr(), cols_n as isize, 1, flat.as_mut_ptr(), cols_n as isize, 1);
        }
        swap_outer(&flat, cout, n, oh * ow)
    }

    /// Returns `(grad_x, grad_w)`, each only if requested.
    #[allow(clippy::type_complexity)]
    fn backward<T: Gemm>(
        &self,
        x: &[T],
        (n, c, h, w): (usize, usize, usize, usize),
        wt: &[T],
        cout: usize,
        grad: &[T],
        want: (bool, bool),
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let g = self.geometry(h, w);
        let (oh, ow) = g.out_hw();
        let (cols_n, ckk) = (n * oh * ow, c * self.kernel * self.kernel);
        // (N, Cout, OHW) -> (Cout, N·OHW)
        let gflat = swap_outer(grad, n, cout, oh * ow);
        let grad_w = want.1.then(|| {
            let cols = g.unfold(x, n, c);
            let mut gw = vec![T::default(); cout * ckk];
            // SAFETY: gflat is cout×cols_n; colsᵀ is cols_n×ckk via swapped
            // strides on the dense ckk×cols_n buffer.
            unsafe {
                T::gemm(cout, cols_n, ckk, T::zero(), gflat.as_ptr(), cols_n as isize, 1, cols.as_ptr(), 1, cols_n as isize, gw.as_mut_ptr(), ckk as isize, 1);
            }
            gw
        });
        let grad_x = want.0.then(|| {
            let mut gcols = vec![T::default(); ckk * cols_n];
            // SAFETY: Wᵀ is ckk×cout via swapped strides on the cout×ckk
            // buffer; gflat is cout×cols_n.
            unsafe {
                T::gemm(ckk, cout, cols_n, T::zero(), wt.as_ptr(), 1, ckk as isize, gflat.as_ptr(), cols_n as isize, 1, gcols.as_mut_ptr(), cols_n as isize, 1);
            }
            g.fold(&gcols, n, c)
        });
        (grad_x, grad_w)
    }
}

/// Reorders `(a, b, len)` row blocks into `(b, a, len)`.
fn swap_outer<T: Copy + Default>(src: &[T], a: usize, b: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * len..][..len].copy_from_slice(&src[(i * b + j) * len..][..len]);
        }
    }
    out
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("conv2d: {what} must be contiguous"),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d_gemm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (cout, _, _, _) = l2.shape().dims4()?;
        let (oh, ow) = self.geometry(dims.2, dims.3).out_hw();
        let shape = Shape::from((dims.0, cout, oh, ow));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(self.forward(contiguous(x, l1, "input")?, dims, contiguous(w, l2, "weight")?, cout))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(self.forward(contiguous(x, l1, "input")?, dims, contiguous(w, l2, "weight")?, cout))
            }
            _ => bail!("conv2d: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let want = (x.track_op(), wt.track_op());
        if !want.0 && !want.1 {
            return Ok((None, None));
        }
        let dims = x.dims4()?;
        let cout = wt.dim(0)?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xs = x.flatten_all()?.to_vec1::<$t>()?;
                let ws = wt.flatten_all()?.to_vec1::<$t>()?;
                let gs = grad.flatten_all()?.to_vec1::<$t>()?;
                let (gx, gw) = self.backward(&xs, dims, &ws, cout, &gs, want);
                (
                    gx.map(|v| Tensor::from_vec(v, x.shape(), dev)).transpose()?,
                    gw.map(|v| Tensor::from_vec(v, wt.shape(), dev)).transpose()?,
                )
            }};
        }
        Ok(match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            other => bail!("conv2d: unsupported dtype {other:?}"),
        })
    }
}

/// Square-kernel convolution of `x: (N, Cin, H, W)` with `weight: (Cout, Cin, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (_, cin, h, w) = x.dims4()?;
    let (_, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        bail!("conv2d: weight {:?} incompatible with input {:?}", weight.shape(), x.shape())
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        bail!("conv2d: {h}x{w} input too small for kernel {k}")
    }
    let op = ConvOp { kernel: k, stride, pad };
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, op)?;
    match bias {
        Some(b) => super::ops::channel_bias(&y, b),
        None => Ok(y),
    }
}
