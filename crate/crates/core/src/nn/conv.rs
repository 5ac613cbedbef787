//! 2-D convolution as a custom op: single-pass im2col into a patch matrix,
//! then a matrix product, in both directions. On CPU this is much faster than
//! candle's built-in kernels (its kernel gradient is a full-map convolution).

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType};

struct Conv2dOp {
    padding: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    padding: usize,
    stride: usize,
}

impl Geometry {
    fn new(x: &[usize], k: usize, padding: usize, stride: usize) -> candle_core::Result<Self> {
        let [b, c, h, w] = *x else { candle_core::bail!("conv2d expects NCHW input, got {x:?}") };
        if h + 2 * padding < k || w + 2 * padding < k {
            candle_core::bail!("conv2d kernel {k} larger than padded input {h}x{w}");
        }
        let (ho, wo) = ((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1);
        Ok(Self { b, c, h, w, k, ho, wo, padding, stride })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Outputs `lo..hi` along one axis whose input index `o·stride + k − padding`
    /// lands inside `0..len`.
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = if len + self.padding > k { ((len + self.padding - k - 1) / self.stride + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Calls `f(dst_offset, src_offset, run)` for every contiguous run linking
/// patch row `(ky, kx)` (offsets into its `Ho·Wo` columns) to an input plane.
fn for_each_run(g: &Geometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (y0, y1) = g.valid(ky, g.h, g.ho);
    let (x0, x1) = g.valid(kx, g.w, g.wo);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * g.stride + ky - g.padding;
        let ix0 = x0 * g.stride + kx - g.padding;
        if g.stride == 1 {
            f(oy * g.wo + x0, iy * g.w + ix0, x1 - x0);
        } else {
            for (j, ox) in (x0..x1).enumerate() {
                f(oy * g.wo + ox, iy * g.w + ix0 + j * g.stride, 1);
            }
        }
    }
}

/// `B × (C·k·k) × (Ho·Wo)` patch matrix, rows ordered `(c, ky, kx)` like a
/// flattened `O × C × k × k` kernel.
fn im2col<T: WithDType>(x: &[T], g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.b * rows * cols];
    for bi in 0..g.b {
        for ci in 0..g.c {
            let plane = &x[(bi * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let dst = &mut out[(bi * rows + row) * cols..][..cols];
                    for_each_run(g, ky, kx, |d, s, n| dst[d..d + n].copy_from_slice(&plane[s..s + n]));
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatter-adds patch gradients back onto the input.
fn col2im<T: WithDType>(cols_data: &[T], g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    for bi in 0..g.b {
        for ci in 0..g.c {
            let plane = &mut out[(bi * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    let src = &cols_data[(bi * rows + row) * cols..][..cols];
                    for_each_run(g, ky, kx, |d, s, n| {
                        for (o, v) in plane[s..s + n].iter_mut().zip(&src[d..d + n]) {
                            *o += *v;
                        }
                    });
                }
            }
        }
    }
    out
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d expects contiguous inputs".into()))?;
    Ok(&v[start..end])
}

fn patches(x: &Tensor, g: &Geometry) -> candle_core::Result<Tensor> {
    let shape = (g.b, g.rows(), g.cols());
    let x = x.contiguous()?;
    match x.dtype() {
        DType::F32 => Tensor::from_vec(im2col(&x.flatten_all()?.to_vec1::<f32>()?, g), shape, &Device::Cpu),
        DType::F64 => Tensor::from_vec(im2col(&x.flatten_all()?.to_vec1::<f64>()?, g), shape, &Device::Cpu),
        dt => candle_core::bail!("conv2d supports f32 and f64 only, got {dt:?}"),
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o, c, k, _) = l2.shape().dims4()?;
        let g = Geometry::new(l1.dims(), k, self.padding, self.stride)?;
        if c != g.c {
            candle_core::bail!("conv2d kernel expects {c} input channels, got {}", g.c);
        }
        let (cols, w) = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => (
                Tensor::from_vec(im2col(slice(x, l1)?, &g), (g.b, g.rows(), g.cols()), &Device::Cpu)?,
                Tensor::from_slice(slice(w, l2)?, (o, g.rows()), &Device::Cpu)?,
            ),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => (
                Tensor::from_vec(im2col(slice(x, l1)?, &g), (g.b, g.rows(), g.cols()), &Device::Cpu)?,
                Tensor::from_slice(slice(w, l2)?, (o, g.rows()), &Device::Cpu)?,
            ),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 inputs only"),
        };
        let y = w.broadcast_matmul(&cols)?.flatten_all()?;
        let storage = match y.dtype() {
            DType::F32 => CpuStorage::F32(y.to_vec1()?),
            _ => CpuStorage::F64(y.to_vec1()?),
        };
        Ok((storage, Shape::from((g.b, o, g.ho, g.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (o, c, k, _) = w.dims4()?;
        let g = Geometry::new(x.dims(), k, self.padding, self.stride)?;
        let dy = grad.detach().contiguous()?.reshape((g.b, o, g.cols()))?;
        let cols = patches(&x.detach(), &g)?;
        let grad_w = dy.matmul(&cols.transpose(1, 2)?)?.sum(0)?.reshape((o, c, k, k))?;
        let dcols = w.detach().reshape((o, g.rows()))?.t()?.broadcast_matmul(&dy)?.contiguous()?.flatten_all()?;
        let grad_x = match dcols.dtype() {
            DType::F32 => Tensor::from_vec(col2im(&dcols.to_vec1::<f32>()?, &g), x.shape(), &Device::Cpu)?,
            _ => Tensor::from_vec(col2im(&dcols.to_vec1::<f64>()?, &g), x.shape(), &Device::Cpu)?,
        };
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// `x: B×C×H×W`, `w: O×C×k×k`, square kernel, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> candle_core::Result<Tensor> {
    if !matches!(x.device(), Device::Cpu) {
        return x.conv2d(w, padding, stride, 1, 1);
    }
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { padding, stride })
}
