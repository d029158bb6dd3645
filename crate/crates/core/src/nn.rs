//! Differentiable building blocks shared by every network in the crate.
//!
//! Convolution is an im2col custom op followed by a candle matmul, which
//! keeps both passes on the GEMM path.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// For output coordinate `o`, the kernel taps `k` that land inside the
    /// input, as `(k_start, k_end)`.
    fn tap_range(&self, o: usize, extent: usize) -> (usize, usize) {
        let base = (o * self.stride) as isize - self.pad as isize;
        let start = (-base).max(0) as usize;
        let end = ((extent as isize - base).min(self.kernel as isize)).max(0) as usize;
        (start.min(end), end)
    }
}

fn im2col<T: WithDType>(src: &[T], g: ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let k = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * cols];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            let (ky0, ky1) = g.tap_range(oy, g.height);
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..g.out_w {
                let (kx0, kx1) = g.tap_range(ox, g.width);
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let row = &mut out[((b * g.out_h + oy) * g.out_w + ox) * cols..][..cols];
                for c in 0..g.channels {
                    let plane = &src[(b * g.channels + c) * g.height * g.width..];
                    for ky in ky0..ky1 {
                        let iy = (iy0 + ky as isize) as usize;
                        let src_row = &plane[iy * g.width..];
                        let dst = &mut row[(c * k + ky) * k..];
                        for kx in kx0..kx1 {
                            dst[kx] = src_row[(ix0 + kx as isize) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], g: ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let k = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            let (ky0, ky1) = g.tap_range(oy, g.height);
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..g.out_w {
                let (kx0, kx1) = g.tap_range(ox, g.width);
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let row = &src[((b * g.out_h + oy) * g.out_w + ox) * cols..][..cols];
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for ky in ky0..ky1 {
                        let iy = (iy0 + ky as isize) as usize;
                        for kx in kx0..kx1 {
                            let ix = (ix0 + kx as isize) as usize;
                            out[base + iy * g.width + ix] += row[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, l)?, g)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((g.batch * g.out_h * g.out_w, g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, l)?, g)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// 2D convolution, NCHW input, `(out, in, k, k)` weight.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kernel, kernel_w) = weight.dims4()?;
    if in_c != channels || kernel != kernel_w {
        return Err(Error::shape(format!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if height + 2 * pad < kernel || width + 2 * pad < kernel {
        return Err(Error::shape(format!("conv2d: input {height}x{width} smaller than kernel {kernel}")));
    }
    let g = ConvGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_h: (height + 2 * pad - kernel) / stride + 1,
        out_w: (width + 2 * pad - kernel) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let w = weight.reshape((out_c, g.cols()))?.t()?;
    let mut y = cols.matmul(&w)?; // (B*Ho*Wo, O)
    if let Some(b) = bias {
        y = y.broadcast_add(b)?;
    }
    Ok(y
        .reshape((batch, g.out_h * g.out_w, out_c))?
        .transpose(1, 2)?
        .reshape((batch, out_c, g.out_h, g.out_w))?)
}

/// `(B, C, H, W)` to `(B, C·f·f, H/f, W/f)`; each output channel holds one
/// position of the `f × f` block.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!("space_to_depth: {h}x{w} not divisible by {f}")));
    }
    Ok(x.reshape((b, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * f * f, h / f, w / f))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, cff, h, w) = x.dims4()?;
    if f == 0 || cff % (f * f) != 0 {
        return Err(Error::shape(format!("depth_to_space: {cff} channels not divisible by {}", f * f)));
    }
    let c = cff / (f * f);
    Ok(x.reshape((b, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, h * f, w * f))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(s: &mut Scope, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        Ok(Self {
            weight: s.get("weight", (out_c, in_c, kernel, kernel), Init::kaiming(fan_in))?,
            bias: s.get("bias", out_c, Init::kaiming(fan_in))?,
            stride,
            pad: kernel / 2,
        })
    }

    /// All-zero weights and bias (the ControlNet "zero convolution").
    pub fn zeroed(s: &mut Scope, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", (out_c, in_c, kernel, kernel), Init::Zeros)?,
            bias: s.get("bias", out_c, Init::Zeros)?,
            stride: 1,
            pad: kernel / 2,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Self {
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = s.get("weight", (d_in, d_out), Init::kaiming(d_in))?;
        let bias = if bias {
            Some(s.get("bias", d_out, Init::kaiming(d_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Multiplies the last axis of `x` by a 2D matrix, for inputs of any rank.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = w.dims2()?;
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::shape("matmul of a scalar"))?;
    if last != d_in {
        return Err(Error::shape(format!(
            "matmul: input width {last} does not match weight {:?}",
            w.dims()
        )));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.contiguous()?.reshape((rows, d_in))?.matmul(w)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = d_out;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &mut Scope, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::shape(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            weight: s.get("weight", channels, Init::Const(1.0))?,
            bias: s.get("bias", channels, Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, groups: usize) -> Result<Self> {
        let channels = weight.dim(0)?;
        if channels % groups != 0 {
            return Err(Error::shape(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self { weight, bias, groups, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (b, c) = (dims[0], dims[1]);
        let xg = x.contiguous()?.reshape((b, self.groups, ()))?;
        let n = xg.dim(2)? as f64;
        let mean = (xg.sum_keepdim(2)? / n)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(2)? / n)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape(dims.as_slice())?;
        let mut affine_shape = vec![1; dims.len()];
        affine_shape[1] = c;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(affine_shape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(affine_shape.as_slice())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", dim, Init::Const(1.0))?,
            bias: s.get("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), &crate::params::device())?.to_dtype(dtype)?)
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 conv.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut s.pp("conv"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Errors if any element of `t` is NaN or infinite.
pub fn ensure_finite(t: &Tensor, component: &str) -> Result<()> {
    let s = scalar_f64(&t.abs()?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(component))
    }
}
