//! Direct 2-D cross-correlation with stride, dilation, zero padding and
//! asymmetric kernels, together with its two adjoints.
//!
//! Three kernels do all the work:
//!
//! * `correlate` is the forward convolution,
//! * `scatter` is its adjoint with respect to the input, which is both the
//!   input gradient and the transposed convolution,
//! * `weight_grad` is the adjoint with respect to the kernel.
//!
//! Each output plane is owned by exactly one task and accumulates its terms
//! in a fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Weights and geometry of one convolution.
///
/// `weight` has dims `(C_out, C_in, kH, kW)` when used with [`conv2d`]. The
/// transposed convolution uses the same tensor as the adjoint of that
/// convolution, so it maps `C_out` channels back to `C_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor4<T>) -> Self {
        ConvParams {
            weight,
            bias: None,
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn with_dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    /// Padding that keeps a stride-1 convolution at input resolution:
    /// `d * (k - 1) / 2` per axis.
    pub fn with_same_padding(mut self) -> Self {
        let (kh, kw) = self.kernel();
        self.padding = (
            self.dilation.0 * (kh.saturating_sub(1)) / 2,
            self.dilation.1 * (kw.saturating_sub(1)) / 2,
        );
        self
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    /// Dilation-effective kernel extent `d * (k - 1) + 1` per axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            self.dilation.0 * (kh - 1) + 1,
            self.dilation.1 * (kw - 1) + 1,
        )
    }

    pub fn num_elements(&self) -> usize {
        self.weight.shape().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn validate(&self, op: &'static str) -> Result<Geom> {
        let s = self.weight.shape();
        if s.is_empty() {
            return Err(Error::invalid(op, format!("empty weight {s}")));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid(op, "stride must be at least 1"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::invalid(op, "dilation must be at least 1"));
        }
        Ok(Geom {
            kh: s.h,
            kw: s.w,
            sh: self.stride.0,
            sw: self.stride.1,
            dh: self.dilation.0,
            dw: self.dilation.1,
            ph: self.padding.0,
            pw: self.padding.1,
        })
    }
}

/// Gradients of `sum(dy * f(x))` for a convolution `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    /// Per-output-channel sum of `dy`; computed even when the layer has no bias.
    pub bias: Vec<T>,
}

/// `floor((input + 2p - d(k-1) - 1) / s) + 1`, or `None` if the effective
/// kernel does not fit the padded input.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let eff = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if eff > padded {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

/// `(input - 1) s - 2p + d(k-1) + 1 + output_padding`, or `None` when that is
/// not a positive extent.
pub fn transposed_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 || kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let full = (input - 1) * stride + dilation * (kernel - 1) + 1 + output_padding;
    match full.checked_sub(2 * padding) {
        Some(e) if e > 0 => Some(e),
        _ => None,
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let g = p.validate("conv2d")?;
    let out_shape = conv_shape("conv2d", x.shape(), p, &g)?;
    Ok(correlate(x, &p.weight, p.bias.as_deref(), g, out_shape))
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    dy: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let g = p.validate("conv2d_backward")?;
    let out_shape = conv_shape("conv2d_backward", x.shape(), p, &g)?;
    if dy.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {} but output is {out_shape}", dy.shape()),
        ));
    }
    Ok(ConvGrads {
        input: scatter(dy, &p.weight, None, g, x.shape()),
        weight: weight_grad(x, dy, g, p.weight.shape()),
        bias: channel_sums(dy),
    })
}

/// Transposed convolution, defined as the input-gradient of [`conv2d`] with
/// the same weights, plus an optional bias over the `C_in` output channels.
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    output_padding: (usize, usize),
) -> Result<Tensor4<T>> {
    let g = p.validate("transposed_conv2d")?;
    let out_shape = transposed_shape("transposed_conv2d", x.shape(), p, &g, output_padding)?;
    Ok(scatter(x, &p.weight, p.bias.as_deref(), g, out_shape))
}

pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    output_padding: (usize, usize),
    dy: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let g = p.validate("transposed_conv2d_backward")?;
    let out_shape = transposed_shape(
        "transposed_conv2d_backward",
        x.shape(),
        p,
        &g,
        output_padding,
    )?;
    if dy.shape() != out_shape {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!("upstream gradient {} but output is {out_shape}", dy.shape()),
        ));
    }
    Ok(ConvGrads {
        input: correlate(dy, &p.weight, None, g, x.shape()),
        weight: weight_grad(dy, x, g, p.weight.shape()),
        bias: channel_sums(dy),
    })
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    ph: usize,
    pw: usize,
}

impl Geom {
    #[inline]
    fn offset_h(&self, k: usize) -> isize {
        (k * self.dh) as isize - self.ph as isize
    }

    #[inline]
    fn offset_w(&self, k: usize) -> isize {
        (k * self.dw) as isize - self.pw as isize
    }
}

fn conv_shape<T: Scalar>(
    op: &'static str,
    xs: Shape4,
    p: &ConvParams<T>,
    g: &Geom,
) -> Result<Shape4> {
    let ws = p.weight.shape();
    if xs.c != ws.c {
        return Err(Error::shape(
            op,
            format!("input channels {} but weight expects {}", xs.c, ws.c),
        ));
    }
    check_bias(op, p, ws.n)?;
    let (eh, ew) = p.effective_kernel();
    let oh = conv_output_extent(xs.h, g.kh, g.sh, g.dh, g.ph).ok_or_else(|| {
        Error::shape(
            op,
            format!(
                "height: effective kernel extent {eh} exceeds padded input extent {}",
                xs.h + 2 * g.ph
            ),
        )
    })?;
    let ow = conv_output_extent(xs.w, g.kw, g.sw, g.dw, g.pw).ok_or_else(|| {
        Error::shape(
            op,
            format!(
                "width: effective kernel extent {ew} exceeds padded input extent {}",
                xs.w + 2 * g.pw
            ),
        )
    })?;
    let out = Shape4::new(xs.n, ws.n, oh, ow);
    if out.is_empty() {
        return Err(Error::shape(op, format!("zero-size output {out}")));
    }
    Ok(out)
}

fn transposed_shape<T: Scalar>(
    op: &'static str,
    xs: Shape4,
    p: &ConvParams<T>,
    g: &Geom,
    output_padding: (usize, usize),
) -> Result<Shape4> {
    let ws = p.weight.shape();
    if xs.c != ws.n {
        return Err(Error::shape(
            op,
            format!("input channels {} but weight expects {}", xs.c, ws.n),
        ));
    }
    check_bias(op, p, ws.c)?;
    if output_padding.0 >= g.sh || output_padding.1 >= g.sw {
        return Err(Error::invalid(
            op,
            format!(
                "output padding {output_padding:?} must be smaller than stride {:?}",
                (g.sh, g.sw)
            ),
        ));
    }
    let oh = transposed_output_extent(xs.h, g.kh, g.sh, g.dh, g.ph, output_padding.0)
        .ok_or_else(|| Error::shape(op, format!("height: no positive output extent for {xs}")))?;
    let ow = transposed_output_extent(xs.w, g.kw, g.sw, g.dw, g.pw, output_padding.1)
        .ok_or_else(|| Error::shape(op, format!("width: no positive output extent for {xs}")))?;
    let out = Shape4::new(xs.n, ws.c, oh, ow);
    if out.is_empty() {
        return Err(Error::shape(op, format!("zero-size output {out}")));
    }
    Ok(out)
}

fn check_bias<T: Scalar>(op: &'static str, p: &ConvParams<T>, channels: usize) -> Result<()> {
    match &p.bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias length {} but {channels} output channels", b.len()),
        )),
        _ => Ok(()),
    }
}

/// Output indices `o` in `[0, out_len)` with `0 <= o*stride + offset < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

#[allow(clippy::needless_range_loop)]
fn correlate<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    g: Geom,
    out_shape: Shape4,
) -> Tensor4<T> {
    let xs = x.shape();
    let (cin, cout) = (xs.c, out_shape.c);
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let in_plane = xs.plane_len();
    let xdata = x.data();
    let wdata = weight.data();
    let mut out = Tensor4::zeros(out_shape);

    out.data_mut()
        .par_chunks_mut(out_shape.plane_len())
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, co) = (idx / cout, idx % cout);
            dst.fill(bias.map_or(T::zero(), |b| b[co]));
            for ci in 0..cin {
                let src = &xdata[(n * cin + ci) * in_plane..][..in_plane];
                let wbase = (co * cin + ci) * g.kh * g.kw;
                for kh in 0..g.kh {
                    let off_h = g.offset_h(kh);
                    let (oy0, oy1) = valid_range(oh, ih, g.sh, off_h);
                    for kw in 0..g.kw {
                        let wv = wdata[wbase + kh * g.kw + kw];
                        let off_w = g.offset_w(kw);
                        let (ox0, ox1) = valid_range(ow, iw, g.sw, off_w);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * g.sh) as isize + off_h;
                            let srow = &src[iy as usize * iw..][..iw];
                            let drow = &mut dst[oy * ow..][..ow];
                            if g.sw == 1 {
                                let ix0 = (ox0 as isize + off_w) as usize;
                                let len = ox1 - ox0;
                                for (d, &s) in drow[ox0..ox1].iter_mut().zip(&srow[ix0..ix0 + len])
                                {
                                    *d = *d + wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * g.sw) as isize + off_w) as usize;
                                    drow[ox] = drow[ox] + wv * srow[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of `correlate` in its input: maps `(N, C_out, OH, OW)` to
/// `in_shape = (N, C_in, H, W)`.
#[allow(clippy::needless_range_loop)]
fn scatter<T: Scalar>(
    dy: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    g: Geom,
    in_shape: Shape4,
) -> Tensor4<T> {
    let ys = dy.shape();
    let (cout, cin) = (ys.c, in_shape.c);
    let (oh, ow) = (ys.h, ys.w);
    let (ih, iw) = (in_shape.h, in_shape.w);
    let out_plane = ys.plane_len();
    let ydata = dy.data();
    let wdata = weight.data();
    let mut dx = Tensor4::zeros(in_shape);

    dx.data_mut()
        .par_chunks_mut(in_shape.plane_len())
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, ci) = (idx / cin, idx % cin);
            dst.fill(bias.map_or(T::zero(), |b| b[ci]));
            for co in 0..cout {
                let src = &ydata[(n * cout + co) * out_plane..][..out_plane];
                let wbase = (co * cin + ci) * g.kh * g.kw;
                for kh in 0..g.kh {
                    let off_h = g.offset_h(kh);
                    let (oy0, oy1) = valid_range(oh, ih, g.sh, off_h);
                    for kw in 0..g.kw {
                        let wv = wdata[wbase + kh * g.kw + kw];
                        let off_w = g.offset_w(kw);
                        let (ox0, ox1) = valid_range(ow, iw, g.sw, off_w);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = ((oy * g.sh) as isize + off_h) as usize;
                            let srow = &src[oy * ow..][..ow];
                            let drow = &mut dst[iy * iw..][..iw];
                            if g.sw == 1 {
                                let ix0 = (ox0 as isize + off_w) as usize;
                                let len = ox1 - ox0;
                                for (d, &s) in drow[ix0..ix0 + len].iter_mut().zip(&srow[ox0..ox1])
                                {
                                    *d = *d + wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * g.sw) as isize + off_w) as usize;
                                    drow[ix] = drow[ix] + wv * srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of `sum(dy * correlate(x, W))` with respect to `W`.
#[allow(clippy::needless_range_loop)]
fn weight_grad<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>, g: Geom, wshape: Shape4) -> Tensor4<T> {
    let xs = x.shape();
    let ys = dy.shape();
    let (cin, cout) = (xs.c, ys.c);
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (ys.h, ys.w);
    let (in_plane, out_plane) = (xs.plane_len(), ys.plane_len());
    let xdata = x.data();
    let ydata = dy.data();
    let mut dw = Tensor4::zeros(wshape);

    dw.data_mut()
        .par_chunks_mut(cin * g.kh * g.kw)
        .enumerate()
        .for_each(|(co, dst)| {
            for ci in 0..cin {
                for kh in 0..g.kh {
                    let off_h = g.offset_h(kh);
                    let (oy0, oy1) = valid_range(oh, ih, g.sh, off_h);
                    for kw in 0..g.kw {
                        let off_w = g.offset_w(kw);
                        let (ox0, ox1) = valid_range(ow, iw, g.sw, off_w);
                        let mut acc = T::zero();
                        if ox0 < ox1 {
                            for n in 0..xs.n {
                                let src = &xdata[(n * cin + ci) * in_plane..][..in_plane];
                                let up = &ydata[(n * cout + co) * out_plane..][..out_plane];
                                for oy in oy0..oy1 {
                                    let iy = ((oy * g.sh) as isize + off_h) as usize;
                                    let srow = &src[iy * iw..][..iw];
                                    let urow = &up[oy * ow..][..ow];
                                    if g.sw == 1 {
                                        let ix0 = (ox0 as isize + off_w) as usize;
                                        let len = ox1 - ox0;
                                        acc = urow[ox0..ox1]
                                            .iter()
                                            .zip(&srow[ix0..ix0 + len])
                                            .fold(acc, |a, (&u, &s)| a + u * s);
                                    } else {
                                        for ox in ox0..ox1 {
                                            let ix = ((ox * g.sw) as isize + off_w) as usize;
                                            acc = acc + urow[ox] * srow[ix];
                                        }
                                    }
                                }
                            }
                        }
                        dst[(ci * g.kh + kh) * g.kw + kw] = acc;
                    }
                }
            }
        });
    dw
}

fn channel_sums<T: Scalar>(t: &Tensor4<T>) -> Vec<T> {
    let s = t.shape();
    (0..s.c)
        .map(|c| {
            (0..s.n).fold(T::zero(), |acc, n| {
                t.plane(n, c).iter().fold(acc, |a, &v| a + v)
            })
        })
        .collect()
}
