//! Forward kernels and their vector-Jacobian products on plain tensors.
//!
//! The tape calls into these; they are also usable directly for inference
//! paths that never need gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(out: usize, input: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let (s, p, k, n) = (stride as isize, padding as isize, k as isize, input as isize);
    // need 0 <= o*s + k - p <= n - 1
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi = (n - 1 + p - k).div_euclid(s) + 1;
    let hi = hi.clamp(0, out as isize);
    (lo.min(hi) as usize, hi as usize)
}

fn check_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (_, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {} channels but weight {:?} expects {}",
                input.shape(),
                cin,
                weight.shape(),
                wcin
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extents must be odd, weight is {:?}", weight.shape()),
        ));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {:?} (padding {}) smaller than kernel {:?}",
                input.shape(),
                padding,
                weight.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), cout),
            ));
        }
    }
    Ok((cin, h, w, cout, kh, kw))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (cin, h, w, cout, kh, kw) = check_conv(input, weight, bias, stride, padding)?;
    let batch = input.shape()[0];
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = tap_range(oh, h, ky, stride, padding);
                    for kx in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = tap_range(ow, w, kx, stride, padding);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let row = &src[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w, cout, kh, kw) = check_conv(input, weight, None, stride, padding)?;
    let batch = input.shape()[0];
    let (_, _, oh, ow) = grad_out.dims4()?;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..batch {
        for co in 0..cout {
            let gplane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (b * cin + ci) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = tap_range(oh, h, ky, stride, padding);
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let (ox0, ox1) = tap_range(ow, w, kx, stride, padding);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ii = base + iy * w + ox * stride + kx - padding;
                                let gv = grow[ox];
                                acc += gv * x[ii];
                                gx[ii] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// Source sample for output index `i` of a bilinear resize by `factor`
/// (align-corners false): lower index, upper index, weight of the upper one.
fn bilinear_source(i: usize, factor: usize, extent: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, src - lo as f64)
}

pub fn bilinear_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (b, c, h, w) = input.dims4()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ys: Vec<_> = (0..oh).map(|i| bilinear_source(i, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|i| bilinear_source(i, factor, w)).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn bilinear_upsample_backward(
    input_shape: &[usize],
    grad_out: &Tensor,
    factor: usize,
) -> Result<Tensor> {
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ys: Vec<_> = (0..oh).map(|i| bilinear_source(i, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|i| bilinear_source(i, factor, w)).collect();
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (gplane, plane) in grad_out.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

/// Hadamard product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {} out of range for shape {:?}", axis, first.shape()),
        ));
    }
    for t in tensors {
        let same_rank = t.shape().len() == rank;
        let off_axis_equal = same_rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !off_axis_equal {
            return Err(Error::shape(
                "concat",
                format!(
                    "shape {:?} incompatible with {:?} off axis {}",
                    t.shape(),
                    first.shape(),
                    axis
                ),
            ));
        }
    }
    let total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in tensors {
            let n = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
        }
    }
    Tensor::new(shape, data)
}

/// Contiguous sub-range `[start, start + len)` along `axis`.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape(
            "slice",
            format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
        ));
    }
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data)
}

/// Quantization clip-floor activation
/// `lambda * clip(floor(x * levels / lambda + shift) / levels, 0, 1)`.
///
/// `shift` is 0 for the plain clip-floor form and 0.5 for the half-step variant.
pub fn qcfs(x: &Tensor, lambda: f64, levels: usize, shift: f64) -> Tensor {
    let l = levels as f64;
    x.map(|v| lambda * (((v * l / lambda) + shift).floor() / l).clamp(0.0, 1.0))
}

/// Continuous relaxation `clip(x, 0, lambda)` whose exact derivative is the
/// straight-through rule used for [`qcfs`].
pub fn clip_relaxed(x: &Tensor, lambda: f64) -> Tensor {
    x.map(|v| v.clamp(0.0, lambda))
}

/// Straight-through gradients of [`qcfs`]: `(d/dx, d/dlambda summed)`.
pub fn qcfs_backward(x: &Tensor, lambda: f64, grad_out: &Tensor) -> (Tensor, f64) {
    let mut glambda = 0.0;
    let gx = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            if v > lambda {
                glambda += g;
                0.0
            } else if v >= 0.0 {
                g
            } else {
                0.0
            }
        })
        .collect();
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: gx,
        },
        glambda,
    )
}

/// Heaviside firing function: 1 where `v >= theta`.
pub fn heaviside(v: &Tensor, theta: f64) -> Tensor {
    v.map(|x| if x >= theta { 1.0 } else { 0.0 })
}

/// Smooth arctan relaxation of the Heaviside step, `atan(pi x) / pi + 1/2`.
pub fn arctan_step(x: f64) -> f64 {
    (std::f64::consts::PI * x).atan() / std::f64::consts::PI + 0.5
}

/// Derivative of [`arctan_step`], `1 / (1 + pi^2 x^2)`.
pub fn arctan_step_grad(x: f64) -> f64 {
    let px = std::f64::consts::PI * x;
    1.0 / (1.0 + px * px)
}
