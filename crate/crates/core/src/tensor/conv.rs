//! Convolution, transposed convolution and pooling kernels over NCHW tensors.
//!
//! Convolutions lower to one GEMM per batch item through `im2col`; the
//! transposed convolution is the adjoint of that lowering. Every reduction
//! across the batch runs in a fixed order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use super::matmul::{gemm, MatMut, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Kernel size, stride and zero padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    /// Output spatial size of a forward convolution.
    pub fn conv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.ph < self.kh || w + 2 * self.pw < self.kw {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than kernel {}x{} with padding",
                self.kh, self.kw
            )));
        }
        Ok((
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        ))
    }

    /// Output spatial size of a transposed convolution.
    pub fn transpose_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = (h.max(1) - 1) * self.sh + self.kh;
        let wo = (w.max(1) - 1) * self.sw + self.kw;
        if ho < 2 * self.ph + 1 || wo < 2 * self.pw + 1 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "transposed convolution of {h}x{w} collapses with padding {}x{}",
                self.ph, self.pw
            )));
        }
        Ok((ho - 2 * self.ph, wo - 2 * self.pw))
    }
}

fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, col: &mut [T]) {
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into an image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, img: &mut [T]) {
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what} must be rank 4 (NCHW), got {:?}",
            t.shape()
        ))),
    }
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (b, c, h, w) = dims4(out, "output")?;
    bias.expect_shape(&[c])?;
    let plane = h * w;
    let data = out.data_mut();
    for n in 0..b {
        for ch in 0..c {
            let bv = bias.data()[ch];
            for v in &mut data[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                *v += bv;
            }
        }
    }
    Ok(())
}

/// Sum of a NCHW gradient over batch and space, per channel.
pub fn channel_sums<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    let (b, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut out = vec![T::zero(); c];
    for n in 0..b {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (n * c + ch) * plane;
            for &v in &grad.data()[start..start + plane] {
                *acc += v;
            }
        }
    }
    Tensor::from_vec(&[c], out).expect("channel sums")
}

/// Cross-correlation of `x` (B,C,H,W) with `weight` (O,C,kh,kw).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "conv2d input")?;
    let (o, wc, kh, kw) = dims4(weight, "conv2d weight")?;
    if wc != c || kh != g.kh || kw != g.kw {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} does not match input channels {c} / kernel {}x{}",
            weight.shape(),
            g.kh,
            g.kw
        )));
    }
    let (ho, wo) = g.conv_out(h, w)?;
    let ckk = c * kh * kw;
    let p = ho * wo;
    let mut col = vec![T::zero(); ckk * p];
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    let img_len = c * h * w;
    for n in 0..b {
        im2col(&x.data()[n * img_len..(n + 1) * img_len], c, h, w, g, ho, wo, &mut col);
        let dst = &mut out.data_mut()[n * o * p..(n + 1) * o * p];
        gemm(
            T::one(),
            MatRef::new(weight.data(), o, ckk),
            MatRef::new(&col, ckk, p),
            T::zero(),
            MatMut::new(dst, o, p),
        );
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias)?;
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, c, h, w) = dims4(x, "conv2d input")?;
    let (o, _, kh, kw) = dims4(weight, "conv2d weight")?;
    let (_, _, ho, wo) = dims4(grad_out, "conv2d grad")?;
    let ckk = c * kh * kw;
    let p = ho * wo;
    let img_len = c * h * w;
    let mut col = vec![T::zero(); ckk * p];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    for n in 0..b {
        let gout = &grad_out.data()[n * o * p..(n + 1) * o * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[n * img_len..(n + 1) * img_len], c, h, w, g, ho, wo, &mut col);
            gemm(
                T::one(),
                MatRef::new(gout, o, p),
                MatRef::new(&col, ckk, p).t(),
                T::one(),
                MatMut::new(dw.data_mut(), o, ckk),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(weight.data(), o, ckk).t(),
                MatRef::new(gout, o, p),
                T::zero(),
                MatMut::new(&mut col, ckk, p),
            );
            col2im(&col, c, h, w, g, ho, wo, &mut dx.data_mut()[n * img_len..(n + 1) * img_len]);
        }
    }
    Ok((dx, dw))
}

/// Transposed convolution of `x` (B,Cin,H,W) with `weight` (Cin,Cout,kh,kw).
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let (b, cin, h, w) = dims4(x, "conv_transpose2d input")?;
    let (wcin, cout, kh, kw) = dims4(weight, "conv_transpose2d weight")?;
    if wcin != cin || kh != g.kh || kw != g.kw {
        return Err(Error::Shape(format!(
            "conv_transpose2d weight {:?} does not match input channels {cin} / kernel {}x{}",
            weight.shape(),
            g.kh,
            g.kw
        )));
    }
    let (ho, wo) = g.transpose_out(h, w)?;
    let ckk = cout * kh * kw;
    let p = h * w;
    let out_len = cout * ho * wo;
    let mut col = vec![T::zero(); ckk * p];
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        gemm(
            T::one(),
            MatRef::new(weight.data(), cin, ckk).t(),
            MatRef::new(&x.data()[n * cin * p..(n + 1) * cin * p], cin, p),
            T::zero(),
            MatMut::new(&mut col, ckk, p),
        );
        col2im(&col, cout, ho, wo, g, h, w, &mut out.data_mut()[n * out_len..(n + 1) * out_len]);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias)?;
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, cin, h, w) = dims4(x, "conv_transpose2d input")?;
    let (_, cout, kh, kw) = dims4(weight, "conv_transpose2d weight")?;
    let (_, _, ho, wo) = dims4(grad_out, "conv_transpose2d grad")?;
    let ckk = cout * kh * kw;
    let p = h * w;
    let out_len = cout * ho * wo;
    let mut col = vec![T::zero(); ckk * p];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    for n in 0..b {
        im2col(&grad_out.data()[n * out_len..(n + 1) * out_len], cout, ho, wo, g, h, w, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(weight.data(), cin, ckk),
                MatRef::new(&col, ckk, p),
                T::zero(),
                MatMut::new(&mut dx.data_mut()[n * cin * p..(n + 1) * cin * p], cin, p),
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                T::one(),
                MatRef::new(&x.data()[n * cin * p..(n + 1) * cin * p], cin, p),
                MatRef::new(&col, ckk, p).t(),
                T::one(),
                MatMut::new(dw.data_mut(), cin, ckk),
            );
        }
    }
    Ok((dx, dw))
}

/// `x` (B, in) times `weight^T` where `weight` is (out, in), plus bias.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, fin) = match *x.shape() {
        [b, f] => (b, f),
        _ => return Err(Error::Shape(format!("linear input must be rank 2, got {:?}", x.shape()))),
    };
    let (fout, win) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", weight.shape()))),
    };
    if win != fin {
        return Err(Error::Shape(format!(
            "linear weight {:?} does not accept {fin} input features",
            weight.shape()
        )));
    }
    let mut out = Tensor::zeros(&[b, fout]);
    gemm(
        T::one(),
        MatRef::new(x.data(), b, fin),
        MatRef::new(weight.data(), fout, fin).t(),
        T::zero(),
        MatMut::new(out.data_mut(), b, fout),
    );
    if let Some(bias) = bias {
        bias.expect_shape(&[fout])?;
        for row in out.data_mut().chunks_exact_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Max pooling without padding (inference only).
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "max_pool2d input")?;
    let g = ConvGeom::square(k, stride, 0);
    let (ho, wo) = g.conv_out(h, w)?;
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let od = out.data_mut();
    for nc in 0..b * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = T::neg_infinity();
                for ki in 0..k {
                    for kj in 0..k {
                        m = m.max(plane[(oy * stride + ki) * w + ox * stride + kj]);
                    }
                }
                od[(nc * ho + oy) * wo + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Average pooling with symmetric zero padding (inference only). With
/// `count_include_pad == false` the divisor counts only in-bounds taps.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize, count_include_pad: bool) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "avg_pool2d input")?;
    let g = ConvGeom::square(k, stride, pad);
    let (ho, wo) = g.conv_out(h, w)?;
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let od = out.data_mut();
    for nc in 0..b * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                let mut count = 0usize;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        s += plane[iy as usize * w + ix as usize];
                        count += 1;
                    }
                }
                let div = if count_include_pad { k * k } else { count.max(1) };
                od[(nc * ho + oy) * wo + ox] = s / T::from_usize_lossy(div);
            }
        }
    }
    Ok(out)
}

/// Mean over the spatial axes: (B,C,H,W) -> (B,C).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "global_avg_pool input")?;
    let plane = h * w;
    let inv = T::one() / T::from_usize_lossy(plane);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "resize input")?;
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::from_f64_lossy(src - i0 as f64))
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    let od = out.data_mut();
    for nc in 0..b * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                od[(nc * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}
