//! Contrastive view generation.
//!
//! Each view is a random resized crop, an optional horizontal flip, an
//! optional color jitter (brightness, contrast, saturation and a YIQ hue
//! rotation in random order, clamped to the pixel range) and an optional
//! grayscale conversion. All stages operate directly on [-1, 1] pixels and,
//! apart from the clamp, are linear in the input, so the pipeline has an
//! exact adjoint and fake images can be augmented inside the autodiff graph.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

const GRAY: [f64; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub crop_scale_range: (f64, f64),
    pub flip_probability: f64,
    pub color_jitter_strength: f64,
    /// Probability that the jitter stage runs at all (when strength > 0).
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub seed_root: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.2, 1.0),
            flip_probability: 0.5,
            color_jitter_strength: 0.5,
            jitter_probability: 0.8,
            grayscale_probability: 0.2,
            seed_root: 0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose views equal their input.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            color_jitter_strength: 0.0,
            jitter_probability: 0.8,
            grayscale_probability: 0.0,
            seed_root: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("grayscale_probability", self.grayscale_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.color_jitter_strength >= 0.0) {
            return Err(Error::Config("color_jitter_strength must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColorOp {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    /// Rotation angle of the chroma plane in YIQ space, in radians.
    Hue(f64),
}

/// The sampled transform for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    /// Crop box `(top, left, height, width)` in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
    pub color: Vec<ColorOp>,
    pub grayscale: bool,
}

impl ViewParams {
    pub fn identity(h: usize, w: usize) -> Self {
        ViewParams {
            crop: (0, 0, h, w),
            flip: false,
            color: Vec::new(),
            grayscale: false,
        }
    }
}

/// Sample one view. `key` identifies the image, e.g.
/// `[epoch, batch_index, item, view_id]`.
pub fn sample_view(policy: &AugmentationPolicy, key: [u64; 4], h: usize, w: usize) -> ViewParams {
    let mut rng = seed::rng(policy.seed_root, &key);
    let area = (h * w) as f64;
    let (lo, hi) = policy.crop_scale_range;
    let (rlo, rhi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut crop = (0, 0, h, w);
    for _ in 0..CROP_ATTEMPTS {
        let target = area * if hi > lo { rng.random_range(lo..hi) } else { lo };
        let aspect = rng.random_range(rlo..rhi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            crop = (top, left, ch, cw);
            break;
        }
    }
    let flip = rng.random::<f64>() < policy.flip_probability;
    let mut color = Vec::new();
    let s = policy.color_jitter_strength;
    if s > 0.0 && rng.random::<f64>() < policy.jitter_probability {
        let span = 0.8 * s;
        let factor = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range((1.0 - span).max(0.0)..=1.0 + span);
        let hue_span = (0.2 * s).min(0.5);
        color.push(ColorOp::Brightness(factor(&mut rng)));
        color.push(ColorOp::Contrast(factor(&mut rng)));
        color.push(ColorOp::Saturation(factor(&mut rng)));
        // Hue shift as a fraction of a full turn.
        color.push(ColorOp::Hue(rng.random_range(-hue_span..=hue_span) * std::f64::consts::TAU));
        color.shuffle(&mut rng);
    }
    let grayscale = rng.random::<f64>() < policy.grayscale_probability;
    ViewParams {
        crop,
        flip,
        color,
        grayscale,
    }
}

pub fn sample_views(policy: &AugmentationPolicy, n: usize, a: u64, b: u64, view_id: u64, h: usize, w: usize) -> Vec<ViewParams> {
    (0..n)
        .map(|j| sample_view(policy, [a, b, j as u64, view_id], h, w))
        .collect()
}

/// Two independently augmented views of a (B,3,H,W) batch in [-1, 1].
pub fn simclr_views<T: Scalar>(
    batch: &Tensor<T>,
    policy: &AugmentationPolicy,
    epoch: u64,
    batch_index: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, h, w) = check_batch(batch)?;
    let v0 = sample_views(policy, b, epoch, batch_index, 0, h, w);
    let v1 = sample_views(policy, b, epoch, batch_index, 1, h, w);
    Ok((apply_batch(batch, &v0)?, apply_batch(batch, &v1)?))
}

fn check_batch<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, 3, h, w] => Ok((b, h, w)),
        _ => Err(Error::Shape(format!(
            "augmentation expects (B,3,H,W) images, got {:?}",
            x.shape()
        ))),
    }
}

/// Bilinear taps `(lo, hi, frac)` for resizing a crop `[start, start+len)`
/// onto `out` pixels with half-pixel centers.
fn taps(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (start + lo, start + hi, c - lo as f64)
        })
        .collect()
}

struct Spatial<T> {
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
}

impl<T: Scalar> Spatial<T> {
    fn new(v: &ViewParams, h: usize, w: usize) -> Self {
        let (top, left, ch, cw) = v.crop;
        let cvt = |t: Vec<(usize, usize, f64)>| t.into_iter().map(|(a, b, f)| (a, b, T::from_f64_lossy(f))).collect();
        let mut cols: Vec<_> = cvt(taps(left, cw, w));
        if v.flip {
            cols.reverse();
        }
        Spatial {
            rows: cvt(taps(top, ch, h)),
            cols,
        }
    }

    fn forward(&self, src: &[T], dst: &mut [T], c: usize, h: usize, w: usize) {
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (j, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    dst[(ch * h + i) * w + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }

    fn adjoint(&self, g: &[T], dx: &mut [T], c: usize, h: usize, w: usize) {
        for ch in 0..c {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (j, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let gv = g[(ch * h + i) * w + j];
                    let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                    plane[y0 * w + x0] += gt * (T::one() - fx);
                    plane[y0 * w + x1] += gt * fx;
                    plane[y1 * w + x0] += gb * (T::one() - fx);
                    plane[y1 * w + x1] += gb * fx;
                }
            }
        }
    }
}

/// Chroma rotation by `theta` in YIQ space, expressed in RGB.
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let to_yiq = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];
    let (s, c) = theta.sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    let inv = invert3(&to_yiq);
    mul3(&inv, &mul3(&rot, &to_yiq))
}

fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn gray_weights<T: Scalar>() -> [T; 3] {
    GRAY.map(T::from_f64_lossy)
}

/// Forward pass of one color op on a (3, P) image, in place.
fn color_forward<T: Scalar>(op: &ColorOp, img: &mut [T], p: usize) {
    let wts = gray_weights::<T>();
    match *op {
        ColorOp::Brightness(b) => {
            let b = T::from_f64_lossy(b);
            let off = b - T::one();
            img.iter_mut().for_each(|v| *v = b * *v + off);
        }
        ColorOp::Contrast(c) => {
            let c = T::from_f64_lossy(c);
            let mut m = T::zero();
            for (ch, &wt) in wts.iter().enumerate() {
                m += wt * img[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
            }
            let m = m / T::from_usize_lossy(p);
            let off = (T::one() - c) * m;
            img.iter_mut().for_each(|v| *v = c * *v + off);
        }
        ColorOp::Saturation(s) => {
            let s = T::from_f64_lossy(s);
            for i in 0..p {
                let gray = wts[0] * img[i] + wts[1] * img[p + i] + wts[2] * img[2 * p + i];
                for ch in 0..3 {
                    img[ch * p + i] = s * img[ch * p + i] + (T::one() - s) * gray;
                }
            }
        }
        ColorOp::Hue(theta) => {
            let m = hue_matrix(theta);
            let mt = m.map(|r| r.map(T::from_f64_lossy));
            // Offset keeps the map exact in [0,1] coordinates: x' = M x + (M 1 - 1).
            let off: [T; 3] = std::array::from_fn(|r| T::from_f64_lossy(m[r].iter().sum::<f64>() - 1.0));
            for i in 0..p {
                let v = [img[i], img[p + i], img[2 * p + i]];
                for r in 0..3 {
                    img[r * p + i] = mt[r][0] * v[0] + mt[r][1] * v[1] + mt[r][2] * v[2] + off[r];
                }
            }
        }
    }
}

fn color_adjoint<T: Scalar>(op: &ColorOp, g: &mut [T], p: usize) {
    let wts = gray_weights::<T>();
    match *op {
        ColorOp::Brightness(b) => {
            let b = T::from_f64_lossy(b);
            g.iter_mut().for_each(|v| *v *= b);
        }
        ColorOp::Contrast(c) => {
            let c = T::from_f64_lossy(c);
            let total: T = g.iter().copied().sum();
            let k = (T::one() - c) * total / T::from_usize_lossy(p);
            for ch in 0..3 {
                for v in &mut g[ch * p..(ch + 1) * p] {
                    *v = c * *v + k * wts[ch];
                }
            }
        }
        ColorOp::Saturation(s) => {
            let s = T::from_f64_lossy(s);
            for i in 0..p {
                let sum = g[i] + g[p + i] + g[2 * p + i];
                for ch in 0..3 {
                    g[ch * p + i] = s * g[ch * p + i] + (T::one() - s) * wts[ch] * sum;
                }
            }
        }
        ColorOp::Hue(theta) => {
            let m = hue_matrix(theta).map(|r| r.map(T::from_f64_lossy));
            for i in 0..p {
                let v = [g[i], g[p + i], g[2 * p + i]];
                for r in 0..3 {
                    g[r * p + i] = m[0][r] * v[0] + m[1][r] * v[1] + m[2][r] * v[2];
                }
            }
        }
    }
}

fn grayscale_forward<T: Scalar>(img: &mut [T], p: usize) {
    let wts = gray_weights::<T>();
    for i in 0..p {
        let gray = wts[0] * img[i] + wts[1] * img[p + i] + wts[2] * img[2 * p + i];
        for ch in 0..3 {
            img[ch * p + i] = gray;
        }
    }
}

fn grayscale_adjoint<T: Scalar>(g: &mut [T], p: usize) {
    let wts = gray_weights::<T>();
    for i in 0..p {
        let sum = g[i] + g[p + i] + g[2 * p + i];
        for ch in 0..3 {
            g[ch * p + i] = wts[ch] * sum;
        }
    }
}

/// Spatial stage plus color ops, before clamping.
fn pre_clamp<T: Scalar>(src: &[T], v: &ViewParams, h: usize, w: usize) -> Vec<T> {
    let p = h * w;
    let mut out = vec![T::zero(); 3 * p];
    Spatial::new(v, h, w).forward(src, &mut out, 3, h, w);
    for op in &v.color {
        color_forward(op, &mut out, p);
    }
    out
}

pub fn apply_batch<T: Scalar>(x: &Tensor<T>, views: &[ViewParams]) -> Result<Tensor<T>> {
    let (b, h, w) = check_batch(x)?;
    if views.len() != b {
        return Err(Error::Contract(format!("{} view params for a batch of {b}", views.len())));
    }
    let p = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (n, v) in views.iter().enumerate() {
        let src = &x.data()[n * 3 * p..(n + 1) * 3 * p];
        let mut img = pre_clamp(src, v, h, w);
        if !v.color.is_empty() {
            img.iter_mut().for_each(|e| *e = e.max(-T::one()).min(T::one()));
        }
        if v.grayscale {
            grayscale_forward(&mut img, p);
        }
        out.data_mut()[n * 3 * p..(n + 1) * 3 * p].copy_from_slice(&img);
    }
    Ok(out)
}

/// Vector-Jacobian product of [`apply_batch`] at `x`.
pub fn apply_batch_adjoint<T: Scalar>(x: &Tensor<T>, views: &[ViewParams], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = check_batch(x)?;
    grad.expect_shape(x.shape())?;
    let p = h * w;
    let mut dx = Tensor::zeros(x.shape());
    for (n, v) in views.iter().enumerate().take(b) {
        let mut g = grad.data()[n * 3 * p..(n + 1) * 3 * p].to_vec();
        if v.grayscale {
            grayscale_adjoint(&mut g, p);
        }
        if !v.color.is_empty() {
            let pre = pre_clamp(&x.data()[n * 3 * p..(n + 1) * 3 * p], v, h, w);
            for (gv, &pv) in g.iter_mut().zip(&pre) {
                if pv < -T::one() || pv > T::one() {
                    *gv = T::zero();
                }
            }
            for op in v.color.iter().rev() {
                color_adjoint(op, &mut g, p);
            }
        }
        Spatial::new(v, h, w).adjoint(&g, &mut dx.data_mut()[n * 3 * p..(n + 1) * 3 * p], 3, h, w);
    }
    Ok(dx)
}
