//! Feature extractors: the interface consumed by FID/IS and a small
//! fixed-seed convolutional network that implements it without any external
//! weights.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::conv::{conv2d, global_avg_pool, linear, ConvGeom};
use crate::tensor::Tensor;

pub trait FeatureExtractor<T: Scalar> {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Largest batch handed to [`FeatureExtractor::extract`] at once.
    fn chunk_size(&self) -> usize {
        256
    }
    /// Features (n, D) and class probabilities (n, K) of (n, 3, 32, 32)
    /// images in [-1, 1].
    fn extract(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Run an extractor over a large batch in chunks.
pub fn extract_all<T: Scalar>(ex: &dyn FeatureExtractor<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = images.dim(0);
    let mut feats = Vec::new();
    let mut probs = Vec::new();
    let step = ex.chunk_size().max(1);
    let mut start = 0;
    while start < n {
        let end = (start + step).min(n);
        let (f, p) = ex.extract(&images.slice_outer(start, end))?;
        feats.push(f);
        probs.push(p);
        start = end;
    }
    if feats.is_empty() {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: 1,
            available: 0,
        });
    }
    Ok((
        Tensor::cat_outer(&feats.iter().collect::<Vec<_>>())?,
        Tensor::cat_outer(&probs.iter().collect::<Vec<_>>())?,
    ))
}

/// Row-wise softmax of (n, K) logits.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

const TOY_SEED: u64 = 0x746f_795f_6578_7472;
const TOY_WIDTHS: [usize; 3] = [16, 16, 32];
const TOY_CLASSES: usize = 10;

/// Three random strided convolutions (He-scaled normal weights) with leaky
/// ReLU; the 64-d feature is the concatenated global average of every
/// layer's activations. Class probabilities come from a fixed random linear
/// probe followed by softmax.
pub struct ToyExtractor<T> {
    convs: Vec<(Tensor<T>, Tensor<T>)>,
    probe: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> Default for ToyExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ToyExtractor<T> {
    pub fn new() -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in TOY_WIDTHS.iter().enumerate() {
            let fan_in = cin * 16;
            let w = gaussian(&[c, cin, 4, 4], (2.0 / fan_in as f64).sqrt(), &[i as u64, 0]);
            let b = gaussian(&[c], 0.1, &[i as u64, 1]);
            convs.push((w, b));
            cin = c;
        }
        let d: usize = TOY_WIDTHS.iter().sum();
        let probe = (
            gaussian(&[TOY_CLASSES, d], 4.0 / (d as f64).sqrt(), &[99, 0]),
            gaussian(&[TOY_CLASSES], 0.1, &[99, 1]),
        );
        ToyExtractor { convs, probe }
    }
}

fn gaussian<T: Scalar>(shape: &[usize], std: f64, path: &[u64]) -> Tensor<T> {
    let mut rng = seed::rng(TOY_SEED, path);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()).expect("shape")
}

impl<T: Scalar> FeatureExtractor<T> for ToyExtractor<T> {
    fn id(&self) -> String {
        "toy-v1".into()
    }

    fn feature_dim(&self) -> usize {
        TOY_WIDTHS.iter().sum()
    }

    fn class_count(&self) -> usize {
        TOY_CLASSES
    }

    fn extract(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        match *images.shape() {
            [_, 3, 32, 32] => {}
            _ => return Err(Error::Shape(format!("toy extractor expects (n, 3, 32, 32), got {:?}", images.shape()))),
        }
        let n = images.dim(0);
        let slope = T::from_f64_lossy(0.2);
        let mut x = images.clone();
        let mut pooled = Vec::new();
        for (w, b) in &self.convs {
            x = conv2d(&x, w, Some(b), &ConvGeom::square(4, 2, 1))?.map(|v| if v > T::zero() { v } else { v * slope });
            pooled.push(global_avg_pool(&x)?);
        }
        let d = self.feature_dim();
        let mut feats = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let mut off = 0;
            for p in &pooled {
                let c = p.dim(1);
                feats.data_mut()[i * d + off..i * d + off + c].copy_from_slice(p.row(i));
                off += c;
            }
        }
        let logits = linear(&feats, &self.probe.0, Some(&self.probe.1))?;
        Ok((feats, softmax_rows(&logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_contract() {
        let ex = ToyExtractor::<f64>::new();
        let x = Tensor::full(&[3, 3, 32, 32], 0.3);
        let (f, p) = ex.extract(&x).unwrap();
        assert_eq!(f.shape(), &[3, 64]);
        assert_eq!(p.shape(), &[3, 10]);
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (f2, _) = ex.extract(&x).unwrap();
        assert_eq!(f, f2);
        assert!(ex.extract(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }
}
