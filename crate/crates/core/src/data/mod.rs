//! Labeled image sets, CIFAR-10 ingestion, long-tailed subsets and
//! augmentation.

pub mod augment;
pub mod cifar;
pub mod longtail;
pub mod store;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Ordered (image, label) pairs. Images are 32x32 RGB, stored as planar
/// R, G, B bytes exactly as in the CIFAR binary records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImageSet {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    class_names: Vec<String>,
    per_class_counts: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, class_names: Vec<String>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Shape(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        let c = class_names.len();
        let mut counts = vec![0usize; c];
        for &l in &labels {
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::Contract(format!("label {l} outside [0, {c})")))?;
            *slot += 1;
        }
        Ok(LabeledImageSet {
            pixels,
            labels,
            class_names,
            per_class_counts: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn per_class_counts(&self) -> &[usize] {
        &self.per_class_counts
    }

    /// Indices of class `c` in set order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("index {i} outside set of {}", self.len())));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImageSet::new(pixels, labels, self.class_names.clone())
    }

    /// GAN input tensor (N, 3, 32, 32) of the images at `indices`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut raw = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            raw.extend_from_slice(self.image(i));
        }
        gan_preprocess(&raw).expect("whole images")
    }

    /// Every image, preprocessed.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        gan_preprocess(&self.pixels).expect("whole images")
    }
}

/// uint8 images (planar, 3072 bytes each) to [-1, 1] via `x / 127.5 - 1`.
pub fn gan_preprocess<T: Scalar>(raw: &[u8]) -> Result<Tensor<T>> {
    if raw.len() % PIXELS != 0 {
        return Err(Error::Shape(format!("{} bytes is not a whole number of images", raw.len())));
    }
    let scale: T = lit(1.0 / 127.5);
    let data = raw.iter().map(|&p| T::from_f64_lossy(p as f64) * scale - T::one()).collect();
    Tensor::from_vec(&[raw.len() / PIXELS, 3, SIDE, SIDE], data)
}

/// Inverse of [`gan_preprocess`]: `round((x + 1) * 127.5)`, clamped.
pub fn gan_postprocess<T: Scalar>(x: &Tensor<T>) -> Vec<u8> {
    x.data()
        .iter()
        .map(|&v| ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_endpoints_and_roundtrip() {
        let mut raw = vec![0u8; PIXELS];
        raw[1] = 255;
        raw[2] = 127;
        raw[3] = 128;
        let t = gan_preprocess::<f64>(&raw).unwrap();
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] + 0.5 / 127.5).abs() < 1e-12);
        assert!((t.data()[3] - 0.5 / 127.5).abs() < 1e-12);
        let all: Vec<u8> = (0..PIXELS).map(|i| (i % 256) as u8).collect();
        assert_eq!(gan_postprocess(&gan_preprocess::<f32>(&all).unwrap()), all);
    }

    #[test]
    fn counts_follow_labels() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = LabeledImageSet::new(vec![0; 4 * PIXELS], vec![2, 0, 2, 2], names.clone()).unwrap();
        assert_eq!(s.per_class_counts(), &[1, 0, 3]);
        assert_eq!(s.class_indices(2), vec![0, 2, 3]);
        assert!(LabeledImageSet::new(vec![0; PIXELS], vec![3], names).is_err());
    }
}
