//! Procedural stand-in for CIFAR-10.
//!
//! Each class pairs a background and foreground palette with a shape
//! family; position, size, colors and pixel noise vary per image. The
//! result has the CIFAR binary layout and ten visually distinct classes,
//! which is enough to exercise every code path without the real data.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImageSet, CIFAR10_CLASSES, PIXELS, SIDE};
use crate::error::Result;
use crate::seed;

const PALETTE: [([f64; 3], [f64; 3]); 10] = [
    ([120.0, 170.0, 230.0], [200.0, 200.0, 210.0]),
    ([90.0, 90.0, 95.0], [200.0, 40.0, 40.0]),
    ([150.0, 200.0, 240.0], [140.0, 90.0, 50.0]),
    ([210.0, 190.0, 160.0], [230.0, 140.0, 40.0]),
    ([60.0, 120.0, 50.0], [150.0, 100.0, 60.0]),
    ([190.0, 170.0, 140.0], [100.0, 70.0, 40.0]),
    ([70.0, 90.0, 40.0], [60.0, 180.0, 60.0]),
    ([130.0, 160.0, 80.0], [80.0, 50.0, 30.0]),
    ([40.0, 80.0, 160.0], [230.0, 230.0, 230.0]),
    ([170.0, 170.0, 170.0], [40.0, 60.0, 150.0]),
];

fn smoothstep(edge: f64, x: f64) -> f64 {
    // Coverage of a signed distance `x` (negative inside) with a 1px ramp.
    (0.5 - (x - edge)).clamp(0.0, 1.0)
}

/// Foreground coverage in [0, 1] at pixel center (x, y).
fn coverage(class: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64, phase: f64) -> f64 {
    let (dx, dy) = (x - cx, y - cy);
    let d = (dx * dx + dy * dy).sqrt();
    match class {
        0 => smoothstep(0.0, ((dx / (1.6 * r)).powi(2) + (dy / (0.45 * r)).powi(2)).sqrt() * r - r),
        1 => smoothstep(0.0, (dx.abs() - 1.4 * r).max(dy.abs() - 0.6 * r)),
        2 => smoothstep(0.0, d - 0.6 * r),
        3 => {
            let inside = dy + r * 0.8 - (1.6 * r - 2.0 * dx.abs()).max(-r);
            smoothstep(0.0, (-inside).max(dy - 0.8 * r))
        }
        4 => {
            let s = ((x + phase) * std::f64::consts::PI / 3.0).sin();
            if dy.abs() < r { (s * 2.0).clamp(0.0, 1.0) } else { 0.0 }
        }
        5 => smoothstep(0.0, (d - 0.9 * r).abs() - 0.3 * r),
        6 => smoothstep(0.0, d - 1.1 * r),
        7 => smoothstep(0.0, ((dx - dy) / std::f64::consts::SQRT_2).abs() - 0.4 * r),
        8 => smoothstep(0.0, (y - (cy + 0.3 * r)).abs() - 0.5 * r),
        _ => {
            if dx.abs() < r && dy.abs() < r {
                let cell = ((x + phase) / 4.0).floor() as i64 + (y / 4.0).floor() as i64;
                if cell.rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.25
                }
            } else {
                0.0
            }
        }
    }
}

/// Render one image of class `class` (0..10) from the stream `(seed, index)`.
pub fn render(class: usize, seed: u64, index: u64) -> Vec<u8> {
    let mut rng = seed::rng(seed, &[index]);
    let (bg, fg) = PALETTE[class % 10];
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, c: [f64; 3]| -> [f64; 3] {
        let shift = rng.random_range(-25.0..25.0);
        [
            c[0] + shift + rng.random_range(-15.0..15.0),
            c[1] + shift + rng.random_range(-15.0..15.0),
            c[2] + shift + rng.random_range(-15.0..15.0),
        ]
    };
    let bg = jitter(&mut rng, bg);
    let fg = jitter(&mut rng, fg);
    let cx = rng.random_range(11.0..21.0);
    let cy = rng.random_range(11.0..21.0);
    let r = rng.random_range(6.0..10.0);
    let phase = rng.random_range(0.0..6.0);
    let vertical_shade = rng.random_range(-20.0..20.0);
    let noise = Normal::new(0.0, 5.0).expect("valid std");
    let mut out = vec![0u8; PIXELS];
    for yy in 0..SIDE {
        for xx in 0..SIDE {
            let (x, y) = (xx as f64 + 0.5, yy as f64 + 0.5);
            let a = coverage(class % 10, x, y, cx, cy, r, phase);
            let shade = vertical_shade * (y / SIDE as f64 - 0.5);
            for ch in 0..3 {
                let v = a * fg[ch] + (1.0 - a) * (bg[ch] + shade) + noise.sample(&mut rng);
                out[ch * SIDE * SIDE + yy * SIDE + xx] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// `per_class` images of each of the ten classes, interleaved by class in
/// the order a shuffled CIFAR batch would present them.
pub fn synthetic_cifar10(per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    let n = per_class * 10;
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut seed::rng(seed, &[u64::MAX]));
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, &l) in labels.iter().enumerate() {
        pixels.extend_from_slice(&render(l as usize, seed, i as u64));
    }
    LabeledImageSet::new(pixels, labels, CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synthetic_cifar10(3, 1).unwrap();
        let b = synthetic_cifar10(3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_class_counts(), &[3; 10]);
        assert_ne!(a.pixels(), synthetic_cifar10(3, 2).unwrap().pixels());
    }

    #[test]
    fn classes_differ_in_mean_color() {
        let means: Vec<[f64; 3]> = (0..10)
            .map(|c| {
                let img = render(c, 0, 0);
                let mut m = [0.0; 3];
                for (ch, v) in m.iter_mut().enumerate() {
                    *v = img[ch * 1024..(ch + 1) * 1024].iter().map(|&p| p as f64).sum::<f64>() / 1024.0;
                }
                m
            })
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let d: f64 = (0..3).map(|k| (means[i][k] - means[j][k]).abs()).sum();
                assert!(d > 5.0, "classes {i} and {j} look alike");
            }
        }
    }
}
