//! Multinomial logistic regression on frozen features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        LinearFitConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// `predict(x) = argmax(x W + b)`; W is (d, C), row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEvaluator {
    pub dim: usize,
    pub num_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn rows<T: Scalar>(features: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    match *features.shape() {
        [n, d] => Ok((n, d, features.data().iter().map(|v| v.to_f64_lossy()).collect())),
        _ => Err(Error::Shape(format!("features must be (n, d), got {:?}", features.shape()))),
    }
}

impl LinearEvaluator {
    /// Fit with Adam on standardized features; the standardization is folded
    /// back into the returned weights.
    pub fn fit<T: Scalar>(features: &Tensor<T>, labels: &[usize], num_classes: usize, cfg: &LinearFitConfig) -> Result<Self> {
        let (n, d, x) = rows(features)?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {l} outside [0, {num_classes})")));
        }
        let mut present = vec![false; num_classes];
        labels.iter().for_each(|&l| present[l] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::DegenerateLabels("linear evaluator needs at least two classes".into()));
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::Config("linear evaluator needs positive epochs, batch size and learning rate".into()));
        }

        let mut mean = vec![0.0; d];
        for r in x.chunks_exact(d) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; d];
        for r in x.chunks_exact(d) {
            scale.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 1.0 });
        let z: Vec<f64> = x
            .chunks_exact(d)
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) * scale[j]).collect::<Vec<_>>())
            .collect();

        let c = num_classes;
        let np = d * c + c;
        let mut theta = vec![0.0; np];
        let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut t = 0i32;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(cfg.seed, &[seed::Substream::Eval as u64, 0x6c69_6e65]);
        let mut grad = vec![0.0; np];
        let mut logits = vec![0.0; c];
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in batch {
                    let xi = &z[i * d..(i + 1) * d];
                    for (k, l) in logits.iter_mut().enumerate() {
                        *l = theta[d * c + k] + xi.iter().enumerate().map(|(j, v)| v * theta[j * c + k]).sum::<f64>();
                    }
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    for k in 0..c {
                        let p = (logits[k] - mx).exp() / s - if k == labels[i] { 1.0 } else { 0.0 };
                        let p = p / batch.len() as f64;
                        for (j, v) in xi.iter().enumerate() {
                            grad[j * c + k] += p * v;
                        }
                        grad[d * c + k] += p;
                    }
                }
                t += 1;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for q in 0..np {
                    m1[q] = b1 * m1[q] + (1.0 - b1) * grad[q];
                    m2[q] = b2 * m2[q] + (1.0 - b2) * grad[q] * grad[q];
                    theta[q] -= cfg.learning_rate * (m1[q] / c1) / ((m2[q] / c2).sqrt() + eps);
                }
            }
        }

        let mut weights = vec![0.0; d * c];
        let mut bias = theta[d * c..].to_vec();
        for j in 0..d {
            for k in 0..c {
                let w = theta[j * c + k] * scale[j];
                weights[j * c + k] = w;
                bias[k] -= w * mean[j];
            }
        }
        Ok(LinearEvaluator {
            dim: d,
            num_classes: c,
            weights,
            bias,
        })
    }

    pub fn logits<T: Scalar>(&self, features: &Tensor<T>) -> Result<Vec<f64>> {
        let (n, d, x) = rows(features)?;
        if d != self.dim {
            return Err(Error::Shape(format!("evaluator expects {} features, got {d}", self.dim)));
        }
        let c = self.num_classes;
        let mut out = Vec::with_capacity(n * c);
        for r in x.chunks_exact(d) {
            for k in 0..c {
                out.push(self.bias[k] + r.iter().enumerate().map(|(j, v)| v * self.weights[j * c + k]).sum::<f64>());
            }
        }
        Ok(out)
    }

    /// Argmax class per row; ties resolve to the lowest index.
    pub fn predict<T: Scalar>(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .chunks_exact(self.num_classes)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy<T: Scalar>(&self, features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}
