//! FID, Inception Score, class-distribution deviation and the evaluation
//! drivers built on them.
//!
//! All statistics are accumulated in f64 regardless of the model scalar.

pub mod eval;
pub mod extractor;
pub mod inception;
pub mod linear;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::matmul::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

/// Relative tolerance below which negative eigenvalues count as round-off.
pub const EIG_CLAMP: f64 = 1e-6;

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// D x D, row-major.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.dim() + j]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma.len() != d * d {
            return Err(Error::Shape(format!("covariance of {} entries for D = {d}", self.sigma.len())));
        }
        if self.n < 2 {
            return Err(Error::InsufficientSamples {
                class: "all".into(),
                requested: 2,
                available: self.n,
            });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.sigma_at(i, j), self.sigma_at(j, i));
                if (a - b).abs() > 1e-8 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Contract(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// From a diagonal covariance (convenience for tests and oracles).
    pub fn diagonal(mu: Vec<f64>, var: &[f64], n: usize) -> Self {
        let d = mu.len();
        let mut sigma = vec![0.0; d * d];
        for (i, &v) in var.iter().enumerate() {
            sigma[i * d + i] = v;
        }
        FeatureStats { mu, sigma, n }
    }
}

/// Sample mean and (n - 1)-normalized covariance of the rows of `features`.
pub fn gaussian_stats<T: Scalar>(features: &Tensor<T>) -> Result<FeatureStats> {
    let (n, d) = match *features.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::Shape(format!("features must be (n, D), got {:?}", features.shape()))),
    };
    if n < 2 {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: 2,
            available: n,
        });
    }
    let x: Vec<f64> = features.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = x;
    for row in centered.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    let mut sigma = vec![0.0; d * d];
    gemm(
        1.0 / (n - 1) as f64,
        MatRef::new(&centered, n, d).t(),
        MatRef::new(&centered, n, d),
        0.0,
        MatMut::new(&mut sigma, d, d),
    );
    // Exact symmetry regardless of summation order.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (sigma[i * d + j] + sigma[j * d + i]);
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mu, sigma, n })
}

fn checked_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < -EIG_CLAMP * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::NumericalInstability(format!(
            "{what} has eigenvalue {bad:.6e} (largest magnitude {max:.6e})"
        )));
    }
    Ok(eig)
}

/// Frechet distance between two Gaussians:
/// `|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2))`.
///
/// `tr((S_r S_g)^(1/2))` equals the sum of square roots of the eigenvalues of
/// the symmetric matrix `S_r^(1/2) S_g S_r^(1/2)`, which is similar to the
/// product; both decompositions are symmetric and clamp round-off negatives.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Shape(format!("feature dims differ: {d} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.sigma);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma);
    let ea = checked_eigenvalues(sa.clone(), "first covariance")?;
    let roots = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root_a = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let ei = checked_eigenvalues(inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Split-based Inception Score. Rows are split into `splits` contiguous
/// groups of `n / splits` rows (a remainder is dropped); each group scores
/// `exp(mean_x KL(p(y|x) || p(y)))` with `p(y)` the group marginal. Returns
/// the mean and population standard deviation over groups.
pub fn inception_score<T: Scalar>(probs: &Tensor<T>, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = match *probs.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::Shape(format!("probabilities must be (n, K), got {:?}", probs.shape()))),
    };
    if splits == 0 || n < splits {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: splits.max(1),
            available: n,
        });
    }
    let p: Vec<f64> = probs.data().iter().map(|v| v.to_f64_lossy()).collect();
    for (i, row) in p.chunks_exact(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    const FLOOR: f64 = 1e-16;
    let size = n / splits;
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let rows = &p[s * size * k..(s + 1) * size * k];
        let mut marginal = vec![0.0; k];
        for row in rows.chunks_exact(k) {
            for (m, v) in marginal.iter_mut().zip(row) {
                *m += v;
            }
        }
        marginal.iter_mut().for_each(|m| *m /= size as f64);
        let mut kl = 0.0;
        for row in rows.chunks_exact(k) {
            for (&v, &m) in row.iter().zip(&marginal) {
                if v > 0.0 {
                    kl += v * (v.max(FLOOR).ln() - m.max(FLOOR).ln());
                }
            }
        }
        scores.push((kl / size as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationTable {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Ratio of each class's share among generated labels to its share of the
/// training set.
pub fn class_deviation(gen_labels: &[usize], train_counts: &[usize]) -> Result<DeviationTable> {
    let c = train_counts.len();
    if let Some(z) = train_counts.iter().position(|&t| t == 0) {
        return Err(Error::UndefinedDeviation(z));
    }
    if gen_labels.is_empty() {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: 1,
            available: 0,
        });
    }
    let mut gen = vec![0usize; c];
    for &l in gen_labels {
        *gen.get_mut(l)
            .ok_or_else(|| Error::Contract(format!("label {l} outside [0, {c})")))? += 1;
    }
    let n_gen = gen_labels.len() as f64;
    let n_train: usize = train_counts.iter().sum();
    let per_class: Vec<f64> = gen
        .iter()
        .zip(train_counts)
        .map(|(&g, &t)| (g as f64 / n_gen) * (n_train as f64 / t as f64))
        .collect();
    let mean = per_class.iter().sum::<f64>() / c as f64;
    Ok(DeviationTable { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let f = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mu, vec![1.0, 0.0]);
        assert_eq!(s.sigma, vec![2.0, 0.0, 0.0, 0.0]);

        let a = FeatureStats::diagonal(vec![0.0], &[1.0], 10);
        let b = FeatureStats::diagonal(vec![2.0], &[1.0], 10);
        assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        let a = FeatureStats::diagonal(vec![0.0, 0.0], &[1.0, 1.0], 10);
        let b = FeatureStats::diagonal(vec![1.0, 1.0], &[4.0, 4.0], 10);
        assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-10);
        assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn strongly_negative_covariance_is_rejected() {
        let a = FeatureStats::diagonal(vec![0.0, 0.0], &[1.0, -0.5], 10);
        let b = FeatureStats::diagonal(vec![0.0, 0.0], &[1.0, 1.0], 10);
        assert!(matches!(fid(&a, &b), Err(Error::NumericalInstability(_))));
    }

    #[test]
    fn deviation_examples() {
        let t = class_deviation(&[0, 1, 2, 3], &[5, 5, 5, 5]).unwrap();
        assert_eq!(t.per_class, vec![1.0; 4]);
        let counts = [348, 969, 125, 208, 1617, 75, 4500, 581, 2697, 45];
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let t = class_deviation(&labels, &counts).unwrap();
        assert!((t.per_class[9] - 0.1 / (45.0 / 11165.0)).abs() < 1e-12);
        assert!((t.per_class[9] - 24.81).abs() < 0.01);
        assert!(matches!(class_deviation(&[0], &[1, 0]), Err(Error::UndefinedDeviation(1))));
    }
}
