//! Contrastive and adversarial losses.
//!
//! Every loss is a pure function of its inputs that returns the value
//! together with its analytic gradient; the `*_node` wrappers lift them onto
//! an autodiff [`Graph`]. Cosine similarities are plain dot products, so the
//! contrastive losses insist on unit-norm embedding rows.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::matmul::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

/// Allowed deviation of an embedding row norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature<T>(T);

impl<T: Scalar> Temperature<T> {
    pub fn new(tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive and finite, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> T {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossComponent<T> {
    pub name: String,
    pub weight: T,
    pub value: T,
}

/// A scalar loss and the weighted parts it is made of.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossValue<T> {
    pub value: T,
    pub components: Vec<LossComponent<T>>,
}

impl<T: Scalar> LossValue<T> {
    pub fn single(name: &str, value: T) -> Self {
        Self::weighted(vec![(name.to_string(), T::one(), value)])
    }

    pub fn weighted(parts: Vec<(String, T, T)>) -> Self {
        let value = parts.iter().fold(T::zero(), |acc, (_, w, v)| acc + *w * *v);
        LossValue {
            value,
            components: parts
                .into_iter()
                .map(|(name, weight, value)| LossComponent { name, weight, value })
                .collect(),
        }
    }

    pub fn component(&self, name: &str) -> Option<T> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.components.iter().all(|c| c.value.is_finite())
    }
}

fn rows_cols<T: Scalar>(z: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *z.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::Shape(format!("{what} must be rank 2, got {:?}", z.shape()))),
    }
}

fn check_unit_rows<T: Scalar>(z: &Tensor<T>, what: &str) -> Result<()> {
    let (_, d) = rows_cols(z, what)?;
    if d == 0 {
        return Ok(());
    }
    for (i, row) in z.data().chunks_exact(d).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64_lossy();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Contract(format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Gram matrix `V V^T` of a stacked (n, d) embedding matrix.
fn gram<T: Scalar>(v: &[T], n: usize, d: usize) -> Vec<T> {
    let mut s = vec![T::zero(); n * n];
    gemm(
        T::one(),
        MatRef::new(v, n, d),
        MatRef::new(v, n, d).t(),
        T::zero(),
        MatMut::new(&mut s, n, n),
    );
    s
}

/// `grad = (C + C^T) V` for a square coefficient matrix over stacked views.
fn symmetric_grad<T: Scalar>(c: &[T], v: &[T], n: usize, d: usize) -> Vec<T> {
    let mut sym = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            sym[i * n + k] = c[i * n + k] + c[k * n + i];
        }
    }
    let mut g = vec![T::zero(); n * d];
    gemm(
        T::one(),
        MatRef::new(&sym, n, n),
        MatRef::new(v, n, d),
        T::zero(),
        MatMut::new(&mut g, n, d),
    );
    g
}

/// Log-sum-exp over `logits[k]` for `k != skip`, and the softmax weights.
fn masked_softmax<T: Scalar>(logits: &[T], skip: usize) -> (T, Vec<T>) {
    let mut m = T::neg_infinity();
    for (k, &l) in logits.iter().enumerate() {
        if k != skip {
            m = m.max(l);
        }
    }
    let mut sum = T::zero();
    let mut p: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            if k == skip {
                T::zero()
            } else {
                let e = (l - m).exp();
                sum += e;
                e
            }
        })
        .collect();
    p.iter_mut().for_each(|v| *v /= sum);
    (m + sum.ln(), p)
}

/// Normalized-temperature cross-entropy over the 2N views of N positive
/// pairs `(z1[i], z2[i])`, averaged over all 2N anchors.
pub fn ntxent<T: Scalar>(z1: &Tensor<T>, z2: &Tensor<T>, tau: Temperature<T>) -> Result<LossValue<T>> {
    ntxent_with_grad(z1, z2, tau).map(|(l, _)| l)
}

pub fn ntxent_with_grad<T: Scalar>(
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    tau: Temperature<T>,
) -> Result<(LossValue<T>, [Tensor<T>; 2])> {
    let (n, d) = rows_cols(z1, "z1")?;
    z2.expect_shape(z1.shape())?;
    if n < 2 {
        return Err(Error::InsufficientBatch(format!("ntxent needs at least 2 pairs, got {n}")));
    }
    check_unit_rows(z1, "z1")?;
    check_unit_rows(z2, "z2")?;
    let total = 2 * n;
    let v = Tensor::cat_outer(&[z1, z2])?.into_data();
    let s = gram(&v, total, d);
    let inv_tau = T::one() / tau.get();
    let scale = T::one() / (tau.get() * T::from_usize_lossy(total));
    let mut coeff = vec![T::zero(); total * total];
    let mut loss = T::zero();
    for i in 0..total {
        let pos = (i + n) % total;
        let logits: Vec<T> = s[i * total..(i + 1) * total].iter().map(|&x| x * inv_tau).collect();
        let (lse, p) = masked_softmax(&logits, i);
        loss += lse - logits[pos];
        for k in 0..total {
            let target = if k == pos { T::one() } else { T::zero() };
            coeff[i * total + k] = (p[k] - target) * scale;
        }
    }
    let value = loss / T::from_usize_lossy(total);
    let g = symmetric_grad(&coeff, &v, total, d);
    let g1 = Tensor::from_vec(&[n, d], g[..n * d].to_vec())?;
    let g2 = Tensor::from_vec(&[n, d], g[n * d..].to_vec())?;
    Ok((LossValue::single("ntxent", value), [g1, g2]))
}

/// Supervised contrastive loss with all fakes as one class: each fake
/// anchor is pulled towards the other fakes and pushed from every real view.
pub fn supcon_fake<T: Scalar>(
    z_fake: &Tensor<T>,
    z_real_1: &Tensor<T>,
    z_real_2: &Tensor<T>,
    tau: Temperature<T>,
) -> Result<LossValue<T>> {
    supcon_fake_with_grad(z_fake, z_real_1, z_real_2, tau).map(|(l, _)| l)
}

pub fn supcon_fake_with_grad<T: Scalar>(
    z_fake: &Tensor<T>,
    z_real_1: &Tensor<T>,
    z_real_2: &Tensor<T>,
    tau: Temperature<T>,
) -> Result<(LossValue<T>, [Tensor<T>; 3])> {
    let (m, d) = rows_cols(z_fake, "z_fake")?;
    let (nr, dr) = rows_cols(z_real_1, "z_real_1")?;
    z_real_2.expect_shape(z_real_1.shape())?;
    if dr != d {
        return Err(Error::Shape(format!("fake dim {d} vs real dim {dr}")));
    }
    if m < 2 {
        return Err(Error::InsufficientBatch(format!("supcon_fake needs at least 2 fakes, got {m}")));
    }
    check_unit_rows(z_fake, "z_fake")?;
    check_unit_rows(z_real_1, "z_real_1")?;
    check_unit_rows(z_real_2, "z_real_2")?;
    let total = m + 2 * nr;
    let v = Tensor::cat_outer(&[z_fake, z_real_1, z_real_2])?.into_data();
    let s = gram(&v, total, d);
    let inv_tau = T::one() / tau.get();
    let inv_pos = T::one() / T::from_usize_lossy(m - 1);
    let scale = T::one() / (tau.get() * T::from_usize_lossy(m));
    let mut coeff = vec![T::zero(); total * total];
    let mut loss = T::zero();
    for i in 0..m {
        let logits: Vec<T> = s[i * total..(i + 1) * total].iter().map(|&x| x * inv_tau).collect();
        let (lse, p) = masked_softmax(&logits, i);
        let pos_mean = (0..m).filter(|&j| j != i).map(|j| logits[j]).sum::<T>() * inv_pos;
        loss += lse - pos_mean;
        for k in 0..total {
            if k == i {
                continue;
            }
            let target = if k < m { inv_pos } else { T::zero() };
            coeff[i * total + k] = (p[k] - target) * scale;
        }
    }
    let value = loss / T::from_usize_lossy(m);
    let g = symmetric_grad(&coeff, &v, total, d);
    let split = |a: usize, b: usize, rows: usize| Tensor::from_vec(&[rows, d], g[a * d..b * d].to_vec());
    Ok((
        LossValue::single("supcon_fake", value),
        [split(0, m, m)?, split(m, m + nr, nr)?, split(m + nr, total, nr)?],
    ))
}

fn non_empty<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<T> {
    if t.numel() == 0 {
        return Err(Error::InsufficientBatch(format!("{what} is empty")));
    }
    Ok(T::from_usize_lossy(t.numel()))
}

/// Hinge discriminator loss on real/fake logits.
pub fn d_head_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<LossValue<T>> {
    d_head_loss_with_grad(real, fake).map(|(l, _)| l)
}

pub fn d_head_loss_with_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(LossValue<T>, [Tensor<T>; 2])> {
    let (nr, nf) = (non_empty(real, "real scores")?, non_empty(fake, "fake scores")?);
    let one = T::one();
    let lr = real.data().iter().map(|&r| (one - r).max(T::zero())).sum::<T>() / nr;
    let lf = fake.data().iter().map(|&f| (one + f).max(T::zero())).sum::<T>() / nf;
    let gr = real.map(|r| if one - r > T::zero() { -one / nr } else { T::zero() });
    let gf = fake.map(|f| if one + f > T::zero() { one / nf } else { T::zero() });
    Ok((
        LossValue::weighted(vec![("hinge_real".into(), one, lr), ("hinge_fake".into(), one, lf)]),
        [gr, gf],
    ))
}

/// Hinge generator loss `-mean(fake)`.
pub fn g_loss<T: Scalar>(fake: &Tensor<T>) -> Result<LossValue<T>> {
    g_loss_with_grad(fake).map(|(l, _)| l)
}

pub fn g_loss_with_grad<T: Scalar>(fake: &Tensor<T>) -> Result<(LossValue<T>, Tensor<T>)> {
    let n = non_empty(fake, "fake scores")?;
    let value = -fake.sum() / n;
    Ok((LossValue::single("g_hinge", value), fake.map(|_| -T::one() / n)))
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy on logits: discriminator (real -> 1, fake -> 0) and
/// non-saturating generator (fake -> 1) losses.
pub fn dcgan_bce_losses<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(LossValue<T>, LossValue<T>)> {
    let (d, _) = bce_d_with_grad(real, fake)?;
    let (g, _) = bce_g_with_grad(fake)?;
    Ok((d, g))
}

pub fn bce_d_with_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(LossValue<T>, [Tensor<T>; 2])> {
    let (nr, nf) = (non_empty(real, "real scores")?, non_empty(fake, "fake scores")?);
    let lr = real.data().iter().map(|&r| softplus(-r)).sum::<T>() / nr;
    let lf = fake.data().iter().map(|&f| softplus(f)).sum::<T>() / nf;
    let gr = real.map(|r| -sigmoid(-r) / nr);
    let gf = fake.map(|f| sigmoid(f) / nf);
    Ok((
        LossValue::weighted(vec![("bce_real".into(), T::one(), lr), ("bce_fake".into(), T::one(), lf)]),
        [gr, gf],
    ))
}

pub fn bce_g_with_grad<T: Scalar>(fake: &Tensor<T>) -> Result<(LossValue<T>, Tensor<T>)> {
    let n = non_empty(fake, "fake scores")?;
    let value = fake.data().iter().map(|&f| softplus(-f)).sum::<T>() / n;
    Ok((LossValue::single("g_bce", value), fake.map(|f| -sigmoid(-f) / n)))
}

// Graph wrappers: evaluate on node values, record analytic gradients.

pub fn ntxent_node<T: Scalar>(g: &Graph<T>, z1: Var, z2: Var, tau: Temperature<T>) -> Result<(Var, LossValue<T>)> {
    let (loss, [g1, g2]) = ntxent_with_grad(&g.value(z1), &g.value(z2), tau)?;
    Ok((g.precomputed(&[z1, z2], loss.value, vec![g1, g2])?, loss))
}

pub fn supcon_fake_node<T: Scalar>(
    g: &Graph<T>,
    z_fake: Var,
    z_real_1: Var,
    z_real_2: Var,
    tau: Temperature<T>,
) -> Result<(Var, LossValue<T>)> {
    let (loss, [a, b, c]) = supcon_fake_with_grad(&g.value(z_fake), &g.value(z_real_1), &g.value(z_real_2), tau)?;
    Ok((g.precomputed(&[z_fake, z_real_1, z_real_2], loss.value, vec![a, b, c])?, loss))
}

pub fn d_head_loss_node<T: Scalar>(g: &Graph<T>, real: Var, fake: Var) -> Result<(Var, LossValue<T>)> {
    let (loss, [a, b]) = d_head_loss_with_grad(&g.value(real), &g.value(fake))?;
    Ok((g.precomputed(&[real, fake], loss.value, vec![a, b])?, loss))
}

pub fn g_loss_node<T: Scalar>(g: &Graph<T>, fake: Var) -> Result<(Var, LossValue<T>)> {
    let (loss, grad) = g_loss_with_grad(&g.value(fake))?;
    Ok((g.precomputed(&[fake], loss.value, vec![grad])?, loss))
}

pub fn bce_d_node<T: Scalar>(g: &Graph<T>, real: Var, fake: Var) -> Result<(Var, LossValue<T>)> {
    let (loss, [a, b]) = bce_d_with_grad(&g.value(real), &g.value(fake))?;
    Ok((g.precomputed(&[real, fake], loss.value, vec![a, b])?, loss))
}

pub fn bce_g_node<T: Scalar>(g: &Graph<T>, fake: Var) -> Result<(Var, LossValue<T>)> {
    let (loss, grad) = bce_g_with_grad(&g.value(fake))?;
    Ok((g.precomputed(&[fake], loss.value, vec![grad])?, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0f64).is_err());
        assert!(Temperature::new(-1.0f64).is_err());
        assert!(Temperature::new(f64::INFINITY).is_err());
        assert!(Temperature::new(0.1f64).is_ok());
    }

    #[test]
    fn ntxent_rejects_small_batches_and_non_unit_rows() {
        let tau = Temperature::new(0.5).unwrap();
        let one = t(1, 2, &[1.0, 0.0]);
        assert!(matches!(ntxent(&one, &one, tau), Err(Error::InsufficientBatch(_))));
        let bad = t(2, 2, &[1.0, 0.0, 0.5, 0.0]);
        assert!(matches!(ntxent(&bad, &bad, tau), Err(Error::Contract(_))));
    }

    #[test]
    fn hinge_and_bce_identities() {
        let big = Tensor::full(&[4], 10.0);
        let small = Tensor::full(&[4], -10.0);
        assert_eq!(d_head_loss(&big, &small).unwrap().value, 0.0);
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(d_head_loss(&z, &z).unwrap().value, 2.0);
        assert_eq!(g_loss(&Tensor::full(&[5], 3.0)).unwrap().value, -3.0);
        assert_eq!(g_loss(&Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap().value, 0.0);
        let (_, grad) = g_loss_with_grad(&Tensor::<f64>::zeros(&[4])).unwrap();
        assert_eq!(grad.data(), &[-0.25; 4]);
        let (d, g) = dcgan_bce_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.value - 2.0 * ln2).abs() < 1e-15);
        assert!((g.value - ln2).abs() < 1e-15);
        let (d, _) = dcgan_bce_losses(&Tensor::<f64>::full(&[2], 1e6), &Tensor::full(&[2], -1e6)).unwrap();
        assert!(d.value.abs() < 1e-12);
    }

    #[test]
    fn weighted_value_matches_components() {
        let l = LossValue::weighted(vec![("a".into(), 0.5f64, 2.0), ("b".into(), 2.0, -1.0)]);
        assert_eq!(l.value, -1.0);
        assert_eq!(l.component("b"), Some(-1.0));
        assert!(l.is_finite());
    }
}
