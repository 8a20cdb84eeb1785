//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Leaves are either trainable (`requires_grad`) or constants; an operation
//! requires a gradient iff one of its inputs does, and [`Graph::backward`]
//! only visits those nodes. Parameters are bound fresh into a new graph for
//! every step, so the tape never outlives a single update.

use std::cell::{Ref, RefCell};

use crate::data::augment::{self, ViewParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{self, ConvGeom};
use crate::tensor::matmul::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-normalization node obtains its statistics.
pub enum NormMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Batch { eps: T },
    /// Normalize by stored running statistics (inference).
    Running {
        mean: &'a [T],
        var: &'a [T],
        eps: T,
    },
}

/// Batch statistics observed by a training-mode normalization node:
/// per-channel mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Reshape(usize),
    RowNormalize {
        x: usize,
        norms: Vec<T>,
    },
    MaskMul {
        x: usize,
        mask: Tensor<T>,
    },
    Augment {
        x: usize,
        views: Vec<ViewParams>,
    },
    Mean(usize),
    WeightedSum(Vec<(usize, T)>),
    Precomputed {
        inputs: Vec<usize>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv2d(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value), &geom)?
        };
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv_transpose2d(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value), &geom)?
        };
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            conv::linear(&nodes[x.0].value, &nodes[w.0].value, b.map(|b| &nodes[b.0].value))?
        };
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            rg,
        ))
    }

    /// Per-channel normalization of a (B,C,...) tensor followed by the affine
    /// map `gamma * xhat + beta`. Returns the batch statistics in batch mode.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (gv, bv) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if xv.rank() < 2 {
                return Err(Error::Shape(format!("batch_norm input {:?}", xv.shape())));
            }
            let (b, c) = (xv.dim(0), xv.dim(1));
            gv.expect_shape(&[c])?;
            bv.expect_shape(&[c])?;
            let plane: usize = xv.shape()[2..].iter().product();
            let count = b * plane;
            let (mean, inv_std, stats) = match mode {
                NormMode::Batch { eps } => {
                    let mut mean = vec![T::zero(); c];
                    let mut var = vec![T::zero(); c];
                    for n in 0..b {
                        for (ch, m) in mean.iter_mut().enumerate() {
                            let s = &xv.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                            *m += s.iter().copied().sum::<T>();
                        }
                    }
                    let inv_count = T::one() / T::from_usize_lossy(count);
                    mean.iter_mut().for_each(|m| *m *= inv_count);
                    for n in 0..b {
                        for ch in 0..c {
                            let s = &xv.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                            var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                        }
                    }
                    let unbiased: Vec<T> = var
                        .iter()
                        .map(|&v| v / T::from_usize_lossy(count.saturating_sub(1).max(1)))
                        .collect();
                    var.iter_mut().for_each(|v| *v *= inv_count);
                    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    (
                        mean.clone(),
                        inv,
                        Some(BatchStats {
                            mean,
                            var_unbiased: unbiased,
                        }),
                    )
                }
                NormMode::Running { mean, var, eps } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::Shape("running statistics do not match channels".into()));
                    }
                    let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    (mean.to_vec(), inv, None)
                }
            };
            let mut xhat = Tensor::zeros(xv.shape());
            let mut out = Tensor::zeros(xv.shape());
            for n in 0..b {
                for ch in 0..c {
                    let range = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                    let (g, bb) = (gv.data()[ch], bv.data()[ch]);
                    for i in range {
                        let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                        xhat.data_mut()[i] = h;
                        out.data_mut()[i] = g * h + bb;
                    }
                }
            }
            (out, xhat, inv_std, stats)
        };
        let batch_stats = stats.is_some();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(out, op, rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x.0))
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x.0, slope),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.0))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Rows of a rank-2 tensor scaled to unit Euclidean norm. An exactly
    /// zero row maps to the first basis vector and passes no gradient.
    pub fn row_normalize(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let xv = self.value(x);
            if xv.rank() != 2 {
                return Err(Error::Shape(format!("row_normalize expects rank 2, got {:?}", xv.shape())));
            }
            let d = xv.dim(1);
            let mut out = Tensor::zeros(xv.shape());
            let mut norms = Vec::with_capacity(xv.dim(0));
            for (i, row) in xv.data().chunks_exact(d).enumerate() {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                norms.push(n);
                let dst = &mut out.data_mut()[i * d..(i + 1) * d];
                if n > T::zero() {
                    for (o, &v) in dst.iter_mut().zip(row) {
                        *o = v / n;
                    }
                } else if d > 0 {
                    dst[0] = T::one();
                }
            }
            (out, norms)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::RowNormalize { x: x.0, norms }, rg))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&mask, |a, m| a * m)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MaskMul { x: x.0, mask }, rg))
    }

    /// Apply one sampled augmentation per batch item (differentiable).
    pub fn augment(&self, x: Var, views: Vec<ViewParams>) -> Result<Var> {
        let out = augment::apply_batch(&self.value(x), &views)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Augment { x: x.0, views }, rg))
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = {
            let xv = self.value(x);
            xv.sum() / T::from_usize_lossy(xv.numel().max(1))
        };
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total += w * self.item(v);
        }
        let ids: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        let rg = self.rg(&ids);
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.iter().map(|&(v, w)| (v.0, w)).collect()),
            rg,
        )
    }

    /// A scalar whose gradients with respect to `inputs` were computed
    /// analytically by the caller.
    pub fn precomputed(&self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::Contract("one gradient per input required".into()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            g.expect_shape(self.value(*v).shape())?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { inputs: ids, grads }, rg))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, t: Tensor<T>| match &mut grads[i] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw) = conv::conv2d_backward(&nodes[*x].value, &nodes[*w].value, &g, geom, need(*x), need(*w))?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        acc(b, conv::channel_sums(&g));
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (dx, dw) =
                        conv::conv_transpose2d_backward(&nodes[*x].value, &nodes[*w].value, &g, geom, need(*x), need(*w))?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        acc(b, conv::channel_sums(&g));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (bsz, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    if need(*x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        gemm(
                            T::one(),
                            MatRef::new(g.data(), bsz, fout),
                            MatRef::new(wv.data(), fout, fin),
                            T::zero(),
                            MatMut::new(dx.data_mut(), bsz, fin),
                        );
                        acc(*x, dx);
                    }
                    if need(*w) {
                        let mut dw = Tensor::zeros(wv.shape());
                        gemm(
                            T::one(),
                            MatRef::new(g.data(), bsz, fout).t(),
                            MatRef::new(xv.data(), bsz, fin),
                            T::zero(),
                            MatMut::new(dw.data_mut(), fout, fin),
                        );
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks_exact(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(b, Tensor::from_vec(&[fout], db)?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (b, c) = (xhat.dim(0), xhat.dim(1));
                    let plane: usize = xhat.shape()[2..].iter().product();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for n in 0..b {
                        for ch in 0..c {
                            let r = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                            for i in r {
                                sum_g[ch] += g.data()[i];
                                sum_gx[ch] += g.data()[i] * xhat.data()[i];
                            }
                        }
                    }
                    if need(*x) {
                        let gam = nodes[*gamma].value.data();
                        let m = T::from_usize_lossy(b * plane);
                        let mut dx = Tensor::zeros(xhat.shape());
                        for n in 0..b {
                            for ch in 0..c {
                                let scale = gam[ch] * inv_std[ch];
                                for i in (n * c + ch) * plane..(n * c + ch + 1) * plane {
                                    dx.data_mut()[i] = if *batch_stats {
                                        scale / m * (m * g.data()[i] - sum_g[ch] - xhat.data()[i] * sum_gx[ch])
                                    } else {
                                        scale * g.data()[i]
                                    };
                                }
                            }
                        }
                        acc(*x, dx);
                    }
                    if need(*gamma) {
                        acc(*gamma, Tensor::from_vec(&[c], sum_gx)?);
                    }
                    if need(*beta) {
                        acc(*beta, Tensor::from_vec(&[c], sum_g)?);
                    }
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(&nodes[*x].value, |g, v| if v > T::zero() { g } else { T::zero() })?;
                    acc(*x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let dx = g.zip_map(&nodes[*x].value, |g, v| if v > T::zero() { g } else { g * s })?;
                    acc(*x, dx);
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                    acc(*x, dx);
                }
                Op::Reshape(x) => {
                    acc(*x, g.reshape(nodes[*x].value.shape())?);
                }
                Op::RowNormalize { x, norms } => {
                    let d = node.value.dim(1);
                    let mut dx = Tensor::zeros(node.value.shape());
                    for (i, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let y = &node.value.data()[i * d..(i + 1) * d];
                        let gr = &g.data()[i * d..(i + 1) * d];
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx.data_mut()[i * d + j] = (gr[j] - y[j] * dot) / n;
                        }
                    }
                    acc(*x, dx);
                }
                Op::MaskMul { x, mask } => {
                    acc(*x, g.zip_map(mask, |a, m| a * m)?);
                }
                Op::Augment { x, views } => {
                    let dx = augment::apply_batch_adjoint(&nodes[*x].value, &views[..], &g)?;
                    acc(*x, dx);
                }
                Op::Mean(x) => {
                    let xv = &nodes[*x].value;
                    let v = g.data()[0] / T::from_usize_lossy(xv.numel().max(1));
                    acc(*x, Tensor::full(xv.shape(), v));
                }
                Op::WeightedSum(terms) => {
                    for &(i, w) in terms {
                        if need(i) {
                            acc(i, Tensor::full(nodes[i].value.shape(), w * g.data()[0]));
                        }
                    }
                }
                Op::Precomputed { inputs, grads: local } => {
                    let up = g.data()[0];
                    for (&i, lg) in inputs.iter().zip(local) {
                        if need(i) {
                            acc(i, lg.map(|v| v * up));
                        }
                    }
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment::{sample_views, AugmentationPolicy};

    fn ramp(shape: &[usize], phase: f64, scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.61 + phase).sin() * scale).collect()).unwrap()
    }

    /// Checks d f / d input against central differences for every element.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[i] += delta;
                            }
                            g2.param(u)
                        })
                        .collect();
                    let o = f(&g2, &vs);
                    g2.item(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let tol = 1e-6 * (1.0 + fd.abs().max(a.abs()));
                assert!((fd - a).abs() <= tol, "input {k} elem {i}: fd {fd} vs analytic {a}");
            }
        }
    }

    // Weighted sum against a fixed probe so every output element matters.
    fn probe(g: &Graph<f64>, v: Var) -> Var {
        let shape = g.value(v).shape().to_vec();
        let m = g.mask_mul(v, ramp(&shape, 0.3, 1.0)).unwrap();
        g.mean(m)
    }

    #[test]
    fn conv2d_gradients() {
        let geom = ConvGeom::square(4, 2, 1);
        check(
            vec![ramp(&[2, 2, 6, 6], 0.0, 1.0), ramp(&[3, 2, 4, 4], 1.0, 0.5), ramp(&[3], 2.0, 0.1)],
            |g, v| probe(g, g.conv2d(v[0], v[1], Some(v[2]), geom).unwrap()),
        );
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let geom = ConvGeom::square(4, 2, 1);
        check(
            vec![ramp(&[2, 3, 3, 3], 0.0, 1.0), ramp(&[3, 2, 4, 4], 1.0, 0.5), ramp(&[2], 2.0, 0.1)],
            |g, v| probe(g, g.conv_transpose2d(v[0], v[1], Some(v[2]), geom).unwrap()),
        );
    }

    #[test]
    fn linear_and_activation_gradients() {
        check(
            vec![ramp(&[4, 5], 0.2, 1.0), ramp(&[3, 5], 1.0, 0.7), ramp(&[3], 2.0, 0.3)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                let a = g.leaky_relu(y, 0.2);
                let b = g.tanh(a);
                let c = g.relu(b);
                probe(g, c)
            },
        );
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        check(
            vec![ramp(&[3, 2, 2, 2], 0.4, 1.0), ramp(&[2], 1.0, 0.5), ramp(&[2], 2.0, 0.3)],
            |g, v| {
                let (y, stats) = g.batch_norm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 }).unwrap();
                assert!(stats.is_some());
                probe(g, y)
            },
        );
        let (m, var) = (vec![0.1, -0.2], vec![0.5, 2.0]);
        check(
            vec![ramp(&[3, 2, 2, 2], 0.4, 1.0), ramp(&[2], 1.0, 0.5), ramp(&[2], 2.0, 0.3)],
            |g, v| {
                let mode = NormMode::Running {
                    mean: &m,
                    var: &var,
                    eps: 1e-5,
                };
                probe(g, g.batch_norm(v[0], v[1], v[2], mode).unwrap().0)
            },
        );
    }

    #[test]
    fn row_normalize_reshape_and_weighted_sum_gradients() {
        check(vec![ramp(&[3, 4], 0.9, 1.0), ramp(&[2, 6], 0.1, 1.0)], |g, v| {
            let n = g.row_normalize(v[0]).unwrap();
            let r = g.reshape(v[1], &[3, 4]).unwrap();
            let a = probe(g, n);
            let b = probe(g, r);
            g.weighted_sum(&[(a, 2.0), (b, -0.5)])
        });
    }

    #[test]
    fn zero_row_normalizes_to_first_basis_vector() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        let y = g.row_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
        let loss = probe(&g, y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_gradients() {
        let policy = AugmentationPolicy {
            color_jitter_strength: 0.4,
            jitter_probability: 1.0,
            grayscale_probability: 0.3,
            ..AugmentationPolicy::default()
        };
        let views = sample_views(&policy, 3, 0, 0, 2, 6, 6);
        check(vec![ramp(&[3, 3, 6, 6], 0.5, 0.3)], |g, v| probe(g, g.augment(v[0], views.clone()).unwrap()));
    }

    #[test]
    fn constants_and_detached_nodes_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.param(ramp(&[2, 2], 0.0, 1.0));
        let c = g.constant(ramp(&[2, 2], 1.0, 1.0));
        let d = g.detach(a);
        let s = g.weighted_sum(&[(g.mean(a), 1.0), (g.mean(c), 1.0), (g.mean(d), 1.0)]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.25; 4]);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert!(g.backward(a).is_err());
    }
}
