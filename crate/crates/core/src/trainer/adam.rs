use std::collections::BTreeMap;

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut m = BTreeMap::new();
        for (name, p) in params.iter().filter(|(_, p)| p.kind.trainable()) {
            m.insert(name.clone(), Tensor::zeros(p.value.shape()));
        }
        Adam {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// a gradient keep their value and moments.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>, cfg: &OptimizerConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - b1.powi(self.t as i32));
        let c2 = T::from_f64_lossy(1.0 - b2.powi(self.t as i32));
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let lr = T::from_f64_lossy(cfg.learning_rate);
        let eps = T::from_f64_lossy(cfg.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Contract(format!("{name} has no optimizer state"))),
            };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient of {name} has shape {:?}", g.shape())));
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
