use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use weedsense_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient. A non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for name in params.values.keys() {
            if let Some(g) = grads.get(name) {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        what: "gradient".into(),
                        detail: format!("parameter {name}"),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let decay = 1.0 - lr * c.weight_decay;
        for (name, p) in params.values.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::config(format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                let mi = c.beta1 * md[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * vd[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                pd[i] = T::from_f64_lossy(pd[i].as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Specs};

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = Specs::default();
        s.param("p".into(), vec![1], Init::Const(v));
        ParamStore::from_specs(&s, 0).unwrap()
    }

    fn grad(g: f64) -> HashMap<String, Tensor<f64>> {
        HashMap::from([("p".to_string(), Tensor::full([1], g))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(1.5);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..3 {
            opt.step(&mut p, &grad(0.0), 1e-2).unwrap();
        }
        assert_eq!(p.values["p"].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        for g in [0.3, -7.0] {
            let mut p = store(2.0);
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            });
            opt.step(&mut p, &grad(g), lr).unwrap();
            let expected = 2.0 - lr * g / (g.abs() + 1e-8);
            assert!((p.values["p"].data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_alone_shrinks_by_one_minus_lr_wd() {
        let mut p = store(4.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut p, &grad(0.0), 0.5).unwrap();
        assert!((p.values["p"].data()[0] - 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let e = opt.step(&mut p, &grad(f64::NAN), 1e-3).unwrap_err();
        assert!(e.to_string().contains("parameter p"));
        assert_eq!(opt.step, 0);
        assert_eq!(p.values["p"].data(), &[1.0]);
    }
}
