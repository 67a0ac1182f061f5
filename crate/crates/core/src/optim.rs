//! RMSprop.

use std::collections::BTreeMap;

use crate::autodiff::ParamStore;
use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running averages of squared gradients, keyed by qualified parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    caches: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
            return Err(Error::Config(format!("bad RMSprop settings lr={lr} decay={decay} eps={eps}")));
        }
        Ok(RmsProp { lr, decay, eps, caches: BTreeMap::new() })
    }

    pub fn cache(&self, name: &str) -> Option<&Tensor> {
        self.caches.get(name)
    }

    /// Updates every parameter of `store` from its stored gradient.
    pub fn step(&mut self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        self.step_all(&mut [(prefix, store)])
    }

    /// One update over several stores. All gradients are checked before any
    /// parameter moves, so a non-finite gradient leaves every store untouched.
    pub fn step_all(&mut self, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
        for (prefix, store) in stores.iter() {
            for p in store.iter() {
                let g = p
                    .grad
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("parameter {prefix}.{} has no gradient", p.name)))?;
                if g.shape() != p.value.shape() {
                    return Err(Error::dim(
                        "rmsprop",
                        format!("{}: grad {:?} vs {:?}", p.name, g.shape(), p.value.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(format!("{prefix}.{}", p.name)));
                }
            }
        }
        let (lr, rho, eps) = (self.lr, self.decay, self.eps);
        for (prefix, store) in stores.iter_mut() {
            for p in store.iter_mut() {
                let g = p.grad.as_ref().expect("checked above");
                let cache = self
                    .caches
                    .entry(format!("{prefix}.{}", p.name))
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                for ((w, c), &gv) in p.value.data_mut().iter_mut().zip(cache.data_mut()).zip(g.data()) {
                    *c = rho * *c + (1.0 - rho) * gv * gv;
                    *w -= lr * gv / (c.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<NamedTensor> {
        self.caches
            .iter()
            .map(|(k, v)| NamedTensor { name: k.clone(), tensor: v.clone() })
            .collect()
    }

    pub fn import(&mut self, state: &[NamedTensor]) -> Result<()> {
        self.caches.clear();
        for nt in state {
            if nt.tensor.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Format(format!("optimizer cache {} has invalid entries", nt.name)));
            }
            self.caches.insert(nt.name.clone(), nt.tensor.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let k = s.push("w", Tensor::vector(values));
        s.get_mut(k).grad = Some(Tensor::vector(grads));
        s
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8).unwrap();
        let mut s = store_with(vec![0.0, 5.0], vec![1.0, 1.0]);
        opt.step("enc", &mut s).unwrap();
        let expect = -1e-4 / (0.01f64.sqrt() + 1e-8);
        let w = &s.find("w").unwrap().value;
        assert!((w.data()[0] - expect).abs() < 1e-15);
        assert!((expect + 1e-3).abs() < 1e-9);
        assert!((w.data()[1] - 5.0 - w.data()[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_only_decays_cache() {
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8).unwrap();
        let mut s = store_with(vec![1.0], vec![2.0]);
        opt.step("p", &mut s).unwrap();
        let before = s.find("w").unwrap().value.clone();
        let c0 = opt.cache("p.w").unwrap().data()[0];
        s.get_mut(s.key(0)).grad = Some(Tensor::vector(vec![0.0]));
        opt.step("p", &mut s).unwrap();
        assert_eq!(s.find("w").unwrap().value, before);
        assert_eq!(opt.cache("p.w").unwrap().data()[0], 0.99 * c0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_atomically() {
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8).unwrap();
        let mut s = ParamStore::new();
        let a = s.push("a", Tensor::vector(vec![1.0]));
        let b = s.push("b", Tensor::vector(vec![1.0]));
        s.get_mut(a).grad = Some(Tensor::vector(vec![1.0]));
        s.get_mut(b).grad = Some(Tensor::vector(vec![f64::INFINITY]));
        match opt.step("enc", &mut s) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "enc.b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.get(a).value.data(), &[1.0]);
    }
}
