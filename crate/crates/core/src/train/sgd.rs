use std::collections::BTreeMap;

use crate::diff::Scalar;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// SGD with heavy-ball momentum: `m ← μ·m + g`, `p ← p − lr·m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum<S = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[S]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// `grads` must name exactly the parameters in `params`, shape for shape.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>) -> Result<()> {
        if params.len() != grads.len() || params.names().zip(grads.names()).any(|(a, b)| a != b) {
            let missing: Vec<&str> = params.names().filter(|n| grads.get(n).is_none()).collect();
            let extra: Vec<&str> = grads.names().filter(|n| params.get(n).is_none()).collect();
            return Err(Error::Config(format!(
                "gradient set does not match parameters (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for ((name, p), (_, g)) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient for `{name}` has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let (lr, mu) = (S::of(self.lr), S::of(self.momentum));
        for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            let m = self.velocity.entry(name.to_string()).or_insert_with(|| vec![S::zero(); g.len()]);
            for ((pv, mv), &gv) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(g.data()) {
                *mv = mu * *mv + gv;
                *pv = *pv - lr * *mv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn one(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_f64(vec![1], &[v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn closed_forms() {
        let mut p = one(1.0);
        SgdMomentum::new(0.1, 0.0).step(&mut p, &one(2.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-12);

        let mut p = one(0.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut p, &one(1.0)).unwrap();
        opt.step(&mut p, &one(1.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.29).abs() < 1e-12);

        let mut p = one(3.0);
        SgdMomentum::new(0.0, 0.9).step(&mut p, &one(5.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 3.0);
    }

    #[test]
    fn rejects_mismatch() {
        let mut p = one(1.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::<f64>::zeros(vec![2])).unwrap();
        assert!(SgdMomentum::new(0.1, 0.0).step(&mut p, &g).is_err());
        let mut g = ParamSet::new();
        g.insert("v", Tensor::<f64>::zeros(vec![1])).unwrap();
        assert!(SgdMomentum::new(0.1, 0.0).step(&mut p, &g).is_err());
    }
}
