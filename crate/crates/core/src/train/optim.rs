//! SGD with momentum and Adam.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn sgd() -> Self {
        OptimKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::Sgd { .. } => "sgd",
            OptimKind::Adam { .. } => "adam",
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::sgd()),
            "adam" => Ok(OptimKind::adam()),
            _ => Err(Error::config(format!("unknown optimizer `{s}`; expected sgd or adam"))),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter slot tensors.
///
/// Slots are created lazily on the first step that sees a parameter, shaped
/// like that parameter.
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub kind: OptimKind,
    pub learning_rate: f64,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(kind: OptimKind, learning_rate: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::config(format!("learning rate must be non-negative, got {learning_rate}")));
        }
        match kind {
            OptimKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
            }
            OptimKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(Error::config("adam needs betas in [0, 1) and a positive eps"));
            }
            _ => {}
        }
        Ok(OptimState { kind, learning_rate, step: 0, first: IndexMap::new(), second: IndexMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Slot tensor for `name` (velocity for SGD, first moment for Adam).
    pub fn slot(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    /// Applies one update. `grads` must cover exactly the trainable entries
    /// of `params`; frozen entries and buffers are never touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, entry) in params.iter() {
            if entry.trainable() != grads.contains_key(name) {
                return Err(Error::Internal(format!("gradient set does not match trainable entries at `{name}`")));
            }
        }
        if let Some(extra) = grads.keys().find(|k| !params.contains(k)) {
            return Err(Error::Internal(format!("gradient for unknown entry `{extra}`")));
        }
        self.step += 1;
        let lr = self.learning_rate;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            if p.shape() != g.shape() {
                return Err(Error::Internal(format!(
                    "gradient for `{name}` has shape {} but the parameter is {}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimKind::Sgd { momentum } => {
                    let mu = T::from_f64_lossy(momentum);
                    let lr = T::from_f64_lossy(lr);
                    for ((p, v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *v = mu * *v + g;
                        *p = *p - lr * *v;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let (one, eps) = (T::one(), T::from_f64_lossy(eps));
                    let step = T::from_f64_lossy(lr / c1);
                    let c2 = T::from_f64_lossy(c2);
                    for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p = *p - step * *m / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_parameter("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("w".to_string(), Tensor::vector(vec![g]))])
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = store(1.0);
        let mut opt = OptimState::new(OptimKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        opt.step(&mut p, &grads(1.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_normalized() {
        let mut p = store(1.0);
        let mut opt = OptimState::new(OptimKind::adam(), 0.001).unwrap();
        // f = θ²/2, so g = θ = 1
        opt.step(&mut p, &grads(1.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimKind::sgd(), OptimKind::adam()] {
            let mut p = store(0.37);
            let mut opt = OptimState::new(kind, 0.1).unwrap();
            for _ in 0..3 {
                opt.step(&mut p, &grads(0.0)).unwrap();
            }
            assert_eq!(p.get("w").unwrap().data()[0].to_bits(), 0.37f64.to_bits());
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store(0.0);
        let mut opt = OptimState::new(OptimKind::sgd(), 1.0).unwrap();
        opt.step(&mut p, &grads(1.0)).unwrap();
        opt.step(&mut p, &grads(1.0)).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p.get("w").unwrap().data()[0] + 2.9).abs() < 1e-12);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = store(1.0);
        p.insert_parameter("frozen", Tensor::vector(vec![2.0])).unwrap();
        p.set_trainable("frozen", false).unwrap();
        let mut opt = OptimState::new(OptimKind::sgd(), 0.1).unwrap();
        let mut g = grads(1.0);
        g.insert("frozen".into(), Tensor::vector(vec![1.0]));
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Internal(_))));
        let bad = IndexMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(opt.step(&mut p, &bad), Err(Error::Internal(_))));
        assert!(opt.step(&mut p, &grads(1.0)).is_ok());
        assert_eq!(p.get("frozen").unwrap().data()[0], 2.0);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(OptimState::<f32>::new(OptimKind::sgd(), -1.0).is_err());
        assert!(OptimState::<f32>::new(OptimKind::Sgd { momentum: 1.0 }, 0.1).is_err());
        assert!("rmsprop".parse::<OptimKind>().is_err());
        assert_eq!("adam".parse::<OptimKind>().unwrap(), OptimKind::adam());
    }
}
