use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Algorithm {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Algorithm {
    pub const fn adam() -> Self {
        Algorithm::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer configuration plus its per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar> {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(algorithm: Algorithm, learning_rate: f64) -> Self {
        Self {
            algorithm,
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(Algorithm::adam(), learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(Algorithm::Sgd, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter; each must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if let Some(missing) = params.names().find(|n| params.grad(n).is_none()) {
            return Err(Error::Usage(format!(
                "optimizer step: parameter `{missing}` has no gradient"
            )));
        }
        self.step += 1;
        let lr = S::of(self.learning_rate);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let (value, grad) = params.value_and_grad_mut(&name).expect("name from store");
            let grad = grad.expect("checked above").data().to_vec();
            match self.algorithm {
                Algorithm::Sgd => {
                    for (p, g) in value.data_mut().iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                }
                Algorithm::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name)
                        .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
                    let (b1, b2) = (S::of(beta1), S::of(beta2));
                    let one = S::one();
                    let t = self.step as i32;
                    let c1 = one - b1.powi(t);
                    let c2 = one - b2.powi(t);
                    let eps = S::of(eps);
                    for (((p, g), mi), vi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (one - b1) * g;
                        *vi = b2 * *vi + (one - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as a parameter store (`m.<name>`, `v.<name>`) plus the scalar state,
    /// suitable for writing as a checkpoint.
    pub fn export(&self) -> (ParamStore<S>, BTreeMap<String, String>) {
        let mut store = ParamStore::new();
        for (name, (m, v)) in &self.moments {
            let shape = Shape::new(1, 1, 1, m.len());
            for (prefix, buf) in [("m", m), ("v", v)] {
                let t = Tensor::from_vec(shape, buf.clone()).expect("length matches");
                store.insert(format!("{prefix}.{name}"), t).expect("unique names");
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("model".into(), "optimizer".into());
        meta.insert(
            "algorithm".into(),
            serde_json::to_string(&self.algorithm).expect("algorithm serializes"),
        );
        meta.insert("learning_rate".into(), format!("{:e}", self.learning_rate));
        meta.insert("step".into(), self.step.to_string());
        (store, meta)
    }

    /// Inverse of [`OptimizerState::export`].
    pub fn import(store: &ParamStore<S>, meta: &BTreeMap<String, String>) -> Result<Self> {
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Config(format!("optimizer state lacks `{k}`")))
        };
        let bad = |k: &str| Error::Config(format!("optimizer state has a malformed `{k}`"));
        let algorithm: Algorithm =
            serde_json::from_str(field("algorithm")?).map_err(|_| bad("algorithm"))?;
        let learning_rate: f64 = field("learning_rate")?.parse().map_err(|_| bad("learning_rate"))?;
        let step: u64 = field("step")?.parse().map_err(|_| bad("step"))?;
        let mut moments = BTreeMap::new();
        for (key, t) in store.iter() {
            if let Some(name) = key.strip_prefix("m.") {
                let v = store
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks `v.{name}`")))?;
                if v.numel() != t.numel() {
                    return Err(bad(key));
                }
                moments.insert(name.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(Self {
            algorithm,
            learning_rate,
            step,
            moments,
        })
    }
}
