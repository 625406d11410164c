//! First-order optimizers with per-parameter state keyed by parameter name.
//!
//! State is stored as tensors so checkpoints round-trip bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v ← μv + g`, `p ← p − lr·v`.
    Sgd { momentum: f64 },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
struct ParamState<S: Scalar> {
    m: Tensor<S>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Tensor<S>>,
    steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Optimizer<S: Scalar> {
    kind: OptimizerKind,
    state: BTreeMap<String, ParamState<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to `param` from `grad`.
    pub fn update(&mut self, name: &str, param: &mut Tensor<S>, grad: &Tensor<S>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Model(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let kind = self.kind;
        let st = self.state.entry(name.to_string()).or_insert_with(|| ParamState {
            m: Tensor::zeros(param.shape().to_vec()).expect("valid shape"),
            v: match kind {
                OptimizerKind::Adam { .. } => Some(Tensor::zeros(param.shape().to_vec()).expect("valid shape")),
                OptimizerKind::Sgd { .. } => None,
            },
            steps: 0,
        });
        if st.m.shape() != param.shape() {
            return Err(Error::Model(format!("optimizer state for {name} has a stale shape")));
        }
        st.steps += 1;
        let lr = S::lit(lr);
        match kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = S::lit(momentum);
                for ((p, m), &g) in param.data_mut().iter_mut().zip(st.m.data_mut()).zip(grad.data()) {
                    *m = mu * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                let t = st.steps as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let v = st.v.as_mut().ok_or_else(|| Error::Model(format!("missing Adam state for {name}")))?;
                for (((p, m), v), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(st.m.data_mut())
                    .zip(v.data_mut())
                    .zip(grad.data())
                {
                    *m = b1 * *m + (S::one() - b1) * g;
                    *v = b2 * *v + (S::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Updates every parameter in `params` that has a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Model(format!("gradient for unknown parameter {name}")))?;
            self.update(name, p, g, lr)?;
        }
        Ok(())
    }

    /// Drops state for names matching `pred` (e.g. after re-initializing them).
    pub fn forget(&mut self, pred: impl Fn(&str) -> bool) {
        self.state.retain(|k, _| !pred(k));
    }
}

/// `base · 0.5^⌊epoch / period⌋`.
pub fn step_lr(base: f64, epoch: usize, period: usize) -> f64 {
    let halvings = epoch / period.max(1);
    base * 0.5f64.powi(halvings.min(1074) as i32)
}
