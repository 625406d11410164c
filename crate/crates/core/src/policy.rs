//! Task-specific execution policy: a learned distribution over which blocks
//! each task executes, with a block curriculum.
//!
//! Each (block, task) pair owns a logit pair `[skip, execute]`; `α[l][k]` is
//! the softmax execute probability. Blocks that are always on, and blocks not
//! yet reached by the curriculum frontier, are pinned to `α = 1`. The
//! frontier grows from the last block toward the first.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{BackboneSpec, ExecutionPlan};
use crate::error::{Error, Result};
use crate::gumbel::{self, BernoulliLogits, NoiseSource, LOGIT_CLAMP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PolicyDistribution<S: Scalar> {
    /// `[L, K, 2]` logits.
    logits: Tensor<S>,
    /// Number of trailing non-always-on blocks whose policy is learnable.
    frontier: usize,
    always_on: Vec<bool>,
}

/// Relaxed execution weights for one training step.
pub struct RelaxedPolicy<'g, S> {
    /// The `[L, K, 2]` logits leaf, when any block is learnable.
    pub logits: Option<Var<'g, S>>,
    /// `weights[l][k]`: relaxed execute weight, `None` for pinned blocks (weight 1).
    pub weights: Vec<Vec<Option<Var<'g, S>>>>,
}

impl<'g, S: Scalar> RelaxedPolicy<'g, S> {
    /// Per-block weights seen by task `k`.
    pub fn task_weights(&self, task: usize) -> Vec<Option<Var<'g, S>>> {
        self.weights.iter().map(|row| row[task]).collect()
    }
}

impl<S: Scalar> PolicyDistribution<S> {
    /// Fresh distribution: logits 0 (α = 0.5 once learnable), frontier 0.
    pub fn new(spec: &BackboneSpec) -> Self {
        let (l, k) = (spec.num_blocks(), spec.num_tasks());
        Self {
            logits: Tensor::zeros(vec![l, k, 2]).expect("positive extents"),
            frontier: 0,
            always_on: spec.always_on.clone(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.always_on.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn frontier(&self) -> usize {
        self.frontier
    }

    pub fn max_frontier(&self) -> usize {
        self.always_on.iter().filter(|&&a| !a).count()
    }

    pub fn logits(&self) -> &Tensor<S> {
        &self.logits
    }

    /// Replaces the logits (clamped to the allowed range).
    pub fn set_logits(&mut self, logits: Tensor<S>) -> Result<()> {
        if logits.shape() != self.logits.shape() {
            return Err(Error::Model(format!(
                "policy logits shape {:?}, expected {:?}",
                logits.shape(),
                self.logits.shape()
            )));
        }
        self.logits = logits;
        self.clamp_logits();
        Ok(())
    }

    pub fn clamp_logits(&mut self) {
        let c = S::lit(LOGIT_CLAMP / 2.0);
        for v in self.logits.data_mut() {
            *v = v.max(-c).min(c);
        }
    }

    fn idx(&self, l: usize, k: usize, j: usize) -> usize {
        (l * self.num_tasks() + k) * 2 + j
    }

    /// Whether block `l` currently has a learnable policy.
    pub fn is_learnable(&self, l: usize) -> bool {
        if self.always_on[l] {
            return false;
        }
        // position of l counted from the last non-always-on block
        let from_end = self.always_on[l + 1..].iter().filter(|&&a| !a).count();
        from_end < self.frontier
    }

    pub fn is_pinned(&self, l: usize) -> bool {
        !self.is_learnable(l)
    }

    pub fn learnable_mask(&self) -> Vec<bool> {
        (0..self.num_blocks()).map(|l| self.is_learnable(l)).collect()
    }

    pub fn bernoulli(&self, l: usize, k: usize) -> BernoulliLogits<S> {
        let d = self.logits.data();
        BernoulliLogits::new(d[self.idx(l, k, 0)], d[self.idx(l, k, 1)])
    }

    /// Execute probability; exactly 1 for pinned blocks.
    pub fn alpha(&self, l: usize, k: usize) -> S {
        if self.is_pinned(l) {
            S::one()
        } else {
            self.bernoulli(l, k).alpha()
        }
    }

    pub fn alpha_matrix(&self) -> Vec<Vec<S>> {
        (0..self.num_blocks())
            .map(|l| (0..self.num_tasks()).map(|k| self.alpha(l, k)).collect())
            .collect()
    }

    /// Moves the curriculum frontier. Blocks entering the learnable region
    /// start from zero logits (α = 0.5).
    pub fn set_frontier(&mut self, frontier: usize) {
        let frontier = frontier.min(self.max_frontier());
        let before = self.learnable_mask();
        self.frontier = frontier;
        for l in 0..self.num_blocks() {
            if !before[l] && self.is_learnable(l) {
                for k in 0..self.num_tasks() {
                    for j in 0..2 {
                        let i = self.idx(l, k, j);
                        self.logits.data_mut()[i] = S::zero();
                    }
                }
            }
        }
    }

    /// Curriculum: one more block becomes learnable every `cadence`
    /// policy-phase epochs, capped at all non-always-on blocks.
    pub fn advance_curriculum(&mut self, policy_epoch: usize, cadence: usize) -> usize {
        let f = curriculum_frontier(policy_epoch, cadence, self.max_frontier());
        self.set_frontier(f);
        self.frontier
    }

    /// Registers the logits as a graph leaf and draws relaxed execute weights.
    pub fn relaxed_weights<'g, N: NoiseSource>(
        &self,
        g: &'g Graph<S>,
        tau: f64,
        noise: &mut N,
        trainable: bool,
    ) -> Result<RelaxedPolicy<'g, S>> {
        let (l_count, k_count) = (self.num_blocks(), self.num_tasks());
        // noise is drawn for every pair so the stream does not depend on the frontier
        let noise_t: Tensor<S> = noise.gumbel_tensor(vec![l_count, k_count, 2])?;
        let mut weights = vec![vec![None; k_count]; l_count];
        if self.frontier == 0 {
            return Ok(RelaxedPolicy { logits: None, weights });
        }
        let logits = g.leaf(self.logits.clone(), trainable);
        let relaxed = gumbel::relaxed_sample_var(logits, &noise_t, S::lit(tau))?;
        for (l, row) in weights.iter_mut().enumerate() {
            if self.is_learnable(l) {
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = Some(relaxed.gather(&[self.idx(l, k, 1)])?);
                }
            }
        }
        Ok(RelaxedPolicy {
            logits: Some(logits),
            weights,
        })
    }

    /// `α` as a differentiable `[L, K]` node built from a logits leaf.
    /// Pinned entries are present but must be masked out by the caller.
    pub fn alpha_var<'g>(&self, logits: Var<'g, S>) -> Result<Var<'g, S>> {
        let (l_count, k_count) = (self.num_blocks(), self.num_tasks());
        let idx: Vec<usize> = (0..l_count * k_count).map(|i| i * 2 + 1).collect();
        Ok(logits.softmax(2)?.gather(&idx)?.reshape(vec![l_count, k_count])?)
    }

    /// Draws a discrete plan: `u = hard_sample(π)` for learnable blocks, 1 for pinned.
    pub fn sample_plan<N: NoiseSource>(&self, noise: &mut N) -> ExecutionPlan {
        let u = (0..self.num_blocks())
            .map(|l| {
                (0..self.num_tasks())
                    .map(|k| {
                        let g = [S::lit(noise.gumbel()), S::lit(noise.gumbel())];
                        self.is_pinned(l) || gumbel::hard_sample(&self.bernoulli(l, k), g)
                    })
                    .collect()
            })
            .collect();
        ExecutionPlan { u }
    }

    /// Deterministic plan: execute where `α ≥ 0.5`.
    pub fn mode_plan(&self) -> ExecutionPlan {
        let half = S::lit(0.5);
        ExecutionPlan {
            u: self
                .alpha_matrix()
                .into_iter()
                .map(|row| row.into_iter().map(|a| a >= half).collect())
                .collect(),
        }
    }

    /// Policy matrix as CSV: one row per block, one column per task.
    pub fn alpha_csv(&self, task_names: &[String]) -> String {
        let mut out = String::from("block");
        for n in task_names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (l, row) in self.alpha_matrix().iter().enumerate() {
            let _ = write!(out, "{l}");
            for a in row {
                let _ = write!(out, ",{:.17e}", a.as_f64());
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, plans: &[ExecutionPlan]) -> PolicyExport {
        PolicyExport {
            alpha: self
                .alpha_matrix()
                .into_iter()
                .map(|r| r.into_iter().map(|a| a.as_f64()).collect())
                .collect(),
            frontier: self.frontier,
            sampled_plans: plans.to_vec(),
        }
    }
}

/// `min(⌊epoch / cadence⌋, max_frontier)`, with `epoch` the 1-based ordinal
/// of the policy-phase epoch.
pub fn curriculum_frontier(epoch: usize, cadence: usize, max_frontier: usize) -> usize {
    (epoch / cadence.max(1)).min(max_frontier)
}

/// Default cadence: the frontier covers every learnable block by the last
/// `policy_epochs / learnable_blocks` policy-phase epochs.
pub fn default_cadence(policy_epochs: usize, learnable_blocks: usize) -> usize {
    (policy_epochs / learnable_blocks.max(1)).max(1)
}

/// JSON export of the policy: α matrix and sampled discrete plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyExport {
    pub alpha: Vec<Vec<f64>>,
    pub frontier: usize,
    pub sampled_plans: Vec<ExecutionPlan>,
}

impl PolicyExport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
