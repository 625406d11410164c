//! Training objectives: per-task losses and the three policy/gating regularizers.
//!
//! ```text
//! L_sparsity = Σ_{l,k} log α[l,k]                         (learnable blocks only)
//! L_sharing  = Σ_{k1<k2} Σ_l (L − l)/L · |α[l,k1] − α[l,k2]|   (l = 1..L)
//! L_instance = Σ_l (β_l − t)²                              (gated blocks)
//! L_total    = Σ_k λ_k L_k + λ_sp L_sparsity + λ_sh L_sharing + λ_in L_instance
//! ```
//!
//! Which regularizers enter the total depends on the training [`Phase`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::task::TaskKind;
use crate::tensor::Tensor;

// Tuned once on the nested-clusters benchmark. 0.05 drives every block to
// zero there; 0.001 keeps about half of the gated tail.
fn default_sparsity() -> f64 {
    0.001
}
fn default_sharing() -> f64 {
    0.05
}
fn default_instance() -> f64 {
    1.0
}
fn default_target_rate() -> f64 {
    0.55
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-task weights `λ_k`; empty means 1 for every task.
    #[serde(default)]
    pub task: Vec<f64>,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default = "default_sharing")]
    pub sharing: f64,
    #[serde(default = "default_instance")]
    pub instance: f64,
    /// Target execute rate `t` of gated blocks.
    #[serde(default = "default_target_rate")]
    pub target_rate: f64,
    /// Sum the sharing loss over ordered task pairs (doubles it).
    #[serde(default)]
    pub ordered_pairs: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: Vec::new(),
            sparsity: default_sparsity(),
            sharing: default_sharing(),
            instance: default_instance(),
            target_rate: default_target_rate(),
            ordered_pairs: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if !self.task.is_empty() && self.task.len() != num_tasks {
            return Err(Error::Config(format!(
                "losses.task has {} weights for {num_tasks} tasks",
                self.task.len()
            )));
        }
        let all = self
            .task
            .iter()
            .chain([&self.sparsity, &self.sharing, &self.instance]);
        for w in all {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        validate_target_rate(self.target_rate)
    }

    pub fn task_weight(&self, k: usize) -> f64 {
        self.task.get(k).copied().unwrap_or(1.0)
    }
}

pub fn validate_target_rate(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("target rate must be in (0, 1], got {t}")))
    }
}

/// Training phase; selects the active loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Hard sharing warm-up: task losses only.
    WarmUp,
    /// Network-weight epochs of the alternation: task losses only.
    Network,
    /// Policy epochs: task + sparsity + sharing.
    Policy,
    /// Plan-fixed retraining: task + instance.
    Retrain,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::WarmUp => "warm_up",
            Phase::Network => "network",
            Phase::Policy => "policy",
            Phase::Retrain => "retrain",
        }
    }
}

fn check_alpha<S: Scalar>(alpha: &Var<'_, S>, learnable: &[bool]) -> Result<usize> {
    let shape = alpha.shape();
    if shape.len() != 2 || shape[0] != learnable.len() {
        return Err(Error::Model(format!(
            "alpha shape {shape:?} does not match {} blocks",
            learnable.len()
        )));
    }
    let k = shape[1];
    let v = alpha.value();
    for (l, _) in learnable.iter().enumerate().filter(|(_, &m)| m) {
        for j in 0..k {
            let a = v.data()[l * k + j];
            if !(a > S::zero() && a < S::one()) {
                return Err(Error::Model(format!("alpha[{l}][{j}] = {a} outside (0, 1)")));
            }
        }
    }
    Ok(k)
}

/// `Σ log α` over learnable blocks; 0 when none are learnable.
pub fn sparsity_loss<'g, S: Scalar>(alpha: Var<'g, S>, learnable: &[bool]) -> Result<Var<'g, S>> {
    let k = check_alpha(&alpha, learnable)?;
    let idx: Vec<usize> = learnable
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(l, _)| (0..k).map(move |j| l * k + j))
        .collect();
    if idx.is_empty() {
        return Ok(alpha.graph().scalar_constant(S::zero()));
    }
    Ok(alpha.gather(&idx)?.log().sum())
}

/// Depth-weighted disagreement between task columns of `α`, over learnable
/// blocks (pinned blocks agree trivially). Block `l` (0-based) has weight
/// `(L − l − 1) / L`.
pub fn sharing_loss<'g, S: Scalar>(alpha: Var<'g, S>, learnable: &[bool], ordered_pairs: bool) -> Result<Var<'g, S>> {
    let k = check_alpha(&alpha, learnable)?;
    let g = alpha.graph();
    let l_total = learnable.len();
    let blocks: Vec<usize> = (0..l_total).filter(|&l| learnable[l]).collect();
    if blocks.is_empty() || k < 2 {
        return Ok(g.scalar_constant(S::zero()));
    }
    let depth_w: Vec<S> = blocks
        .iter()
        .map(|&l| S::lit((l_total - l - 1) as f64 / l_total as f64))
        .collect();
    let depth_w = g.constant(Tensor::vector(depth_w)?);
    let mut total: Option<Var<'g, S>> = None;
    for k1 in 0..k {
        for k2 in k1 + 1..k {
            let a = alpha.gather(&blocks.iter().map(|&l| l * k + k1).collect::<Vec<_>>())?;
            let b = alpha.gather(&blocks.iter().map(|&l| l * k + k2).collect::<Vec<_>>())?;
            let term = a.sub(b)?.abs().mul(depth_w)?.sum();
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    let total = total.expect("k >= 2");
    Ok(if ordered_pairs { total.scale(S::lit(2.0)) } else { total })
}

/// `Σ (β_l − t)²` for per-gated-block execute rates `β`.
pub fn instance_loss<'g, S: Scalar>(beta: Var<'g, S>, target_rate: f64) -> Result<Var<'g, S>> {
    validate_target_rate(target_rate)?;
    Ok(beta.add_scalar(S::lit(-target_rate)).square().sum())
}

/// Mean loss of one task head over a batch.
pub fn task_loss<'g, S: Scalar>(output: Var<'g, S>, targets: &[f64], kind: TaskKind) -> Result<Var<'g, S>> {
    let shape = output.shape();
    let n = targets.len();
    if shape.len() != 2 || shape[0] != n || shape[1] != kind.output_dim() {
        return Err(Error::Model(format!(
            "head output {shape:?} does not fit {n} targets of kind {kind}"
        )));
    }
    for (i, &y) in targets.iter().enumerate() {
        kind.validate_label(y)
            .map_err(|m| Error::Data(format!("target {i}: {m}")))?;
    }
    let g = output.graph();
    match kind {
        TaskKind::Classification { classes } => {
            let idx: Vec<usize> = targets
                .iter()
                .enumerate()
                .map(|(i, &y)| i * classes + y as usize)
                .collect();
            Ok(output.log_softmax(1)?.gather(&idx)?.mean().neg())
        }
        TaskKind::Regression => {
            let y = g.constant(Tensor::from_f64(vec![n, 1], targets)?);
            Ok(output.sub(y)?.square().mean())
        }
        TaskKind::Binary => {
            // softplus(z) − y·z is binary cross-entropy on logits
            let y = g.constant(Tensor::from_f64(vec![n, 1], targets)?);
            Ok(output.softplus().sub(output.mul(y)?)?.mean())
        }
    }
}

/// Auxiliary loss terms available for a step.
#[derive(Default)]
pub struct AuxTerms<'g, S> {
    pub sparsity: Option<Var<'g, S>>,
    pub sharing: Option<Var<'g, S>>,
    pub instance: Option<Var<'g, S>>,
}

/// Scalar values of every term of one step, for logging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: Vec<f64>,
    pub sparsity: f64,
    pub sharing: f64,
    pub instance: f64,
    pub total: f64,
}

/// Weighted total for `phase`; terms inactive in the phase are left out.
pub fn total_loss<'g, S: Scalar>(
    g: &'g Graph<S>,
    task_losses: &[Var<'g, S>],
    aux: &AuxTerms<'g, S>,
    weights: &LossWeights,
    phase: Phase,
) -> Result<(Var<'g, S>, LossBreakdown)> {
    weights.validate(task_losses.len())?;
    let mut total = g.scalar_constant(S::zero());
    let mut br = LossBreakdown::default();
    for (k, l) in task_losses.iter().enumerate() {
        total = total.add(l.scale(S::lit(weights.task_weight(k))))?;
        br.task.push(l.item().as_f64());
    }
    let mut add_term = |term: Option<Var<'g, S>>, w: f64, name: &str, slot: &mut f64| -> Result<()> {
        let t = term.ok_or_else(|| Error::Model(format!("{name} loss required in phase {}", phase.as_str())))?;
        *slot = t.item().as_f64();
        if w != 0.0 {
            total = total.add(t.scale(S::lit(w)))?;
        }
        Ok(())
    };
    match phase {
        Phase::WarmUp | Phase::Network => {}
        Phase::Policy => {
            add_term(aux.sparsity, weights.sparsity, "sparsity", &mut br.sparsity)?;
            add_term(aux.sharing, weights.sharing, "sharing", &mut br.sharing)?;
        }
        Phase::Retrain => {
            if let Some(inst) = aux.instance {
                add_term(Some(inst), weights.instance, "instance", &mut br.instance)?;
            }
        }
    }
    br.total = total.item().as_f64();
    Ok((total, br))
}
