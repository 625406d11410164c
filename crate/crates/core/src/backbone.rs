//! Residual backbone with per-block instance gating and per-task execution paths.
//!
//! Every block maps a `[n, width]` representation `X` to a same-shape output.
//! The block transform is `Z = fc2(ReLU(fc1(X)))` and the shortcut is the
//! identity, so `residual(X) = X`. Given the task policy bit `u` and the
//! instance gate bit `w`:
//!
//! ```text
//! Y = residual(X)               if u = 0 or w = 0
//! Y = ReLU(residual(X) + Z)     if u = 1 and w = 1
//! ```
//!
//! When `u = 0` neither `Z` nor the gating unit is evaluated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gumbel::{self, NoiseSource, SeededRng};
use crate::scalar::Scalar;
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::{Tensor, TensorError};

fn default_gate_init_bias() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    /// Representation width shared by every block.
    pub width: usize,
    /// Hidden width of each block's transform; its length is the block count `L`.
    pub hidden: Vec<usize>,
    pub tasks: Vec<TaskSpec>,
    /// Blocks subject to instance gating.
    pub gate_enable: Vec<bool>,
    /// Blocks excluded from the task policy (always executed by every task).
    pub always_on: Vec<bool>,
    /// Hidden width of the gating units' relevance estimator; `width / 4` when absent.
    #[serde(default)]
    pub gate_hidden: Option<usize>,
    /// Initial logit of the "execute" output of a fresh gating unit.
    #[serde(default = "default_gate_init_bias")]
    pub gate_init_bias: f64,
}

impl BackboneSpec {
    /// `blocks` equal blocks; the last `gated_tail` are gated and the first
    /// `pinned_head` are always on.
    pub fn uniform(
        input_dim: usize,
        width: usize,
        blocks: usize,
        tasks: Vec<TaskSpec>,
        gated_tail: usize,
        pinned_head: usize,
    ) -> Self {
        Self {
            input_dim,
            width,
            hidden: vec![width; blocks],
            tasks,
            gate_enable: (0..blocks).map(|l| l + gated_tail >= blocks).collect(),
            always_on: (0..blocks).map(|l| l < pinned_head).collect(),
            gate_hidden: None,
            gate_init_bias: default_gate_init_bias(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.hidden.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn gate_hidden_width(&self) -> usize {
        self.gate_hidden.unwrap_or((self.width / 4).max(1))
    }

    pub fn gated_blocks(&self) -> Vec<usize> {
        (0..self.num_blocks()).filter(|&l| self.gate_enable[l]).collect()
    }

    /// Number of blocks whose policy can be learned.
    pub fn learnable_blocks(&self) -> usize {
        self.always_on.iter().filter(|&&a| !a).count()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_blocks();
        let fail = |m: String| Err(Error::Config(m));
        if l < 1 {
            return fail("backbone needs at least one block".into());
        }
        if self.num_tasks() == 0 {
            return fail("need at least one task".into());
        }
        if self.input_dim == 0 || self.width == 0 || self.hidden.contains(&0) {
            return fail("backbone widths must be positive".into());
        }
        if self.gate_enable.len() != l || self.always_on.len() != l {
            return fail(format!(
                "gate_enable ({}) and always_on ({}) must have one entry per block ({l})",
                self.gate_enable.len(),
                self.always_on.len()
            ));
        }
        if self.gate_hidden == Some(0) {
            return fail("gate_hidden must be positive".into());
        }
        if !self.gate_init_bias.is_finite() {
            return fail("gate_init_bias must be finite".into());
        }
        Ok(())
    }

    /// Copy with instance gating switched off everywhere.
    pub fn without_gates(&self) -> Self {
        Self {
            gate_enable: vec![false; self.num_blocks()],
            ..self.clone()
        }
    }
}

/// Realized task policy: `u[l][k]` says whether task `k` executes block `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub u: Vec<Vec<bool>>,
}

impl ExecutionPlan {
    pub fn all_ones(blocks: usize, tasks: usize) -> Self {
        Self {
            u: vec![vec![true; tasks]; blocks],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.u.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.u.first().map_or(0, |r| r.len())
    }

    pub fn get(&self, block: usize, task: usize) -> bool {
        self.u[block][task]
    }

    /// Blocks executed by task `k`, in order.
    pub fn task_path(&self, task: usize) -> Vec<bool> {
        self.u.iter().map(|row| row[task]).collect()
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.num_blocks() != spec.num_blocks() || self.u.iter().any(|r| r.len() != spec.num_tasks()) {
            return Err(Error::Model(format!(
                "plan is {}x{}, backbone has {} blocks and {} tasks",
                self.num_blocks(),
                self.num_tasks(),
                spec.num_blocks(),
                spec.num_tasks()
            )));
        }
        for (l, row) in self.u.iter().enumerate() {
            if spec.always_on[l] && row.iter().any(|&b| !b) {
                return Err(Error::Model(format!("plan skips always-on block {l}")));
            }
        }
        Ok(())
    }
}

/// How instance gates decide during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Gates are not evaluated; every gated block executes.
    Open,
    /// Gates are not evaluated; every gated block takes the given decision.
    Forced(bool),
    /// Training: hard decision forward, relaxed gradient backward.
    StraightThrough { tau: f64 },
    /// Evaluation: execute iff the gate's execute probability exceeds 0.5.
    Threshold,
    /// Evaluation: stochastic hard sample.
    Sample,
}

/// Parameter groups, each handled by its own optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Network,
    Gate,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("gate") {
        ParamGroup::Gate
    } else {
        ParamGroup::Network
    }
}

/// Parameters of a model registered as leaves of one graph.
pub struct Bound<'g, S> {
    vars: BTreeMap<String, Var<'g, S>>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    pub fn get(&self, name: &str) -> Var<'g, S> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Gradients of every trainable parameter reached by the last backward pass.
    pub fn grads(&self) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Result of one block on one batch.
pub struct BlockOutput<'g, S> {
    pub y: Var<'g, S>,
    /// Task policy bit `u` for this block.
    pub evaluated: bool,
    /// Per-instance execute decision `w` (all false when `u = 0`).
    pub executed: Vec<bool>,
    /// Per-instance execute weight, present when the gating unit ran: the
    /// straight-through weight (hard value, relaxed gradient) in training,
    /// the execute probability in evaluation modes.
    pub w_soft: Option<Var<'g, S>>,
}

/// How a task's path through the backbone is chosen.
pub enum PathMode<'a, 'g, S> {
    /// Hard parameter sharing: every block executes, gates untouched.
    Plain,
    /// Relaxed task policy: `Y = ReLU(residual(X) + weight·Z)`; `None` means weight 1.
    Relaxed(&'a [Option<Var<'g, S>>]),
    /// Discrete task path with instance gating.
    Plan { path: &'a [bool], gates: GateMode },
}

pub struct TaskForward<'g, S> {
    pub output: Var<'g, S>,
    pub trace: Vec<BlockOutput<'g, S>>,
}

/// One shared evaluation of a block by the tasks in `tasks`.
pub struct GroupTrace<'g, S> {
    pub tasks: Vec<usize>,
    pub executed: Vec<bool>,
    pub w: Option<Var<'g, S>>,
}

/// All task outputs of one batch plus, per block, the groups that evaluated it.
pub struct PlanForward<'g, S> {
    pub outputs: Vec<Var<'g, S>>,
    pub blocks: Vec<Vec<GroupTrace<'g, S>>>,
}

impl<'g, S: Scalar> PlanForward<'g, S> {
    /// Batch execute rate of block `l`, averaged over the tasks evaluating it
    /// and differentiable through the gate weights; `None` if no gate ran.
    pub fn beta(&self, l: usize) -> Result<Option<Var<'g, S>>> {
        let groups: Vec<&GroupTrace<'g, S>> = self.blocks[l].iter().filter(|t| t.w.is_some()).collect();
        let total: usize = groups.iter().map(|t| t.tasks.len()).sum();
        let mut acc: Option<Var<'g, S>> = None;
        for t in groups {
            let term = t.w.expect("filtered").mean().scale(S::lit(t.tasks.len() as f64 / total as f64));
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok(acc)
    }

    /// Hard execute rate of block `l` over the tasks evaluating it.
    pub fn hard_rate(&self, l: usize) -> Option<f64> {
        let groups = &self.blocks[l];
        let total: usize = groups.iter().map(|t| t.tasks.len()).sum();
        if total == 0 {
            return None;
        }
        let s: f64 = groups
            .iter()
            .map(|t| {
                let frac = t.executed.iter().filter(|&&e| e).count() as f64 / t.executed.len().max(1) as f64;
                frac * t.tasks.len() as f64
            })
            .sum();
        Some(s / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GatedBackbone<S: Scalar> {
    spec: BackboneSpec,
    params: BTreeMap<String, Tensor<S>>,
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_matrix<S: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let mut rng = SeededRng::derive(seed, &[name_tag(name)]);
    let data = (0..rows * cols).map(|_| S::lit(rng.normal() * std)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

fn zeros<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(vec![n]).expect("positive extent")
}

impl<S: Scalar> GatedBackbone<S> {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        let w = spec.width;
        params.insert("stem.w".into(), init_matrix(seed, "stem.w", spec.input_dim, w, (1.0 / spec.input_dim as f64).sqrt()));
        params.insert("stem.b".into(), zeros(w));
        for (l, &h) in spec.hidden.iter().enumerate() {
            let p = format!("block{l}");
            params.insert(format!("{p}.fc1.w"), init_matrix(seed, &format!("{p}.fc1.w"), w, h, (2.0 / w as f64).sqrt()));
            params.insert(format!("{p}.fc1.b"), zeros(h));
            params.insert(format!("{p}.fc2.w"), init_matrix(seed, &format!("{p}.fc2.w"), h, w, 0.5 * (1.0 / h as f64).sqrt()));
            params.insert(format!("{p}.fc2.b"), zeros(w));
        }
        for (k, t) in spec.tasks.iter().enumerate() {
            let out = t.kind.output_dim();
            params.insert(format!("head{k}.w"), init_matrix(seed, &format!("head{k}.w"), w, out, (1.0 / w as f64).sqrt()));
            params.insert(format!("head{k}.b"), zeros(out));
        }
        let mut model = Self { spec, params };
        model.init_gates(seed);
        Ok(model)
    }

    /// (Re)initializes every gating unit from `seed`, leaving other parameters alone.
    pub fn init_gates(&mut self, seed: u64) {
        self.params.retain(|k, _| param_group(k) != ParamGroup::Gate);
        let (w, gh) = (self.spec.width, self.spec.gate_hidden_width());
        for l in self.spec.gated_blocks() {
            let p = format!("gate{l}");
            self.params
                .insert(format!("{p}.fc1.w"), init_matrix(seed, &format!("{p}.fc1.w"), w, gh, (2.0 / w as f64).sqrt()));
            self.params.insert(format!("{p}.fc1.b"), zeros(gh));
            self.params
                .insert(format!("{p}.fc2.w"), init_matrix(seed, &format!("{p}.fc2.w"), gh, 2, 0.1 * (1.0 / gh as f64).sqrt()));
            let bias = Tensor::new(vec![2], vec![S::zero(), S::lit(self.spec.gate_init_bias)]).expect("2");
            self.params.insert(format!("{p}.fc2.b"), bias);
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn num_gate_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| param_group(k) == ParamGroup::Gate)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Names of the parameters belonging to block `l`'s transform.
    pub fn block_param_names(&self, l: usize) -> Vec<String> {
        let p = format!("block{l}.");
        self.params.keys().filter(|k| k.starts_with(&p)).cloned().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Registers every parameter as a graph leaf; `trainable` selects which
    /// groups receive gradients.
    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: impl Fn(ParamGroup) -> bool) -> Bound<'g, S> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(param_group(k)))))
            .collect();
        Bound { vars }
    }

    /// Linear input projection. It is deliberately not followed by a
    /// nonlinearity: every nonlinearity of the network lives in the blocks,
    /// so a path that skips all blocks is a linear model.
    pub fn stem<'g>(&self, b: &Bound<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        Ok(x.linear(b.get("stem.w"), b.get("stem.b"))?)
    }

    /// Block transform `Z = fc2(ReLU(fc1(X)))`.
    pub fn transform<'g>(&self, b: &Bound<'g, S>, l: usize, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let p = format!("block{l}");
        let h = x
            .linear(b.get(&format!("{p}.fc1.w")), b.get(&format!("{p}.fc1.b")))?
            .relu();
        Ok(h.linear(b.get(&format!("{p}.fc2.w")), b.get(&format!("{p}.fc2.b")))?)
    }

    /// Relevance estimator of gating unit `l`: `[n, 2]` logits `[skip, execute]`.
    ///
    /// The estimator reads a pooled summary of `X`; for vector features the
    /// pooled summary is the row itself.
    pub fn gate_logits<'g>(&self, b: &Bound<'g, S>, l: usize, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let p = format!("gate{l}");
        let pooled = if x.shape().len() == 3 { x.mean_axis(2)? } else { x };
        let h = pooled
            .linear(b.get(&format!("{p}.fc1.w")), b.get(&format!("{p}.fc1.b")))?
            .relu();
        Ok(h.linear(b.get(&format!("{p}.fc2.w")), b.get(&format!("{p}.fc2.b")))?)
    }

    fn check_block(&self, l: usize, x: &Var<'_, S>) -> Result<usize> {
        if l >= self.spec.num_blocks() {
            return Err(Error::Model(format!("block {l} out of range")));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.width {
            return Err(TensorError::ShapeMismatch {
                op: "block_forward",
                lhs: shape,
                rhs: vec![0, self.spec.width],
            }
            .into());
        }
        Ok(shape[0])
    }

    /// One block under task bit `u` and the given gate mode.
    pub fn block_forward<'g, N: NoiseSource>(
        &self,
        b: &Bound<'g, S>,
        l: usize,
        x: Var<'g, S>,
        u: bool,
        mode: GateMode,
        noise: &mut N,
    ) -> Result<BlockOutput<'g, S>> {
        let n = self.check_block(l, &x)?;
        if !u {
            return Ok(BlockOutput {
                y: x,
                evaluated: false,
                executed: vec![false; n],
                w_soft: None,
            });
        }
        let gated = self.spec.gate_enable[l];
        let mode = if gated { mode } else { GateMode::Open };
        if gated && !self.params.contains_key(&format!("gate{l}.fc1.w")) {
            return Err(Error::Model(format!("block {l} is gated but has no gating unit")));
        }

        // (executed bits, differentiable gate weights, relaxed execute probabilities)
        let (executed, w_var, w_soft) = match mode {
            GateMode::Open => (vec![true; n], None, None),
            GateMode::Forced(bit) => (vec![bit; n], None, None),
            GateMode::StraightThrough { tau } => {
                let logits = self.gate_logits(b, l, x)?;
                let g: Tensor<S> = noise.gumbel_tensor(vec![n, 2])?;
                let soft = gumbel::relaxed_sample_var(logits, &g, S::lit(tau))?;
                let bits = gumbel::hard_sample_values(&logits.value(), &g);
                let hard = Tensor::new(
                    vec![n],
                    bits.iter().map(|&e| if e { S::one() } else { S::zero() }).collect(),
                )?;
                let soft1 = soft.column(1)?;
                let w = soft1.straight_through(hard)?;
                (bits, Some(w), Some(w))
            }
            GateMode::Threshold => {
                let alpha = self.gate_logits(b, l, x)?.softmax(1)?.column(1)?;
                let bits = alpha.value().data().iter().map(|&a| a > S::lit(0.5)).collect();
                (bits, None, Some(alpha))
            }
            GateMode::Sample => {
                let logits = self.gate_logits(b, l, x)?;
                let g: Tensor<S> = noise.gumbel_tensor(vec![n, 2])?;
                let bits = gumbel::hard_sample_values(&logits.value(), &g);
                (bits, None, Some(logits.softmax(1)?.column(1)?))
            }
        };

        if w_var.is_none() && executed.iter().all(|&e| !e) {
            return Ok(BlockOutput {
                y: x,
                evaluated: true,
                executed,
                w_soft,
            });
        }
        let z = self.transform(b, l, x)?;
        let active = x.add(z)?.relu();
        let y = match w_var {
            None if executed.iter().all(|&e| e) => active,
            None => {
                let w = Tensor::new(
                    vec![n],
                    executed.iter().map(|&e| if e { S::one() } else { S::zero() }).collect(),
                )?;
                Var::row_blend(x.graph().constant(w), active, x)?
            }
            Some(w) => Var::row_blend(w, active, x)?,
        };
        Ok(BlockOutput {
            y,
            evaluated: true,
            executed,
            w_soft,
        })
    }

    /// One block under a relaxed task-policy weight (`None` = weight 1), gates open.
    pub fn block_forward_relaxed<'g>(
        &self,
        b: &Bound<'g, S>,
        l: usize,
        x: Var<'g, S>,
        weight: Option<Var<'g, S>>,
    ) -> Result<Var<'g, S>> {
        self.check_block(l, &x)?;
        let z = self.transform(b, l, x)?;
        let z = match weight {
            Some(w) => z.mul(w)?,
            None => z,
        };
        Ok(x.add(z)?.relu())
    }

    pub fn head<'g>(&self, b: &Bound<'g, S>, task: usize, h: Var<'g, S>) -> Result<Var<'g, S>> {
        Ok(h.linear(b.get(&format!("head{task}.w")), b.get(&format!("head{task}.b")))?)
    }

    /// Runs task `task` on a batch: stem, blocks in order, then the task head.
    pub fn forward_task<'g, N: NoiseSource>(
        &self,
        b: &Bound<'g, S>,
        task: usize,
        x: Var<'g, S>,
        path: &PathMode<'_, 'g, S>,
        noise: &mut N,
    ) -> Result<TaskForward<'g, S>> {
        if task >= self.spec.num_tasks() {
            return Err(Error::Model(format!("task {task} out of range")));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "forward_task",
                lhs: shape,
                rhs: vec![0, self.spec.input_dim],
            }
            .into());
        }
        let n = shape[0];
        let l_count = self.spec.num_blocks();
        let mut h = self.stem(b, x)?;
        let mut trace = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let out = match path {
                PathMode::Plain => self.block_forward(b, l, h, true, GateMode::Open, noise)?,
                PathMode::Relaxed(weights) => {
                    if weights.len() != l_count {
                        return Err(Error::Model(format!(
                            "{} relaxed weights for {l_count} blocks",
                            weights.len()
                        )));
                    }
                    BlockOutput {
                        y: self.block_forward_relaxed(b, l, h, weights[l])?,
                        evaluated: true,
                        executed: vec![true; n],
                        w_soft: None,
                    }
                }
                PathMode::Plan { path, gates } => {
                    if path.len() != l_count {
                        return Err(Error::Model(format!("path of {} for {l_count} blocks", path.len())));
                    }
                    self.block_forward(b, l, h, path[l], *gates, noise)?
                }
            };
            h = out.y;
            trace.push(out);
        }
        let output = self.head(b, task, h)?;
        Ok(TaskForward { output, trace })
    }

    /// Runs every task under a discrete plan. Tasks whose paths agree on all
    /// earlier blocks share one computation of the next block (and one gate
    /// decision per instance), as in a deployed network.
    pub fn forward_plan<'g, N: NoiseSource>(
        &self,
        b: &Bound<'g, S>,
        x: Var<'g, S>,
        plan: &ExecutionPlan,
        gates: GateMode,
        noise: &mut N,
    ) -> Result<PlanForward<'g, S>> {
        plan.validate(&self.spec)?;
        let k_count = self.spec.num_tasks();
        let mut groups: Vec<(Vec<usize>, Var<'g, S>)> = vec![((0..k_count).collect(), self.stem(b, x)?)];
        let mut blocks = Vec::with_capacity(self.spec.num_blocks());
        for l in 0..self.spec.num_blocks() {
            let mut next = Vec::with_capacity(groups.len() + 1);
            let mut traces = Vec::new();
            for (tasks, h) in groups {
                let (on, off): (Vec<usize>, Vec<usize>) = tasks.into_iter().partition(|&k| plan.get(l, k));
                if !off.is_empty() {
                    next.push((off, h));
                }
                if !on.is_empty() {
                    let out = self.block_forward(b, l, h, true, gates, noise)?;
                    traces.push(GroupTrace {
                        tasks: on.clone(),
                        executed: out.executed,
                        w: out.w_soft,
                    });
                    next.push((on, out.y));
                }
            }
            next.sort_by_key(|(t, _)| t[0]);
            groups = next;
            blocks.push(traces);
        }
        let mut outputs = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let h = groups
                .iter()
                .find(|(t, _)| t.contains(&k))
                .map(|(_, h)| *h)
                .expect("every task belongs to a group");
            outputs.push(self.head(b, k, h)?);
        }
        Ok(PlanForward { outputs, blocks })
    }

    /// Runs every task under relaxed policy weights `weights[l][k]`
    /// (`None` = weight 1), gates open. Tasks share a block computation
    /// while their paths so far are identical and unweighted.
    pub fn forward_relaxed<'g>(
        &self,
        b: &Bound<'g, S>,
        x: Var<'g, S>,
        weights: &[Vec<Option<Var<'g, S>>>],
    ) -> Result<Vec<Var<'g, S>>> {
        let (l_count, k_count) = (self.spec.num_blocks(), self.spec.num_tasks());
        if weights.len() != l_count || weights.iter().any(|r| r.len() != k_count) {
            return Err(Error::Model(format!("relaxed weights must be [{l_count}][{k_count}]")));
        }
        let mut groups: Vec<(Vec<usize>, Var<'g, S>)> = vec![((0..k_count).collect(), self.stem(b, x)?)];
        for (l, row) in weights.iter().enumerate() {
            let mut next = Vec::with_capacity(groups.len());
            for (tasks, h) in groups {
                let (plain, weighted): (Vec<usize>, Vec<usize>) = tasks.into_iter().partition(|&k| row[k].is_none());
                if !plain.is_empty() {
                    next.push((plain, self.block_forward_relaxed(b, l, h, None)?));
                }
                for k in weighted {
                    next.push((vec![k], self.block_forward_relaxed(b, l, h, row[k])?));
                }
            }
            next.sort_by_key(|(t, _)| t[0]);
            groups = next;
        }
        let mut outputs = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let h = groups
                .iter()
                .find(|(t, _)| t.contains(&k))
                .map(|(_, h)| *h)
                .expect("every task belongs to a group");
            outputs.push(self.head(b, k, h)?);
        }
        Ok(outputs)
    }

    pub fn save_json(&self, plan: Option<&ExecutionPlan>, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            spec: self.spec.clone(),
            plan: plan.cloned(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<(Self, Option<ExecutionPlan>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile<S> = serde_json::from_str(&text)?;
        file.into_model()
    }
}

pub const MODEL_FORMAT: &str = "mtgate-model/1";

/// On-disk model: spec, optional plan, and named parameters in bit-exact hex.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct ModelFile<S: Scalar> {
    pub format: String,
    pub spec: BackboneSpec,
    pub plan: Option<ExecutionPlan>,
    pub params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelFile<S> {
    pub fn into_model(self) -> Result<(GatedBackbone<S>, Option<ExecutionPlan>)> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unsupported model format {:?}", self.format)));
        }
        self.spec.validate()?;
        let reference = GatedBackbone::<S>::new(self.spec.clone(), 0)?;
        for (name, t) in reference.params() {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Model(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Model(format!("missing parameter {name}"))),
            }
        }
        if self.params.len() != reference.params().len() {
            return Err(Error::Model("model file has unexpected parameters".into()));
        }
        if let Some(plan) = &self.plan {
            plan.validate(&self.spec)?;
        }
        Ok((
            GatedBackbone {
                spec: self.spec,
                params: self.params,
            },
            self.plan,
        ))
    }
}

/// Parameter and expected-FLOP count of a deployed model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Trainable scalars of the network, gating units included.
    pub params: usize,
    pub gate_params: usize,
    /// Expected floating-point operations per input instance.
    pub expected_flops: f64,
}

/// FLOPs of a dense layer: one multiply-accumulate (2 FLOPs) per weight.
pub fn linear_flops(d_in: usize, d_out: usize) -> f64 {
    2.0 * (d_in * d_out) as f64
}

fn linear_params(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Counts parameters and expected FLOPs for `plan` given per-block gate
/// execute rates `gate_rates` (ignored on ungated blocks).
///
/// Tasks whose paths agree on every earlier block see identical block inputs,
/// so such a group computes a shared block once. A block therefore costs
/// once per distinct path prefix among the tasks that execute it. A gated
/// block adds its gating unit's cost whenever evaluated and its transform
/// cost scaled by the execute rate.
pub fn count_cost(spec: &BackboneSpec, plan: &ExecutionPlan, gate_rates: &[f64]) -> CostEstimate {
    let (w, gh) = (spec.width, spec.gate_hidden_width());
    let mut params = linear_params(spec.input_dim, w);
    let mut gate_params = 0;
    let mut flops = linear_flops(spec.input_dim, w);

    let gate_flops = linear_flops(w, gh) + linear_flops(gh, 2);
    for (l, &h) in spec.hidden.iter().enumerate() {
        params += linear_params(w, h) + linear_params(h, w);
        if spec.gate_enable[l] {
            gate_params += linear_params(w, gh) + linear_params(gh, 2);
        }
        let mut prefixes: Vec<&[bool]> = Vec::new();
        let paths: Vec<Vec<bool>> = (0..spec.num_tasks()).map(|k| plan.task_path(k)).collect();
        for path in &paths {
            if path[l] && !prefixes.contains(&&path[..l]) {
                prefixes.push(&path[..l]);
            }
        }
        let block = linear_flops(w, h) + linear_flops(h, w);
        let per_eval = if spec.gate_enable[l] {
            gate_flops + block * gate_rates.get(l).copied().unwrap_or(1.0)
        } else {
            block
        };
        flops += prefixes.len() as f64 * per_eval;
    }
    for t in &spec.tasks {
        let out = t.kind.output_dim();
        params += linear_params(w, out);
        flops += linear_flops(w, out);
    }
    CostEstimate {
        params: params + gate_params,
        gate_params,
        expected_flops: flops,
    }
}

/// Output dimension and kind of each head, in task order.
pub fn head_kinds(spec: &BackboneSpec) -> Vec<TaskKind> {
    spec.tasks.iter().map(|t| t.kind).collect()
}
