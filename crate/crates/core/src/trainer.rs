//! Training loops: warm-up and alternating network/policy optimization,
//! plan-fixed retraining with instance gating, and best-of-N plan selection.
//!
//! Every epoch draws its shuffling and Gumbel noise from an RNG derived from
//! `(seed, stage, epoch)`, so a run resumed from a checkpoint replays the
//! same trajectory bit for bit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{count_cost, head_kinds, param_group, ExecutionPlan, GateMode, GatedBackbone, ParamGroup};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gumbel::{DecayTrigger, SeededRng, TemperatureSchedule};
use crate::losses::{
    instance_loss, sharing_loss, sparsity_loss, task_loss, total_loss, AuxTerms, LossBreakdown, LossWeights, Phase,
};
use crate::metrics::{delta_overall, delta_task, task_metrics, MetricValue, DEFAULT_RATIO_THRESHOLD};
use crate::optim::{step_lr, Optimizer, OptimizerKind};
use crate::policy::{default_cadence, PolicyDistribution};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TAG_ALG1: u64 = 0xa161;
const TAG_RETRAIN: u64 = 0x7e7a;
const TAG_GATES: u64 = 0x6a7e;
const TAG_PLANS: u64 = 0x91a5;
const TAG_EVAL: u64 = 0xe7a1;

/// How instance gates decide at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalGates {
    /// Execute iff the gate's execute probability exceeds 0.5.
    Threshold,
    /// Seeded stochastic hard sample.
    Sample,
}

impl EvalGates {
    pub fn mode(&self) -> GateMode {
        match self {
            EvalGates::Threshold => GateMode::Threshold,
            EvalGates::Sample => GateMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warm_up_epochs: usize,
    /// `e1`: network-weight epochs per alternation.
    pub network_epochs: usize,
    /// `e2`: policy epochs per alternation.
    pub policy_epochs: usize,
    /// Total epochs of the first algorithm, warm-up included.
    pub max_epochs: usize,
    pub retrain_epochs: usize,
    /// Epochs of single-task and hard-sharing baselines.
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub lr_network: f64,
    pub lr_policy: f64,
    pub lr_gate: f64,
    /// Learning rates halve every `lr_period` epochs.
    pub lr_period: usize,
    pub momentum: f64,
    pub temperature: TemperatureSchedule,
    /// Policy epochs per curriculum step; derived from the schedule when absent.
    pub curriculum_cadence: Option<usize>,
    /// Gumbel temperature of the gates while retraining.
    pub retrain_tau: f64,
    pub num_sampled_plans: usize,
    /// Train network epochs on sampled hard paths instead of relaxed weights.
    pub hard_paths_in_network_epochs: bool,
    pub eval_gates: EvalGates,
    /// Threshold of the regression ratio metric.
    pub ratio_threshold: f64,
    /// Parallel retrains in plan selection and sweeps.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warm_up_epochs: 10,
            network_epochs: 1,
            policy_epochs: 1,
            max_epochs: 30,
            retrain_epochs: 20,
            baseline_epochs: 30,
            batch_size: 64,
            lr_network: 0.01,
            lr_policy: 0.01,
            lr_gate: 0.01,
            lr_period: 1000,
            momentum: 0.9,
            temperature: TemperatureSchedule::default(),
            curriculum_cadence: None,
            retrain_tau: 1.0,
            num_sampled_plans: 8,
            hard_paths_in_network_epochs: false,
            eval_gates: EvalGates::Threshold,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(format!("train: {m}")));
        for (name, v) in [
            ("network_epochs", self.network_epochs),
            ("policy_epochs", self.policy_epochs),
            ("max_epochs", self.max_epochs),
            ("retrain_epochs", self.retrain_epochs),
            ("baseline_epochs", self.baseline_epochs),
            ("batch_size", self.batch_size),
            ("lr_period", self.lr_period),
            ("num_sampled_plans", self.num_sampled_plans),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train: {name} must be >= 1")));
            }
        }
        if self.max_epochs < self.warm_up_epochs {
            return cfg("max_epochs must be >= warm_up_epochs");
        }
        for (name, v) in [
            ("lr_network", self.lr_network),
            ("lr_policy", self.lr_policy),
            ("lr_gate", self.lr_gate),
            ("retrain_tau", self.retrain_tau),
            ("ratio_threshold", self.ratio_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("train: {name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg("momentum must be in [0, 1)");
        }
        if self.curriculum_cadence == Some(0) {
            return cfg("curriculum_cadence must be >= 1");
        }
        self.temperature.validate().map_err(|m| Error::Config(format!("train.temperature: {m}")))
    }

    /// Phase of epoch `epoch` of the first algorithm.
    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.warm_up_epochs {
            return Phase::WarmUp;
        }
        let j = (epoch - self.warm_up_epochs) % (self.network_epochs + self.policy_epochs);
        if j < self.network_epochs {
            Phase::Network
        } else {
            Phase::Policy
        }
    }

    pub fn total_policy_epochs(&self) -> usize {
        (0..self.max_epochs).filter(|&e| self.phase_of(e) == Phase::Policy).count()
    }

    pub fn cadence(&self, learnable_blocks: usize) -> usize {
        self.curriculum_cadence
            .unwrap_or_else(|| default_cadence(self.total_policy_epochs(), learnable_blocks))
    }
}

/// Per-epoch record written to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub phase: Phase,
    pub tau: f64,
    pub lr: f64,
    /// Instance-weighted means over the epoch's batches.
    pub loss: LossBreakdown,
    pub frontier: usize,
    /// Validation Δ against the warm-up baseline, when evaluated.
    pub val_delta: Option<f64>,
    /// Per-block hard execute rates over the epoch (gated blocks only).
    pub beta: Vec<Option<f64>>,
}

pub fn write_log_csv(logs: &[EpochLog], num_tasks: usize, num_blocks: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["stage", "epoch", "phase", "tau", "lr"].iter().map(|s| s.to_string()).collect();
    header.extend((0..num_tasks).map(|k| format!("loss_task{k}")));
    header.extend(["loss_sparsity", "loss_sharing", "loss_instance", "loss_total", "frontier", "val_delta"].map(String::from));
    header.extend((0..num_blocks).map(|l| format!("beta{l}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in logs {
        let mut rec = vec![
            e.stage.clone(),
            e.epoch.to_string(),
            e.phase.as_str().to_string(),
            e.tau.to_string(),
            e.lr.to_string(),
        ];
        rec.extend((0..num_tasks).map(|k| opt(e.loss.task.get(k).copied())));
        rec.extend([e.loss.sparsity, e.loss.sharing, e.loss.instance, e.loss.total].map(|v| v.to_string()));
        rec.push(e.frontier.to_string());
        rec.push(opt(e.val_delta));
        rec.extend((0..num_blocks).map(|l| opt(e.beta.get(l).copied().flatten())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Default)]
struct Acc {
    n: f64,
    br: LossBreakdown,
    rate_sum: Vec<f64>,
    rate_n: Vec<f64>,
}

impl Acc {
    fn add(&mut self, br: &LossBreakdown, n: usize) {
        let n = n as f64;
        if self.br.task.len() < br.task.len() {
            self.br.task.resize(br.task.len(), 0.0);
        }
        for (a, b) in self.br.task.iter_mut().zip(&br.task) {
            *a += b * n;
        }
        self.br.sparsity += br.sparsity * n;
        self.br.sharing += br.sharing * n;
        self.br.instance += br.instance * n;
        self.br.total += br.total * n;
        self.n += n;
    }

    fn add_rate(&mut self, l: usize, rate: f64, n: usize) {
        if self.rate_sum.len() <= l {
            self.rate_sum.resize(l + 1, 0.0);
            self.rate_n.resize(l + 1, 0.0);
        }
        self.rate_sum[l] += rate * n as f64;
        self.rate_n[l] += n as f64;
    }

    fn mean(&self) -> LossBreakdown {
        let d = self.n.max(1.0);
        LossBreakdown {
            task: self.br.task.iter().map(|v| v / d).collect(),
            sparsity: self.br.sparsity / d,
            sharing: self.br.sharing / d,
            instance: self.br.instance / d,
            total: self.br.total / d,
        }
    }

    fn rates(&self, blocks: usize) -> Vec<Option<f64>> {
        (0..blocks)
            .map(|l| match self.rate_n.get(l) {
                Some(&n) if n > 0.0 => Some(self.rate_sum[l] / n),
                _ => None,
            })
            .collect()
    }
}

fn guard(total: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{stage} epoch {epoch} batch {batch}: total loss is {total}"
        )))
    }
}

/// A finite loss can still hide a non-finite gradient (relu maps NaN to 0),
/// so gradients are checked before they reach the weights.
fn guard_grad<S: Scalar>(name: &str, grad: &Tensor<S>, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if grad.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{stage} epoch {epoch} batch {batch}: non-finite gradient for {name}"
        )))
    }
}

fn shuffled(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

pub const CHECKPOINT_FORMAT: &str = "mtgate-checkpoint/1";

/// Complete state of the first algorithm at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", deny_unknown_fields)]
pub struct TrainState<S: Scalar> {
    pub format: String,
    pub model: GatedBackbone<S>,
    pub policy: PolicyDistribution<S>,
    pub net_opt: Optimizer<S>,
    pub policy_opt: Optimizer<S>,
    /// Next epoch to run.
    pub epoch: usize,
    pub policy_epoch: usize,
    pub schedule: TemperatureSchedule,
    /// Validation metrics of the hard-sharing network at the end of warm-up.
    pub baseline: Option<Vec<Vec<MetricValue>>>,
    pub log: Vec<EpochLog>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: GatedBackbone<S>, cfg: &TrainConfig) -> Self {
        let mut schedule = cfg.temperature.clone();
        schedule.reset();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            policy: PolicyDistribution::new(model.spec()),
            model,
            net_opt: Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum }),
            policy_opt: Optimizer::new(OptimizerKind::adam()),
            epoch: 0,
            policy_epoch: 0,
            schedule,
            baseline: None,
            log: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let st: Self = serde_json::from_str(&text)?;
        if st.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", st.format)));
        }
        st.model.spec().validate()?;
        Ok(st)
    }
}

/// Shared inputs of a training run.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub cfg: &'a TrainConfig,
    pub weights: &'a LossWeights,
    pub data: &'a Dataset,
    pub seed: u64,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a TrainConfig, weights: &'a LossWeights, data: &'a Dataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate(data.tasks.len())?;
        Ok(Self { cfg, weights, data, seed })
    }
}

fn check_model<S: Scalar>(model: &GatedBackbone<S>, data: &Dataset) -> Result<()> {
    let spec = model.spec();
    if spec.input_dim != data.dim() {
        return Err(Error::Config(format!(
            "model input_dim {} but data has {} features",
            spec.input_dim,
            data.dim()
        )));
    }
    if spec.tasks.iter().map(|t| t.kind).collect::<Vec<_>>() != data.tasks.iter().map(|t| t.kind).collect::<Vec<_>>() {
        return Err(Error::Config("model heads do not match the data's tasks".into()));
    }
    Ok(())
}

/// One epoch of the first algorithm in `phase` (warm-up, network or policy).
fn alg1_epoch<S: Scalar>(st: &mut TrainState<S>, ctx: &Context<'_>, phase: Phase, stage: &str) -> Result<EpochLog> {
    let cfg = ctx.cfg;
    let epoch = st.epoch;
    let mut rng = SeededRng::derive(ctx.seed, &[TAG_ALG1, epoch as u64]);
    let order = shuffled(ctx.data.train.len(), &mut rng);
    let lr_net = step_lr(cfg.lr_network, epoch, cfg.lr_period);
    let lr_pol = step_lr(cfg.lr_policy, epoch, cfg.lr_period);
    let tau = st.schedule.tau();
    let kinds = head_kinds(st.model.spec());
    let (l_count, k_count) = (st.model.spec().num_blocks(), st.model.spec().num_tasks());
    let all_ones = ExecutionPlan::all_ones(l_count, k_count);
    let mask = st.policy.learnable_mask();
    let mut acc = Acc::default();

    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        let g = Graph::<S>::new();
        let (xb, yb) = ctx.data.train.batch::<S>(batch)?;
        let x = g.constant(xb);
        let train_net = phase != Phase::Policy;
        let b = st.model.bind(&g, |grp| train_net && grp == ParamGroup::Network);
        let mut aux = AuxTerms::default();
        let mut policy_leaf = None;
        let outputs = match phase {
            Phase::WarmUp => st.model.forward_plan(&b, x, &all_ones, GateMode::Open, &mut rng)?.outputs,
            Phase::Network if cfg.hard_paths_in_network_epochs => {
                let plan = st.policy.sample_plan(&mut rng);
                st.model.forward_plan(&b, x, &plan, GateMode::Open, &mut rng)?.outputs
            }
            Phase::Network | Phase::Policy => {
                let rp = st.policy.relaxed_weights(&g, tau, &mut rng, phase == Phase::Policy)?;
                if phase == Phase::Policy {
                    match rp.logits {
                        Some(lg) => {
                            let alpha = st.policy.alpha_var(lg)?;
                            aux.sparsity = Some(sparsity_loss(alpha, &mask)?);
                            aux.sharing = Some(sharing_loss(alpha, &mask, ctx.weights.ordered_pairs)?);
                            policy_leaf = Some(lg);
                        }
                        None => {
                            aux.sparsity = Some(g.scalar_constant(S::zero()));
                            aux.sharing = Some(g.scalar_constant(S::zero()));
                        }
                    }
                }
                st.model.forward_relaxed(&b, x, &rp.weights)?
            }
            Phase::Retrain => return Err(Error::Model("retrain phase inside the first algorithm".into())),
        };
        let task_losses = outputs
            .iter()
            .enumerate()
            .map(|(k, o)| task_loss(*o, &yb[k], kinds[k]))
            .collect::<Result<Vec<_>>>()?;
        let (total, br) = total_loss(&g, &task_losses, &aux, ctx.weights, phase)?;
        guard(br.total, stage, epoch, bi)?;
        g.backward(total)?;
        if phase == Phase::Policy {
            if let Some(grad) = policy_leaf.and_then(|lg| lg.grad()) {
                guard_grad("policy.logits", &grad, stage, epoch, bi)?;
                let mut logits = st.policy.logits().clone();
                st.policy_opt.update("policy.logits", &mut logits, &grad, lr_pol)?;
                st.policy.set_logits(logits)?;
            }
        } else {
            for (name, grad) in b.grads() {
                guard_grad(&name, &grad, stage, epoch, bi)?;
                let p = st.model.param_mut(&name).expect("bound parameter exists");
                st.net_opt.update(&name, p, &grad, lr_net)?;
            }
        }
        acc.add(&br, batch.len());
    }
    Ok(EpochLog {
        stage: stage.into(),
        epoch,
        phase,
        tau,
        lr: if phase == Phase::Policy { lr_pol } else { lr_net },
        loss: acc.mean(),
        frontier: st.policy.frontier(),
        val_delta: None,
        beta: vec![None; l_count],
    })
}

/// Hard parameter sharing: every task runs every block, gates untouched.
/// This is also exactly the warm-up of [`train`].
pub fn train_plain<S: Scalar>(ctx: &Context<'_>, model: GatedBackbone<S>, epochs: usize) -> Result<(GatedBackbone<S>, Vec<EpochLog>)> {
    check_model(&model, ctx.data)?;
    let mut st = TrainState::new(model, ctx.cfg);
    for _ in 0..epochs {
        let log = alg1_epoch(&mut st, ctx, Phase::WarmUp, "plain")?;
        st.log.push(log);
        st.epoch += 1;
    }
    Ok((st.model, st.log))
}

/// Validation Δ of the current mode plan (gates open) against the warm-up baseline.
fn val_delta<S: Scalar>(st: &TrainState<S>, ctx: &Context<'_>) -> Result<f64> {
    let plan = st.policy.mode_plan();
    let ev = evaluate(&st.model, &plan, GateMode::Open, &ctx.data.val, ctx.cfg.ratio_threshold, ctx.seed)?;
    let base = st.baseline.as_ref().ok_or_else(|| Error::Model("no baseline recorded".into()))?;
    Ok(delta_against(&ev.metrics, base)?.1)
}

/// First algorithm: warm-up, then alternating network and policy epochs
/// until `max_epochs`. Resumes from `st.epoch`; `on_epoch` runs after every
/// epoch (e.g. to write a checkpoint).
pub fn train<S: Scalar>(
    ctx: &Context<'_>,
    st: &mut TrainState<S>,
    mut on_epoch: impl FnMut(&TrainState<S>) -> Result<()>,
) -> Result<()> {
    check_model(&st.model, ctx.data)?;
    let cfg = ctx.cfg;
    let cadence = cfg.cadence(st.policy.max_frontier());
    while st.epoch < cfg.max_epochs {
        let phase = cfg.phase_of(st.epoch);
        if phase != Phase::WarmUp && st.baseline.is_none() {
            let ev = evaluate(&st.model, &ExecutionPlan::all_ones(st.policy.num_blocks(), st.policy.num_tasks()), GateMode::Open, &ctx.data.val, cfg.ratio_threshold, ctx.seed)?;
            st.baseline = Some(ev.metrics);
        }
        if phase == Phase::Policy {
            st.policy.advance_curriculum(st.policy_epoch + 1, cadence);
        }
        let mut log = alg1_epoch(st, ctx, phase, "train")?;
        if phase == Phase::Policy {
            st.policy_epoch += 1;
        }
        if phase != Phase::WarmUp {
            let fired = match st.schedule.trigger {
                DecayTrigger::EveryEpoch => true,
                DecayTrigger::OnMetricMet => {
                    let d = val_delta(st, ctx)?;
                    log.val_delta = Some(d);
                    d >= 0.0
                }
            };
            st.schedule.step(fired);
        }
        st.log.push(log);
        st.epoch += 1;
        on_epoch(st)?;
    }
    Ok(())
}

/// Options of one plan-fixed retrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainOptions {
    pub target_rate: f64,
    /// Train instance gates; when false gated blocks always execute.
    pub gating: bool,
    /// Distinguishes the RNG streams of retrains sharing one seed.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RetrainOutcome<S: Scalar> {
    pub model: GatedBackbone<S>,
    pub plan: ExecutionPlan,
    pub target_rate: f64,
    pub gating: bool,
    pub log: Vec<EpochLog>,
    /// Per-block hard execute rates over the final epoch.
    pub train_rates: Vec<Option<f64>>,
}

/// Second algorithm: fixed `plan`, fresh gates, joint training of network
/// and gates on task losses plus the instance loss.
pub fn retrain<S: Scalar>(
    ctx: &Context<'_>,
    base: &GatedBackbone<S>,
    plan: &ExecutionPlan,
    opts: RetrainOptions,
) -> Result<RetrainOutcome<S>> {
    check_model(base, ctx.data)?;
    plan.validate(base.spec())?;
    crate::losses::validate_target_rate(opts.target_rate)?;
    let cfg = ctx.cfg;
    let weights = LossWeights {
        target_rate: opts.target_rate,
        ..ctx.weights.clone()
    };
    let mut model = base.clone();
    model.init_gates(SeededRng::derive(ctx.seed, &[TAG_GATES, opts.stream]).below(usize::MAX) as u64);
    let mut opt = Optimizer::<S>::new(OptimizerKind::Sgd { momentum: cfg.momentum });
    let gates = if opts.gating {
        GateMode::StraightThrough { tau: cfg.retrain_tau }
    } else {
        GateMode::Forced(true)
    };
    let kinds = head_kinds(model.spec());
    let l_count = model.spec().num_blocks();
    let mut log = Vec::with_capacity(cfg.retrain_epochs);
    let mut train_rates = vec![None; l_count];

    for epoch in 0..cfg.retrain_epochs {
        let mut rng = SeededRng::derive(ctx.seed, &[TAG_RETRAIN, opts.stream, epoch as u64]);
        let order = shuffled(ctx.data.train.len(), &mut rng);
        let lr_net = step_lr(cfg.lr_network, epoch, cfg.lr_period);
        let lr_gate = step_lr(cfg.lr_gate, epoch, cfg.lr_period);
        let mut acc = Acc::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let g = Graph::<S>::new();
            let (xb, yb) = ctx.data.train.batch::<S>(batch)?;
            let x = g.constant(xb);
            let b = model.bind(&g, |grp| grp == ParamGroup::Network || (opts.gating && grp == ParamGroup::Gate));
            let pf = model.forward_plan(&b, x, plan, gates, &mut rng)?;
            let task_losses = pf
                .outputs
                .iter()
                .enumerate()
                .map(|(k, o)| task_loss(*o, &yb[k], kinds[k]))
                .collect::<Result<Vec<_>>>()?;
            let mut aux = AuxTerms::default();
            if opts.gating {
                for l in 0..l_count {
                    if let Some(beta) = pf.beta(l)? {
                        let term = instance_loss(beta, opts.target_rate)?;
                        aux.instance = Some(match aux.instance {
                            Some(a) => a.add(term)?,
                            None => term,
                        });
                    }
                    if model.spec().gate_enable[l] {
                        if let Some(r) = pf.hard_rate(l) {
                            acc.add_rate(l, r, batch.len());
                        }
                    }
                }
            }
            let (total, br) = total_loss(&g, &task_losses, &aux, &weights, Phase::Retrain)?;
            guard(br.total, "retrain", epoch, bi)?;
            g.backward(total)?;
            for (name, grad) in b.grads() {
                guard_grad(&name, &grad, "retrain", epoch, bi)?;
                let lr = match param_group(&name) {
                    ParamGroup::Network => lr_net,
                    ParamGroup::Gate => lr_gate,
                };
                let p = model.param_mut(&name).expect("bound parameter exists");
                opt.update(&name, p, &grad, lr)?;
            }
            acc.add(&br, batch.len());
        }
        train_rates = acc.rates(l_count);
        log.push(EpochLog {
            stage: format!("retrain[{}]", opts.stream),
            epoch,
            phase: Phase::Retrain,
            tau: cfg.retrain_tau,
            lr: lr_net,
            loss: acc.mean(),
            frontier: 0,
            val_delta: None,
            beta: train_rates.clone(),
        });
    }
    Ok(RetrainOutcome {
        model,
        plan: plan.clone(),
        target_rate: opts.target_rate,
        gating: opts.gating,
        log,
        train_rates,
    })
}

/// Predictions and metrics of a model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `metrics[k]`: metric values of task `k`.
    pub metrics: Vec<Vec<MetricValue>>,
    /// Raw head outputs per task.
    pub outputs: Vec<Tensor<f64>>,
    /// Per-block hard execute rates of gated blocks that were evaluated.
    pub gate_rates: Vec<Option<f64>>,
}

const EVAL_CHUNK: usize = 1024;

pub fn evaluate<S: Scalar>(
    model: &GatedBackbone<S>,
    plan: &ExecutionPlan,
    gates: GateMode,
    split: &Split,
    ratio_threshold: f64,
    seed: u64,
) -> Result<Evaluation> {
    let spec = model.spec();
    let (l_count, k_count) = (spec.num_blocks(), spec.num_tasks());
    let kinds = head_kinds(spec);
    let mut rng = SeededRng::derive(seed, &[TAG_EVAL]);
    let mut outs: Vec<Vec<f64>> = vec![Vec::new(); k_count];
    let mut acc = Acc::default();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let g = Graph::<S>::new();
        let (xb, _) = split.batch::<S>(chunk)?;
        let b = model.bind(&g, |_| false);
        let pf = model.forward_plan(&b, g.constant(xb), plan, gates, &mut rng)?;
        for (k, o) in pf.outputs.iter().enumerate() {
            outs[k].extend(o.value().data().iter().map(|v| v.as_f64()));
        }
        for l in 0..l_count {
            if spec.gate_enable[l] && !matches!(gates, GateMode::Open | GateMode::Forced(_)) {
                if let Some(r) = pf.hard_rate(l) {
                    acc.add_rate(l, r, chunk.len());
                }
            }
        }
    }
    let mut outputs = Vec::with_capacity(k_count);
    let mut metrics = Vec::with_capacity(k_count);
    for (k, data) in outs.into_iter().enumerate() {
        let t = Tensor::new(vec![split.len(), kinds[k].output_dim()], data)?;
        metrics.push(task_metrics(&t, &split.labels[k], kinds[k], ratio_threshold)?);
        outputs.push(t);
    }
    Ok(Evaluation {
        metrics,
        outputs,
        gate_rates: acc.rates(l_count),
    })
}

/// Per-task Δ and overall Δ of `metrics` against `reference` (aligned by task).
pub fn delta_against(metrics: &[Vec<MetricValue>], reference: &[Vec<MetricValue>]) -> Result<(Vec<f64>, f64)> {
    if metrics.len() != reference.len() {
        return Err(Error::Metric(format!(
            "{} tasks evaluated but {} references",
            metrics.len(),
            reference.len()
        )));
    }
    let per: Vec<f64> = metrics
        .iter()
        .zip(reference)
        .map(|(m, r)| delta_task(m, r))
        .collect::<Result<_>>()?;
    let overall = delta_overall(&per)?;
    Ok((per, overall))
}

/// Expected FLOPs per instance of `plan` at measured gate rates.
pub fn expected_flops<S: Scalar>(model: &GatedBackbone<S>, plan: &ExecutionPlan, gate_rates: &[Option<f64>]) -> f64 {
    let rates: Vec<f64> = gate_rates.iter().map(|r| r.unwrap_or(1.0)).collect();
    count_cost(model.spec(), plan, &rates).expected_flops
}

/// Index of the highest `delta`; exact ties go to lower `flops`, then lower index.
pub fn pick_best(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(d, f)) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(j) => {
                let (bd, bf) = scores[j];
                if d > bd || (d == bd && f < bf) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// `n` plans sampled from the policy distribution.
pub fn sample_plans<S: Scalar>(policy: &PolicyDistribution<S>, n: usize, seed: u64) -> Vec<ExecutionPlan> {
    let mut rng = SeededRng::derive(seed, &[TAG_PLANS]);
    (0..n).map(|_| policy.sample_plan(&mut rng)).collect()
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn par_map<T: Send, R: Send>(workers: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return Ok(items.into_iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.into_par_iter().map(f).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub plan: ExecutionPlan,
    pub delta: f64,
    pub expected_flops: f64,
}

#[derive(Debug, Clone)]
pub struct Selection<S: Scalar> {
    pub best: usize,
    pub candidates: Vec<Candidate>,
    pub outcome: RetrainOutcome<S>,
}

/// Retrains every plan and keeps the best under `evaluator`, which returns
/// `(validation Δ, expected FLOPs)`.
pub fn select_best_of<S: Scalar>(
    ctx: &Context<'_>,
    base: &GatedBackbone<S>,
    plans: Vec<ExecutionPlan>,
    opts: RetrainOptions,
    evaluator: impl Fn(&RetrainOutcome<S>) -> Result<(f64, f64)> + Sync + Send,
) -> Result<Selection<S>> {
    if plans.is_empty() {
        return Err(Error::Config("no plans to select from".into()));
    }
    let jobs: Vec<(usize, ExecutionPlan)> = plans.into_iter().enumerate().collect();
    let results = par_map(ctx.cfg.workers, jobs, |(i, plan)| -> Result<(RetrainOutcome<S>, (f64, f64))> {
        let o = retrain(
            ctx,
            base,
            &plan,
            RetrainOptions {
                stream: opts.stream.wrapping_mul(1 << 16).wrapping_add(i as u64),
                ..opts
            },
        )?;
        let score = evaluator(&o)?;
        Ok((o, score))
    })?;
    let results: Vec<(RetrainOutcome<S>, (f64, f64))> = results.into_iter().collect::<Result<_>>()?;
    let scores: Vec<(f64, f64)> = results.iter().map(|(_, s)| *s).collect();
    let best = pick_best(&scores).expect("non-empty");
    let candidates = results
        .iter()
        .map(|(o, (d, f))| Candidate {
            plan: o.plan.clone(),
            delta: *d,
            expected_flops: *f,
        })
        .collect();
    let outcome = results.into_iter().nth(best).expect("index in range").0;
    Ok(Selection {
        best,
        candidates,
        outcome,
    })
}

/// Samples `num_sampled_plans` plans from `policy`, retrains each and keeps the best.
pub fn select_best<S: Scalar>(
    ctx: &Context<'_>,
    base: &GatedBackbone<S>,
    policy: &PolicyDistribution<S>,
    opts: RetrainOptions,
    evaluator: impl Fn(&RetrainOutcome<S>) -> Result<(f64, f64)> + Sync + Send,
) -> Result<Selection<S>> {
    let plans = sample_plans(policy, ctx.cfg.num_sampled_plans, ctx.seed);
    select_best_of(ctx, base, plans, opts, evaluator)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_alternate_after_warm_up() {
        let cfg = TrainConfig {
            warm_up_epochs: 2,
            network_epochs: 2,
            policy_epochs: 1,
            max_epochs: 8,
            ..TrainConfig::default()
        };
        let got: Vec<Phase> = (0..8).map(|e| cfg.phase_of(e)).collect();
        use Phase::*;
        assert_eq!(got, vec![WarmUp, WarmUp, Network, Network, Policy, Network, Network, Policy]);
        assert_eq!(cfg.total_policy_epochs(), 2);
    }

    #[test]
    fn pick_best_prefers_delta_then_flops() {
        assert_eq!(pick_best(&[(1.0, 5.0), (3.0, 9.0), (2.0, 1.0)]), Some(1));
        assert_eq!(pick_best(&[(3.0, 9.0), (3.0, 4.0)]), Some(1));
        assert_eq!(pick_best(&[(3.0, 4.0), (3.0, 4.0)]), Some(0));
        assert_eq!(pick_best(&[]), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_policy: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
