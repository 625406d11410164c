//! End-to-end runs: single-task references, policy training, retraining at
//! one or more target rates, evaluation and artifact emission.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{count_cost, BackboneSpec, ExecutionPlan, GateMode, GatedBackbone};
use crate::config::{Ablation, DatasetConfig, ExperimentConfig};
use crate::data::{generate, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{cost_report, save_cost_csv, CostInput, CostRow, MetricValue, SingleTaskReference};
use crate::policy::PolicyDistribution;
use crate::scalar::Scalar;
use crate::trainer::{
    self, delta_against, evaluate, sample_plans, select_best_of, train_plain, write_log_csv, Candidate, Context,
    EpochLog, Evaluation, RetrainOptions, RetrainOutcome, TrainState,
};

pub const SUMMARY_FORMAT: &str = "mtgate-summary/1";

/// Files every completed run directory contains.
pub const RUN_ARTIFACTS: [&str; 6] = [
    "summary.json",
    "metrics.csv",
    "policy.csv",
    "gate_rates.csv",
    "cost.csv",
    "plotdata.csv",
];

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => generate(spec, cfg.seed)?,
        DatasetConfig::Csv { path } => Dataset::load_csv(path)?,
    };
    data.validate()?;
    cfg.losses.validate(data.tasks.len())?;
    Ok(data)
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<BackboneSpec> {
    cfg.backbone.build(data.dim(), data.tasks.clone())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains one ungated backbone per task and records its validation metrics.
pub fn run_single_task<S: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<SingleTaskReference> {
    let mut reference = SingleTaskReference::default();
    for (k, task) in data.tasks.iter().enumerate() {
        let sub = data.select_tasks(&[k])?;
        let spec = model_spec(cfg, &sub)?.without_gates();
        let weights = crate::losses::LossWeights {
            task: vec![cfg.losses.task_weight(k)],
            ..cfg.losses.clone()
        };
        let ctx = Context::new(&cfg.train, &weights, &sub, cfg.seed)?;
        let model = GatedBackbone::<S>::new(spec, cfg.seed)?;
        let (model, _) = train_plain(&ctx, model, cfg.train.baseline_epochs)?;
        let plan = ExecutionPlan::all_ones(model.spec().num_blocks(), 1);
        let ev = evaluate(&model, &plan, GateMode::Open, &sub.val, cfg.train.ratio_threshold, cfg.seed)?;
        log::info!("single-task {}: {:?}", task.name, ev.metrics[0]);
        reference.push(&task.name, &ev.metrics[0])?;
    }
    Ok(reference)
}

/// Per-task reference values aligned with the dataset's tasks.
pub fn reference_for(data: &Dataset, reference: &SingleTaskReference) -> Result<Vec<Vec<MetricValue>>> {
    data.tasks
        .iter()
        .map(|t| {
            let r = reference.for_task(&t.name);
            if r.is_empty() {
                Err(Error::MissingArtifacts(vec![format!("single-task reference for {}", t.name)]))
            } else {
                Ok(r)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub val_delta_per_task: Vec<f64>,
    pub val_delta: f64,
    pub val_metrics: Vec<Vec<MetricValue>>,
    pub params: usize,
    pub expected_flops: f64,
}

/// Hard parameter sharing (no policy, no gates) trained for `baseline_epochs`.
pub fn run_hard_sharing<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    reference: &SingleTaskReference,
) -> Result<(GatedBackbone<S>, BaselineSummary)> {
    let spec = model_spec(cfg, data)?.without_gates();
    let ctx = Context::new(&cfg.train, &cfg.losses, data, cfg.seed)?;
    let (model, _) = train_plain(&ctx, GatedBackbone::<S>::new(spec, cfg.seed)?, cfg.train.baseline_epochs)?;
    let plan = ExecutionPlan::all_ones(model.spec().num_blocks(), model.spec().num_tasks());
    let ev = evaluate(&model, &plan, GateMode::Open, &data.val, cfg.train.ratio_threshold, cfg.seed)?;
    let (per, overall) = delta_against(&ev.metrics, &reference_for(data, reference)?)?;
    let cost = count_cost(model.spec(), &plan, &[]);
    Ok((
        model,
        BaselineSummary {
            val_delta_per_task: per,
            val_delta: overall,
            val_metrics: ev.metrics,
            params: cost.params,
            expected_flops: cost.expected_flops,
        },
    ))
}

/// Result of the policy-learning stage.
pub struct PolicyStage<S: Scalar> {
    pub model: GatedBackbone<S>,
    pub policy: PolicyDistribution<S>,
    pub log: Vec<EpochLog>,
}

/// First algorithm (or plain training for the instance-only ablation).
/// Writes a checkpoint after every epoch when `out` is given.
pub fn run_policy_stage<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ablation: Ablation,
    out: Option<&Path>,
) -> Result<PolicyStage<S>> {
    let spec = model_spec(cfg, data)?;
    let ctx = Context::new(&cfg.train, &cfg.losses, data, cfg.seed)?;
    let model = GatedBackbone::<S>::new(spec, cfg.seed)?;
    if ablation == Ablation::InstanceOnly {
        let (model, log) = train_plain(&ctx, model, cfg.train.max_epochs)?;
        let policy = PolicyDistribution::new(model.spec());
        return Ok(PolicyStage { model, policy, log });
    }
    let ckpt = out.map(|d| d.join("train_state.json"));
    let mut st = match &ckpt {
        Some(p) if p.exists() => {
            let st = TrainState::<S>::load(p)?;
            if st.model.spec() != model.spec() {
                return Err(Error::Config(format!("{} belongs to a different model", p.display())));
            }
            log::info!("resuming from {} at epoch {}", p.display(), st.epoch);
            st
        }
        _ => TrainState::new(model, &cfg.train),
    };
    trainer::train(&ctx, &mut st, |s| match &ckpt {
        Some(p) => s.save(p),
        None => Ok(()),
    })?;
    Ok(PolicyStage {
        model: st.model,
        policy: st.policy,
        log: st.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub target_rate: f64,
    pub gating: bool,
    pub plan: ExecutionPlan,
    pub val_delta_per_task: Vec<f64>,
    pub val_delta: f64,
    pub test_delta_per_task: Vec<f64>,
    pub test_delta: f64,
    pub val_metrics: Vec<Vec<MetricValue>>,
    pub test_metrics: Vec<Vec<MetricValue>>,
    /// Hard execute rates on validation data in evaluation mode.
    pub eval_gate_rates: Vec<Option<f64>>,
    /// Hard execute rates over the last retraining epoch.
    pub train_gate_rates: Vec<Option<f64>>,
    pub params: usize,
    pub gate_params: usize,
    pub expected_flops: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub tasks: Vec<String>,
    /// Validation Δ of the first variant.
    pub delta: f64,
    pub variants: Vec<VariantSummary>,
}

fn eval_mode(cfg: &ExperimentConfig, gating: bool) -> GateMode {
    if gating {
        cfg.train.eval_gates.mode()
    } else {
        GateMode::Forced(true)
    }
}

fn variant_name(ablation: Ablation, t: f64) -> String {
    match ablation {
        Ablation::None => format!("t{t}"),
        a => format!("{}_t{t}", a.as_str()),
    }
}

/// Retrains sampled plans at the first target rate of `cfg`, keeps the best,
/// then retrains that one plan at the remaining rates so the variants differ
/// only in `t`. Writes per-variant models and predictions under `out`.
pub fn run_retrain_stage<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    reference: &SingleTaskReference,
    stage: &PolicyStage<S>,
    ablation: Ablation,
    out: Option<&Path>,
) -> Result<(Vec<VariantSummary>, Vec<RetrainOutcome<S>>)> {
    let ctx = Context::new(&cfg.train, &cfg.losses, data, cfg.seed)?;
    let refs = reference_for(data, reference)?;
    let gating = ablation != Ablation::TaskOnly;
    let spec = stage.model.spec();
    let mut plans = match ablation {
        Ablation::InstanceOnly => vec![ExecutionPlan::all_ones(spec.num_blocks(), spec.num_tasks())],
        _ => sample_plans(&stage.policy, cfg.train.num_sampled_plans, cfg.seed),
    };
    let mode = eval_mode(cfg, gating);
    let mut summaries = Vec::new();
    let mut outcomes = Vec::new();
    for (i, &t) in cfg.target_rates.iter().enumerate() {
        let opts = RetrainOptions {
            target_rate: t,
            gating,
            stream: i as u64 + 1,
        };
        let evaluator = |o: &RetrainOutcome<S>| -> Result<(f64, f64)> {
            let ev = evaluate(&o.model, &o.plan, mode, &data.val, cfg.train.ratio_threshold, cfg.seed)?;
            let (_, d) = delta_against(&ev.metrics, &refs)?;
            Ok((d, trainer::expected_flops(&o.model, &o.plan, &o.train_rates)))
        };
        let sel = select_best_of(&ctx, &stage.model, plans.clone(), opts, evaluator)?;
        plans = vec![sel.outcome.plan.clone()];
        let o = sel.outcome;
        let val = evaluate(&o.model, &o.plan, mode, &data.val, cfg.train.ratio_threshold, cfg.seed)?;
        let test = evaluate(&o.model, &o.plan, mode, &data.test, cfg.train.ratio_threshold, cfg.seed)?;
        let (vper, vd) = delta_against(&val.metrics, &refs)?;
        let (tper, td) = delta_against(&test.metrics, &refs)?;
        let cost = count_cost(spec, &o.plan, &cost_rates(&o.train_rates));
        let name = variant_name(ablation, t);
        log::info!("variant {name}: val Δ {vd:.3}, test Δ {td:.3}, flops {:.0}", cost.expected_flops);
        if let Some(dir) = out {
            o.model.save_json(Some(&o.plan), &dir.join(format!("model_{name}.json")))?;
            write_predictions(&val, &dir.join(format!("predictions_{name}.csv")))?;
        }
        summaries.push(VariantSummary {
            variant: name,
            target_rate: t,
            gating,
            plan: o.plan.clone(),
            val_delta_per_task: vper,
            val_delta: vd,
            test_delta_per_task: tper,
            test_delta: td,
            val_metrics: val.metrics,
            test_metrics: test.metrics,
            eval_gate_rates: val.gate_rates,
            train_gate_rates: o.train_rates.clone(),
            params: cost.params,
            gate_params: cost.gate_params,
            expected_flops: cost.expected_flops,
            candidates: sel.candidates,
        });
        outcomes.push(o);
    }
    Ok((summaries, outcomes))
}

/// Raw validation head outputs: one row per instance, columns `task{k}_o{j}`.
pub fn write_predictions(ev: &Evaluation, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    for (k, o) in ev.outputs.iter().enumerate() {
        header.extend((0..o.shape()[1]).map(|j| format!("task{k}_o{j}")));
    }
    w.write_record(&header)?;
    let n = ev.outputs.first().map(|o| o.shape()[0]).unwrap_or(0);
    for i in 0..n {
        let rec: Vec<String> = ev.outputs.iter().flat_map(|o| o.row(i).iter().map(|v| format!("{v:?}"))).collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a predictions file back into per-task `[n, out]` tensors.
pub fn read_predictions(path: &Path, out_dims: &[usize]) -> Result<Vec<crate::tensor::Tensor<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); out_dims.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut j = 0;
        for (k, &d) in out_dims.iter().enumerate() {
            for _ in 0..d {
                let v: f64 = rec.get(j).and_then(|s| s.parse().ok()).ok_or_else(|| Error::DataCell {
                    row: i + 1,
                    column: format!("column {j}"),
                    msg: "bad prediction value".into(),
                })?;
                cols[k].push(v);
                j += 1;
            }
        }
    }
    cols.into_iter()
        .zip(out_dims)
        .map(|(c, &d)| Ok(crate::tensor::Tensor::new(vec![c.len() / d.max(1), d], c)?))
        .collect()
}

fn write_gate_rates(variants: &[VariantSummary], gate_enable: &[bool], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "target_rate", "block", "gated", "train_rate", "eval_rate"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for v in variants {
        for (l, &gated) in gate_enable.iter().enumerate() {
            w.write_record([
                v.variant.clone(),
                v.target_rate.to_string(),
                l.to_string(),
                gated.to_string(),
                opt(v.train_gate_rates.get(l).copied().flatten()),
                opt(v.eval_gate_rates.get(l).copied().flatten()),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_plotdata(variants: &[VariantSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "target_rate", "val_delta", "test_delta", "expected_flops", "mean_eval_gate_rate"])?;
    for v in variants {
        let rates: Vec<f64> = v.eval_gate_rates.iter().flatten().copied().collect();
        let mean = if rates.is_empty() {
            String::new()
        } else {
            (rates.iter().sum::<f64>() / rates.len() as f64).to_string()
        };
        w.write_record([
            v.variant.clone(),
            v.target_rate.to_string(),
            v.val_delta.to_string(),
            v.test_delta.to_string(),
            v.expected_flops.to_string(),
            mean,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// Training hard rates, not thresholded eval rates: a gate whose probability
// is nearly constant across instances thresholds to all-or-nothing.
fn cost_rates(train_rates: &[Option<f64>]) -> Vec<f64> {
    train_rates.iter().map(|r| r.unwrap_or(1.0)).collect()
}

/// Cost rows of finished variants.
pub fn variant_costs(spec: &BackboneSpec, variants: &[VariantSummary]) -> Vec<CostRow> {
    let rates: Vec<Vec<f64>> = variants.iter().map(|v| cost_rates(&v.train_gate_rates)).collect();
    let inputs: Vec<CostInput<'_>> = variants
        .iter()
        .zip(&rates)
        .map(|(v, r)| CostInput {
            variant: v.variant.clone(),
            target_rate: v.target_rate,
            plan: &v.plan,
            gate_rates: r,
            delta: Some(v.val_delta),
        })
        .collect();
    cost_report(spec, &inputs)
}

/// Full run: policy stage, retraining at each target rate, artifacts in `out`.
pub fn run_pipeline<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    reference: &SingleTaskReference,
    out: &Path,
) -> Result<Summary> {
    cfg.validate()?;
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    reference.save_csv(&out.join("reference.csv"))?;
    let spec = model_spec(cfg, data)?;
    let tasks: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();

    let stage = run_policy_stage::<S>(cfg, data, cfg.ablation, Some(out))?;
    write(&out.join("policy.csv"), &stage.policy.alpha_csv(&tasks))?;
    write_log_csv(&stage.log, spec.num_tasks(), spec.num_blocks(), &out.join("metrics.csv"))?;

    let (variants, outcomes) = run_retrain_stage(cfg, data, reference, &stage, cfg.ablation, Some(out))?;
    let plans: Vec<ExecutionPlan> = variants.iter().flat_map(|v| v.candidates.iter().map(|c| c.plan.clone())).collect();
    stage.policy.export(&plans).save(&out.join("policy.json"))?;

    let mut log = stage.log.clone();
    for o in &outcomes {
        log.extend(o.log.iter().cloned());
    }
    write_log_csv(&log, spec.num_tasks(), spec.num_blocks(), &out.join("metrics.csv"))?;
    write_gate_rates(&variants, &spec.gate_enable, &out.join("gate_rates.csv"))?;
    save_cost_csv(&variant_costs(&spec, &variants), &out.join("cost.csv"))?;
    write_plotdata(&variants, &out.join("plotdata.csv"))?;

    let summary = Summary {
        format: SUMMARY_FORMAT.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        ablation: cfg.ablation,
        tasks,
        delta: variants[0].val_delta,
        variants,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub target_rate: Option<f64>,
    pub val_delta: f64,
    pub test_delta: Option<f64>,
    pub params: usize,
    pub expected_flops: f64,
}

/// Hard sharing, task-policy-only, instance-only and full runs on one seed.
/// The full and task-only variants share one policy stage.
pub fn run_ablation<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    reference: &SingleTaskReference,
    include_instance_only: bool,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let (_, hs) = run_hard_sharing::<S>(cfg, data, reference)?;
    let mut rows = vec![AblationRow {
        method: "hard_sharing".into(),
        target_rate: None,
        val_delta: hs.val_delta,
        test_delta: None,
        params: hs.params,
        expected_flops: hs.expected_flops,
    }];
    let stage = run_policy_stage::<S>(cfg, data, Ablation::None, None)?;
    let mut runs = vec![(Ablation::TaskOnly, &stage), (Ablation::None, &stage)];
    let inst;
    if include_instance_only {
        inst = run_policy_stage::<S>(cfg, data, Ablation::InstanceOnly, None)?;
        runs.push((Ablation::InstanceOnly, &inst));
    }
    for (ablation, st) in runs {
        let sub = out.map(|d| d.join(ablation.as_str()));
        if let Some(d) = &sub {
            create_dir(d)?;
        }
        let (variants, _) = run_retrain_stage(cfg, data, reference, st, ablation, sub.as_deref())?;
        for v in variants {
            rows.push(AblationRow {
                method: match ablation {
                    Ablation::None => "full".into(),
                    a => a.as_str().into(),
                },
                target_rate: Some(v.target_rate),
                val_delta: v.val_delta,
                test_delta: Some(v.test_delta),
                params: v.params,
                expected_flops: v.expected_flops,
            });
        }
    }
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        w.write_record(["method", "target_rate", "val_delta", "test_delta", "params", "expected_flops"])?;
        for r in &rows {
            w.write_record([
                r.method.clone(),
                r.target_rate.map(|t| t.to_string()).unwrap_or_default(),
                r.val_delta.to_string(),
                r.test_delta.map(|t| t.to_string()).unwrap_or_default(),
                r.params.to_string(),
                r.expected_flops.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(rows)
}

/// Consolidated report of a finished run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Summary,
    pub cost: Vec<CostRow>,
    pub generated_at: u64,
}

/// Joins a run's artifacts into `report.json` and `report.csv`.
pub fn report(dir: &Path) -> Result<Report> {
    let missing: Vec<String> = RUN_ARTIFACTS
        .iter()
        .filter(|f| !dir.join(f).exists())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let text = std::fs::read_to_string(dir.join("summary.json")).map_err(|e| Error::io(dir.join("summary.json"), e))?;
    let summary: Summary = serde_json::from_str(&text)?;
    let mut rd = csv::Reader::from_path(dir.join("cost.csv"))?;
    let mut cost = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Data(format!("cost.csv: bad number {:?}", &rec[i])))
        };
        cost.push(CostRow {
            variant: rec[0].to_string(),
            target_rate: num(1)?,
            params: num(2)? as usize,
            gate_params: num(3)? as usize,
            expected_flops: num(4)?,
            delta: if rec[5].is_empty() { None } else { Some(num(5)?) },
        });
    }
    let generated_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let rep = Report {
        summary,
        cost,
        generated_at,
    };
    write_json(&dir.join("report.json"), &rep)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(["config_hash", "seed", "variant", "target_rate", "val_delta", "test_delta", "params", "expected_flops"])?;
    for v in &rep.summary.variants {
        w.write_record([
            rep.summary.config_hash.clone(),
            rep.summary.seed.to_string(),
            v.variant.clone(),
            v.target_rate.to_string(),
            v.val_delta.to_string(),
            v.test_delta.to_string(),
            v.params.to_string(),
            v.expected_flops.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(rep)
}

/// Default location of the single-task reference inside an output directory.
pub fn reference_path(out: &Path) -> PathBuf {
    out.join("reference.csv")
}
