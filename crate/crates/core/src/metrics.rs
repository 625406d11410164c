//! Per-task metrics, the Δ multi-task improvement and cost reports.
//!
//! ```text
//! Δ_k = 100/|M| · Σ_j (−1)^{l_j} (M_j − M_ST,j) / M_ST,j      l_j = 1 iff lower is better
//! Δ   = mean_k Δ_k
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{count_cost, BackboneSpec, ExecutionPlan};
use crate::error::{Error, Result};
use crate::task::TaskKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher_better",
            Direction::LowerBetter => "lower_better",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "higher_better" => Some(Direction::HigherBetter),
            "lower_better" => Some(Direction::LowerBetter),
            _ => None,
        }
    }

    fn sign(&self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub direction: Direction,
}

impl MetricSpec {
    pub fn new(name: &str, direction: Direction) -> Self {
        Self {
            name: name.into(),
            direction,
        }
    }
}

/// A metric value; `None` when undefined (e.g. AUC on single-class targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub spec: MetricSpec,
    pub value: Option<f64>,
}

impl MetricValue {
    pub fn new(name: &str, direction: Direction, value: f64) -> Self {
        Self {
            spec: MetricSpec::new(name, direction),
            value: Some(value),
        }
    }
}

/// Δ of one task against its single-task reference, in percent.
///
/// Metrics are matched by name. Undefined metrics on either side are
/// skipped with a warning.
pub fn delta_task(values: &[MetricValue], reference: &[MetricValue]) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for v in values {
        let r = reference
            .iter()
            .find(|r| r.spec.name == v.spec.name)
            .ok_or_else(|| Error::Metric(format!("no reference for metric {}", v.spec.name)))?;
        if r.spec.direction != v.spec.direction {
            return Err(Error::Metric(format!("direction mismatch for {}", v.spec.name)));
        }
        let (Some(m), Some(st)) = (v.value, r.value) else {
            log::warn!("metric {} undefined; excluded from delta", v.spec.name);
            continue;
        };
        if st == 0.0 || !st.is_finite() {
            return Err(Error::Metric(format!("reference of {} is {st}", v.spec.name)));
        }
        sum += v.spec.direction.sign() * (m - st) / st;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("no defined metrics to compare".into()));
    }
    Ok(100.0 * sum / used as f64)
}

/// Arithmetic mean of per-task Δ values.
pub fn delta_overall(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Metric("delta over zero tasks".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Area under the ROC curve through the Mann-Whitney rank statistic, with
/// average ranks for tied scores. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub const DEFAULT_RATIO_THRESHOLD: f64 = 1.25;

/// Metrics of one head on a split, from raw head outputs `[n, out]`.
///
/// Classification: accuracy, cross-entropy. Binary: AUC. Regression: MSE
/// and the fraction of predictions with `max(p/y, y/p) < threshold`
/// (non-positive pairs count as misses).
pub fn task_metrics(outputs: &Tensor<f64>, targets: &[f64], kind: TaskKind, threshold: f64) -> Result<Vec<MetricValue>> {
    let shape = outputs.shape();
    let n = targets.len();
    if shape.len() != 2 || shape[0] != n || shape[1] != kind.output_dim() || n == 0 {
        return Err(Error::Metric(format!(
            "outputs {shape:?} do not fit {n} targets of kind {kind}"
        )));
    }
    Ok(match kind {
        TaskKind::Classification { .. } => {
            let (mut correct, mut ce) = (0usize, 0.0);
            for (i, &y) in targets.iter().enumerate() {
                let row = outputs.row(i);
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                correct += (arg == y as usize) as usize;
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                ce += lse - row[y as usize];
            }
            vec![
                MetricValue::new("accuracy", Direction::HigherBetter, correct as f64 / n as f64),
                MetricValue::new("cross_entropy", Direction::LowerBetter, ce / n as f64),
            ]
        }
        TaskKind::Binary => vec![MetricValue {
            spec: MetricSpec::new("auc", Direction::HigherBetter),
            value: auc(outputs.data(), targets),
        }],
        TaskKind::Regression => {
            let p = outputs.data();
            let mse = p.iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
            let hits = p
                .iter()
                .zip(targets)
                .filter(|(&a, &b)| a > 0.0 && b > 0.0 && (a / b).max(b / a) < threshold)
                .count();
            vec![
                MetricValue::new("mse", Direction::LowerBetter, mse),
                MetricValue::new("ratio_within", Direction::HigherBetter, hits as f64 / n as f64),
            ]
        }
    })
}

/// One row of a single-task reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub task: String,
    pub metric: String,
    pub direction: Direction,
    pub value: f64,
}

/// Single-task reference values `M_ST` for every task and metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskReference {
    pub rows: Vec<ReferenceRow>,
}

impl SingleTaskReference {
    pub fn push(&mut self, task: &str, values: &[MetricValue]) -> Result<()> {
        for v in values {
            let value = v
                .value
                .ok_or_else(|| Error::Metric(format!("single-task {task} metric {} undefined", v.spec.name)))?;
            if !value.is_finite() {
                return Err(Error::Metric(format!("single-task {task} metric {} is {value}", v.spec.name)));
            }
            self.rows.push(ReferenceRow {
                task: task.into(),
                metric: v.spec.name.clone(),
                direction: v.spec.direction,
                value,
            });
        }
        Ok(())
    }

    pub fn for_task(&self, task: &str) -> Vec<MetricValue> {
        self.rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| MetricValue::new(&r.metric, r.direction, r.value))
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task", "metric", "direction", "value"])?;
        for r in &self.rows {
            w.write_record([&r.task, &r.metric, r.direction.as_str(), &format!("{:?}", r.value)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["task", "metric", "direction", "value"] {
            return Err(Error::DataCell {
                row: 0,
                column: header.join(","),
                msg: "expected header task,metric,direction,value".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let cell_err = |column: &str, msg: String| Error::DataCell {
                row: i + 1,
                column: column.into(),
                msg,
            };
            let direction = Direction::parse(&rec[2]).ok_or_else(|| cell_err("direction", format!("unknown direction {:?}", &rec[2])))?;
            let value: f64 = rec[3]
                .parse()
                .map_err(|_| cell_err("value", format!("non-numeric value {:?}", &rec[3])))?;
            if !value.is_finite() {
                return Err(cell_err("value", format!("value {value} is not finite")));
            }
            rows.push(ReferenceRow {
                task: rec[0].into(),
                metric: rec[1].into(),
                direction,
                value,
            });
        }
        Ok(Self { rows })
    }
}

/// One variant of a cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: String,
    pub target_rate: f64,
    pub params: usize,
    pub gate_params: usize,
    pub expected_flops: f64,
    pub delta: Option<f64>,
}

/// Input of one cost-report row.
pub struct CostInput<'a> {
    pub variant: String,
    pub target_rate: f64,
    pub plan: &'a ExecutionPlan,
    /// Measured per-block hard execute rates.
    pub gate_rates: &'a [f64],
    pub delta: Option<f64>,
}

pub fn cost_report(spec: &BackboneSpec, inputs: &[CostInput<'_>]) -> Vec<CostRow> {
    inputs
        .iter()
        .map(|c| {
            let est = count_cost(spec, c.plan, c.gate_rates);
            CostRow {
                variant: c.variant.clone(),
                target_rate: c.target_rate,
                params: est.params,
                gate_params: est.gate_params,
                expected_flops: est.expected_flops,
                delta: c.delta,
            }
        })
        .collect()
}

pub fn save_cost_csv(rows: &[CostRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "target_rate", "params", "gate_params", "expected_flops", "delta"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.target_rate.to_string(),
            r.params.to_string(),
            r.gate_params.to_string(),
            r.expected_flops.to_string(),
            r.delta.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
