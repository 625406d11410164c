//! Seeded synthetic multi-task data ("nested-clusters") and the CSV format.
//!
//! Instances come from a two-level Gaussian mixture. Coarse cluster `c` sits
//! at `R·e_c`; inside it, fine sub-class `s` places its mass on the two
//! antipodal modes `±r·e_{C+s}`. A fine class is therefore "large |x| along
//! axis s", which no linear probe separates, while coarse clusters are
//! linearly separable. A fraction `h` of instances is easy: their fine
//! offset is inflated by `easy_scale`. Everything is finally rotated by a
//! random orthogonal matrix.
//!
//! Tasks: `task0` coarse class, `task1` fine class (coarse = fine / S), and
//! optionally `task2`, the distance to the coarse centre.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::SeededRng;
use crate::scalar::Scalar;
use crate::task::{TaskKind, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    pub coarse_classes: usize,
    pub fine_per_coarse: usize,
    /// Fraction of easy instances, in `[0, 1]`.
    pub heterogeneity: f64,
    pub coarse_radius: f64,
    pub fine_radius: f64,
    pub easy_scale: f64,
    pub noise: f64,
    /// Adds the distance-to-centre regression task.
    pub regression: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 1000,
            n_test: 1000,
            dim: 16,
            coarse_classes: 4,
            fine_per_coarse: 2,
            heterogeneity: 0.5,
            coarse_radius: 4.0,
            fine_radius: 1.5,
            easy_scale: 2.5,
            noise: 1.0,
            regression: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return cfg("every split needs at least one instance".into());
        }
        if self.coarse_classes < 2 || self.fine_per_coarse < 2 {
            return cfg("need at least 2 coarse classes and 2 fine classes per coarse class".into());
        }
        let need = self.coarse_classes + self.fine_per_coarse;
        if self.dim < need {
            return cfg(format!(
                "dim {} too small for {} coarse clusters with {} sub-clusters (need {need})",
                self.dim, self.coarse_classes, self.fine_per_coarse
            ));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return cfg(format!("heterogeneity {} outside [0, 1]", self.heterogeneity));
        }
        for (name, v) in [
            ("coarse_radius", self.coarse_radius),
            ("fine_radius", self.fine_radius),
            ("easy_scale", self.easy_scale),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return cfg(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn fine_classes(&self) -> usize {
        self.coarse_classes * self.fine_per_coarse
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut t = vec![
            TaskSpec {
                name: "task0".into(),
                kind: TaskKind::Classification {
                    classes: self.coarse_classes,
                },
            },
            TaskSpec {
                name: "task1".into(),
                kind: TaskKind::Classification {
                    classes: self.fine_classes(),
                },
            },
        ];
        if self.regression {
            t.push(TaskSpec {
                name: "task2".into(),
                kind: TaskKind::Regression,
            });
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

/// One split: features `[n, d]` and per-task label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor<f64>,
    /// `labels[k][i]`.
    pub labels: Vec<Vec<f64>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx` as a `[b, d]` tensor of scalar type `S` with their labels.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<Vec<f64>>)> {
        let x = self.x.select_rows(idx)?.cast();
        let y = self
            .labels
            .iter()
            .map(|col| idx.iter().map(|&i| col[i]).collect())
            .collect();
        Ok((x, y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSpec>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Random orthogonal `d × d` matrix (Gram-Schmidt on Gaussian columns).
fn random_rotation(rng: &mut SeededRng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn generate_split(spec: &SynthSpec, rot: &[Vec<f64>], n: usize, rng: &mut SeededRng) -> Result<Split> {
    let (d, s_per) = (spec.dim, spec.fine_per_coarse);
    let mut fine: Vec<usize> = (0..n).map(|i| i % spec.fine_classes()).collect();
    rng.shuffle(&mut fine);
    let n_easy = (spec.heterogeneity * n as f64).round() as usize;
    let mut easy: Vec<bool> = (0..n).map(|i| i < n_easy).collect();
    rng.shuffle(&mut easy);

    let mut x = Vec::with_capacity(n * d);
    let mut labels = vec![Vec::with_capacity(n); if spec.regression { 3 } else { 2 }];
    let mut raw = vec![0.0; d];
    for i in 0..n {
        let (c, s) = (fine[i] / s_per, fine[i] % s_per);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let r = if easy[i] { spec.fine_radius * spec.easy_scale } else { spec.fine_radius };
        for (j, v) in raw.iter_mut().enumerate() {
            *v = spec.noise * rng.normal();
            if j == c {
                *v += spec.coarse_radius;
            }
            if j == spec.coarse_classes + s {
                *v += sign * r;
            }
        }
        let dist = raw
            .iter()
            .enumerate()
            .map(|(j, v)| if j == c { v - spec.coarse_radius } else { *v })
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        x.extend(rot.iter().map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum::<f64>()));
        labels[0].push(c as f64);
        labels[1].push(fine[i] as f64);
        if spec.regression {
            labels[2].push(dist);
        }
    }
    Ok(Split {
        x: Tensor::new(vec![n, d], x)?,
        labels,
    })
}

/// Generates the nested-clusters benchmark; bitwise reproducible from `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::derive(seed, &[0xda7a]);
    let rot = random_rotation(&mut rng, spec.dim);
    let train = generate_split(spec, &rot, spec.n_train, &mut rng)?;
    let val = generate_split(spec, &rot, spec.n_val, &mut rng)?;
    let test = generate_split(spec, &rot, spec.n_test, &mut rng)?;
    Ok(Dataset {
        tasks: spec.tasks(),
        train,
        val,
        test,
    })
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for name in SplitName::ALL {
            let s = self.split(name);
            if s.dim() != d || s.labels.len() != self.tasks.len() {
                return Err(Error::Data(format!("split {} is inconsistent", name.as_str())));
            }
            for (k, col) in s.labels.iter().enumerate() {
                if col.len() != s.len() {
                    return Err(Error::Data(format!("split {} task {k}: label count", name.as_str())));
                }
                for (i, &y) in col.iter().enumerate() {
                    self.tasks[k]
                        .kind
                        .validate_label(y)
                        .map_err(|msg| Error::Data(format!("split {} row {i} task {k}: {msg}", name.as_str())))?;
                }
            }
        }
        Ok(())
    }

    /// The same instances restricted to the tasks in `tasks` (in that order).
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Dataset> {
        if let Some(&k) = tasks.iter().find(|&&k| k >= self.tasks.len()) {
            return Err(Error::Data(format!("task {k} out of range")));
        }
        let pick = |s: &Split| Split {
            x: s.x.clone(),
            labels: tasks.iter().map(|&k| s.labels[k].clone()).collect(),
        };
        Ok(Dataset {
            tasks: tasks.iter().map(|&k| self.tasks[k].clone()).collect(),
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        h.extend(self.tasks.iter().enumerate().map(|(k, t)| format!("task{k}:{}", t.kind)));
        h.push("split".into());
        h
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(self.header())?;
        for name in SplitName::ALL {
            let s = self.split(name);
            for i in 0..s.len() {
                let mut rec: Vec<String> = s.x.row(i).iter().map(|v| v.to_string()).collect();
                rec.extend(s.labels.iter().map(|col| col[i].to_string()));
                rec.push(name.as_str().into());
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let bad_header = |col: &str, msg: String| Error::DataCell {
            row: 0,
            column: col.to_string(),
            msg,
        };
        let split_col = header
            .iter()
            .position(|h| h == "split")
            .ok_or_else(|| bad_header("split", "missing required column \"split\"".into()))?;
        let mut d = 0;
        while d < header.len() && header[d] == format!("f{d}") {
            d += 1;
        }
        if d == 0 {
            return Err(bad_header(&header[0], "expected feature columns f0..f{d-1} first".into()));
        }
        let mut tasks = Vec::new();
        for (j, h) in header.iter().enumerate().skip(d) {
            if j == split_col {
                continue;
            }
            let k = tasks.len();
            let kind = h
                .strip_prefix(&format!("task{k}:"))
                .ok_or_else(|| bad_header(h, format!("expected task{k}:<kind>")))?
                .parse::<TaskKind>()
                .map_err(|m| bad_header(h, m))?;
            tasks.push((j, TaskSpec {
                name: format!("task{k}"),
                kind,
            }));
        }
        if tasks.is_empty() {
            return Err(bad_header("task0", "no task label columns".into()));
        }

        let mut parts: Vec<(Vec<f64>, Vec<Vec<f64>>)> = vec![(Vec::new(), vec![Vec::new(); tasks.len()]); 3];
        for (i, rec) in r.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::DataCell {
                    row,
                    column: String::new(),
                    msg: format!("{} fields, header has {}", rec.len(), header.len()),
                });
            }
            let cell = |j: usize| -> Result<f64> {
                rec[j].trim().parse::<f64>().map_err(|_| Error::DataCell {
                    row,
                    column: header[j].clone(),
                    msg: format!("non-numeric value {:?}", &rec[j]),
                })
            };
            let which = SplitName::parse(rec[split_col].trim()).ok_or_else(|| Error::DataCell {
                row,
                column: "split".into(),
                msg: format!("unknown split {:?}", &rec[split_col]),
            })? as usize;
            for j in 0..d {
                let v = cell(j)?;
                parts[which].0.push(v);
            }
            for (k, (j, t)) in tasks.iter().enumerate() {
                let y = cell(*j)?;
                t.kind.validate_label(y).map_err(|msg| Error::DataCell {
                    row,
                    column: header[*j].clone(),
                    msg,
                })?;
                parts[which].1[k].push(y);
            }
        }
        let mut splits = parts.into_iter().zip(SplitName::ALL).map(|((x, labels), name)| {
            let n = x.len() / d;
            if n == 0 {
                return Err(Error::Data(format!("split {} is empty", name.as_str())));
            }
            Ok(Split {
                x: Tensor::new(vec![n, d], x)?,
                labels,
            })
        });
        let train = splits.next().expect("three splits")?;
        let val = splits.next().expect("three splits")?;
        let test = splits.next().expect("three splits")?;
        Ok(Dataset {
            tasks: tasks.into_iter().map(|(_, t)| t).collect(),
            train,
            val,
            test,
        })
    }

    /// Writes the generator spec next to the data.
    pub fn save_spec(spec: &SynthSpec, seed: u64, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&serde_json::json!({ "spec": spec, "seed": seed }))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_train: 80,
            n_val: 16,
            n_test: 16,
            regression: true,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small(), 4).unwrap());
    }

    #[test]
    fn coarse_is_coarsening_of_fine() {
        let ds = generate(&small(), 1).unwrap();
        for (c, f) in ds.train.labels[0].iter().zip(&ds.train.labels[1]) {
            assert_eq!(*c, (*f as usize / 2) as f64);
        }
        ds.validate().unwrap();
    }

    #[test]
    fn dim_too_small() {
        let spec = SynthSpec {
            dim: 5,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = SeededRng::new(9);
        let q = random_rotation(&mut rng, 6);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_errors_carry_coordinates() {
        let text = "f0,f1,task0:binary\n0.1,0.2,1\n";
        let err = Dataset::read_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("split"), "{err}");

        let text = "f0,task0:classification(2),split\n0.1,1,train\n0.2,2,val\n0.3,0,test\n";
        match Dataset::read_csv(text.as_bytes()).unwrap_err() {
            Error::DataCell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "task0:classification(2)");
            }
            e => panic!("unexpected {e}"),
        }

        let text = "f0,task0:ordinal,split\n0.1,1,train\n";
        assert!(matches!(Dataset::read_csv(text.as_bytes()), Err(Error::DataCell { row: 0, .. })));

        let text = "f0,task0:binary,split\nx,1,train\n";
        assert!(matches!(
            Dataset::read_csv(text.as_bytes()),
            Err(Error::DataCell { row: 1, .. })
        ));
    }
}
