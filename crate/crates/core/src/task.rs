use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Kind of supervised task a head is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
    Binary,
}

impl TaskKind {
    /// Width of the head output.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression | TaskKind::Binary => 1,
        }
    }

    /// Checks that `label` is admissible for this task kind.
    pub fn validate_label(&self, label: f64) -> Result<(), String> {
        if !label.is_finite() {
            return Err(format!("label {label} is not finite"));
        }
        match self {
            TaskKind::Classification { classes } => {
                if label.fract() != 0.0 || label < 0.0 || label >= *classes as f64 {
                    return Err(format!("label {label} outside class range 0..{classes}"));
                }
            }
            TaskKind::Binary => {
                if label != 0.0 && label != 1.0 {
                    return Err(format!("binary label must be 0 or 1, got {label}"));
                }
            }
            TaskKind::Regression => {}
        }
        Ok(())
    }
}

/// Textual form used in CSV headers: `classification(C)`, `regression`, `binary`.
impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification { classes } => write!(f, "classification({classes})"),
            TaskKind::Regression => write!(f, "regression"),
            TaskKind::Binary => write!(f, "binary"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "binary" => Ok(TaskKind::Binary),
            _ => {
                let inner = s
                    .strip_prefix("classification(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown task kind {s:?}"))?;
                let classes: usize = inner
                    .parse()
                    .map_err(|_| format!("bad class count in {s:?}"))?;
                if classes < 2 {
                    return Err(format!("classification needs at least 2 classes, got {classes}"));
                }
                Ok(TaskKind::Classification { classes })
            }
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}
