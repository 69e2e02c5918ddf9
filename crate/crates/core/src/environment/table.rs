use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, EvalResult, Mode};
use crate::searchspace::{allocation_budget, validate_allocation, Allocation, Choice, PipelineSpec};

/// A model given by name or by position in the subtask's model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableChoice {
    pub model: ModelRef,
    pub samples: u32,
}

/// One line of a table file.
///
/// ```text
/// {"allocation":[{"model":"qwen2.5-72b","samples":2},{"model":1,"samples":9}],"main_metric":0.61}
/// ```
///
/// `per_subtask_quality` is optional. Blank lines and lines starting with
/// `#` are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub allocation: Vec<TableChoice>,
    pub main_metric: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_subtask_quality: Vec<f64>,
}

/// Replays recorded measurements; unknown allocations are an error.
#[derive(Debug, Clone)]
pub struct TableEnv {
    spec: PipelineSpec,
    entries: HashMap<Allocation, (f64, Vec<f64>)>,
}

impl TableEnv {
    pub fn new(spec: PipelineSpec) -> Self {
        Self {
            spec,
            entries: HashMap::new(),
        }
    }

    pub fn load(path: &Path, spec: PipelineSpec) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        let mut env = Self::new(spec);
        let parse_err = |line: usize, msg: String| EnvError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let record: TableRecord = serde_json::from_str(line).map_err(|e| parse_err(k + 1, e.to_string()))?;
            env.insert(&record).map_err(|e| parse_err(k + 1, e.to_string()))?;
        }
        Ok(env)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, choices: &[TableChoice]) -> Result<Allocation, EnvError> {
        let entries = choices
            .iter()
            .zip(&self.spec.subtasks)
            .map(|(c, st)| {
                let model = match &c.model {
                    ModelRef::Index(m) => *m,
                    ModelRef::Name(name) => st
                        .model_index(name)
                        .ok_or_else(|| EnvError::MissingKey(format!("{}: unknown model {name}", st.name)))?,
                };
                Ok(Choice::new(model, c.samples))
            })
            .collect::<Result<Vec<_>, EnvError>>()?;
        let alloc = Allocation::new(entries);
        if choices.len() != self.spec.subtasks.len() {
            return Err(EnvError::MissingKey(format!(
                "allocation has {} entries, pipeline has {} subtasks",
                choices.len(),
                self.spec.subtasks.len()
            )));
        }
        validate_allocation(&self.spec, &alloc)?;
        Ok(alloc)
    }

    pub fn insert(&mut self, record: &TableRecord) -> Result<(), EnvError> {
        let alloc = self.resolve(&record.allocation)?;
        if self.entries.contains_key(&alloc) {
            return Err(EnvError::MissingKey(format!(
                "duplicate entry for {}",
                alloc.describe(&self.spec)
            )));
        }
        self.entries
            .insert(alloc, (record.main_metric, record.per_subtask_quality.clone()));
        Ok(())
    }
}

impl Environment for TableEnv {
    fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    fn evaluate(&self, alloc: &Allocation, _mode: Mode, _repeat: u64) -> Result<EvalResult, EnvError> {
        let (main_metric, per_subtask_quality) = self
            .entries
            .get(alloc)
            .ok_or_else(|| EnvError::MissingKey(alloc.describe(&self.spec)))?;
        Ok(EvalResult {
            per_subtask_quality: per_subtask_quality.clone(),
            main_metric: *main_metric,
            budget_spent: allocation_budget(&self.spec, alloc)?,
        })
    }
}
