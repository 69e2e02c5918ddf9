//! Declarative pipeline and model-catalog files (TOML, schema 1).
//!
//! A pipeline file lists models once and lets each subtask pick from them
//! by name:
//!
//! ```toml
//! schema = 1
//! name = "chatdev"
//! main_metric = "pass-rate"
//!
//! [[model]]
//! name = "llama-3.2-3b"
//! params = 3e9
//!
//! [[subtask]]
//! name = "coding"
//! prompt_len = 1024
//! gen_len = 1024
//! models = ["llama-3.2-3b"]
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{normalized_budget, BaseConfig, CostMetric, ModelSpec, PriceBilling, TaskShape};
use crate::searchspace::{PipelineSpec, SpaceError, SubtaskSpec};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Toml(String),
    #[error("unsupported schema version {0} (expected {SCHEMA})")]
    Schema(u32),
    #[error("subtask `{subtask}` refers to unknown model `{model}`")]
    UnknownModel { subtask: String, model: String },
    #[error("duplicate {kind} name `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskEntry {
    pub name: String,
    pub prompt_len: u32,
    pub gen_len: u32,
    #[serde(default)]
    pub min_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples_cap: Option<u32>,
    #[serde(default)]
    pub metric: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineFile {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub main_metric: String,
    #[serde(default)]
    pub metric: CostMetric,
    #[serde(default)]
    pub billing: PriceBilling,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(rename = "model")]
    pub models: Vec<ModelSpec>,
    #[serde(rename = "subtask")]
    pub subtasks: Vec<SubtaskEntry>,
}

fn unique<'a>(kind: &'static str, names: impl Iterator<Item = &'a str>) -> Result<(), ConfigError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ConfigError::Duplicate { kind, name: n.into() });
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl PipelineFile {
    pub fn into_spec(self) -> Result<PipelineSpec, ConfigError> {
        if self.schema != SCHEMA {
            return Err(ConfigError::Schema(self.schema));
        }
        unique("model", self.models.iter().map(|m| m.name.as_str()))?;
        unique("subtask", self.subtasks.iter().map(|s| s.name.as_str()))?;
        let subtasks = self
            .subtasks
            .into_iter()
            .map(|st| {
                let models =
                    st.models
                        .iter()
                        .map(|name| {
                            self.models.iter().find(|m| &m.name == name).cloned().ok_or_else(|| {
                                ConfigError::UnknownModel {
                                    subtask: st.name.clone(),
                                    model: name.clone(),
                                }
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                let mut spec = SubtaskSpec::new(st.name, TaskShape::new(st.prompt_len, st.gen_len), models)
                    .with_min_samples(st.min_samples)
                    .with_metric(st.metric);
                spec.max_samples_cap = st.max_samples_cap;
                Ok(spec)
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let spec = PipelineSpec {
            name: self.name,
            description: self.description,
            subtasks,
            base: self.base,
            metric: self.metric,
            billing: self.billing,
            main_metric: self.main_metric,
        }
        .resolved();
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_pipeline(text: &str) -> Result<PipelineSpec, ConfigError> {
    let file: PipelineFile = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
    file.into_spec()
}

pub fn load_pipeline(path: &Path) -> Result<PipelineSpec, ConfigError> {
    parse_pipeline(&read(path)?).map_err(|e| match e {
        ConfigError::Toml(msg) => ConfigError::Toml(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One column of a budget table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnEntry {
    pub label: String,
    pub prompt_len: u32,
    pub gen_len: u32,
}

/// Models and subtask shapes for budget look-up tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub schema: u32,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(rename = "model")]
    pub models: Vec<ModelSpec>,
    #[serde(rename = "column")]
    pub columns: Vec<ColumnEntry>,
}

impl Catalog {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        if c.schema != SCHEMA {
            return Err(ConfigError::Schema(c.schema));
        }
        unique("model", c.models.iter().map(|m| m.name.as_str()))?;
        unique("column", c.columns.iter().map(|m| m.label.as_str()))?;
        c.base.validate().map_err(SpaceError::from)?;
        for m in &c.models {
            m.validate().map_err(SpaceError::from)?;
        }
        for col in &c.columns {
            TaskShape::new(col.prompt_len, col.gen_len)
                .validate()
                .map_err(SpaceError::from)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    /// Real-valued budgets, one row per model and one column per shape.
    pub fn budgets(&self, samples: u32) -> Vec<Vec<f64>> {
        self.models
            .iter()
            .map(|m| {
                self.columns
                    .iter()
                    .map(|c| normalized_budget(m, samples, TaskShape::new(c.prompt_len, c.gen_len), &self.base))
                    .collect()
            })
            .collect()
    }

    /// The budget table as CSV, rounded to the nearest integer.
    pub fn table_csv(&self, samples: u32) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push(',');
            out.push_str(&c.label);
        }
        out.push('\n');
        for (m, row) in self.models.iter().zip(self.budgets(samples)) {
            out.push_str(&m.name);
            for b in row {
                out.push_str(&format!(",{}", b.round() as i64));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::default_budget;

    const PIPE: &str = r#"
schema = 1
name = "qa"
main_metric = "em"

[[model]]
name = "small"
params = 3e9

[[model]]
name = "large"
params = 70e9

[[subtask]]
name = "retrieve"
prompt_len = 256
gen_len = 64
min_samples = 1
models = ["small", "large"]
"#;

    #[test]
    fn pipeline_round_trip() {
        let spec = parse_pipeline(PIPE).unwrap();
        assert_eq!(spec.subtasks[0].models[1].params, 70e9);
        assert_eq!(spec.subtasks[0].min_samples, 1);
        assert_eq!(spec.base, BaseConfig::default());
        assert_eq!(default_budget(&spec).unwrap().round(), 115.0);
    }

    #[test]
    fn pipeline_errors() {
        let unknown = PIPE.replace("[\"small\", \"large\"]", "[\"small\", \"huge\"]");
        assert!(matches!(
            parse_pipeline(&unknown),
            Err(ConfigError::UnknownModel { .. })
        ));
        let schema = PIPE.replace("schema = 1", "schema = 2");
        assert!(matches!(parse_pipeline(&schema), Err(ConfigError::Schema(2))));
        let dup = PIPE.replace("name = \"large\"", "name = \"small\"");
        assert!(matches!(parse_pipeline(&dup), Err(ConfigError::Duplicate { .. })));
        let order = PIPE.replace("[\"small\", \"large\"]", "[\"large\", \"small\"]");
        assert!(matches!(parse_pipeline(&order), Err(ConfigError::Space(_))));
        assert!(matches!(
            parse_pipeline("schema = 1\nbogus = 3"),
            Err(ConfigError::Toml(_))
        ));
    }

    #[test]
    fn catalog_rounds_to_nearest() {
        let c = Catalog::parse(
            r#"
schema = 1
[[model]]
name = "m"
params = 3e9
[[column]]
label = "base"
prompt_len = 128
gen_len = 64
"#,
        )
        .unwrap();
        assert_eq!(c.table_csv(1), "model,base\nm,1\n");
        assert_eq!(c.table_csv(4), "model,base\nm,4\n");
    }
}
