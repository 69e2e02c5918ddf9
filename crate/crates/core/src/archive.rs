//! Append-only record of a search run.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EvalResult;
use crate::searchspace::Allocation;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("trial id {id} does not increase past {last}")]
    NonIncreasingId { id: u64, last: u64 },
    #[error("malformed guideline {0}: text and directives must match its kind")]
    MalformedGuideline(u64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("could not serialize record: {0}")]
    Serialize(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: u64,
    pub stage: u32,
    pub strategy: String,
    pub allocation: Allocation,
    pub budget: f64,
    pub result: EvalResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guideline_ref: Option<u64>,
    /// Unix time in milliseconds, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl TrialRecord {
    pub fn score(&self) -> f64 {
        self.result.main_metric
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidelineKind {
    Text,
    Structured,
}

/// Search direction for one subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub subtask: String,
    pub preferred_model: String,
    pub sample_lower: u32,
    pub sample_upper: u32,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineRecord {
    pub id: u64,
    pub stage: u32,
    pub kind: GuidelineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directives: Option<Vec<Directive>>,
}

impl GuidelineRecord {
    pub fn text(id: u64, stage: u32, text: impl Into<String>) -> Self {
        Self {
            id,
            stage,
            kind: GuidelineKind::Text,
            text: Some(text.into()),
            directives: None,
        }
    }

    pub fn structured(id: u64, stage: u32, directives: Vec<Directive>) -> Self {
        Self {
            id,
            stage,
            kind: GuidelineKind::Structured,
            text: None,
            directives: Some(directives),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            GuidelineKind::Text => self.text.is_some() && self.directives.is_none(),
            GuidelineKind::Structured => self.text.is_none() && self.directives.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Entry {
    Trial(TrialRecord),
    Guideline(GuidelineRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "type")]
    kind: String,
    schema: u32,
    #[serde(default)]
    run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    /// Free-form description of the run (spec, strategy, seed, ...).
    pub run: serde_json::Value,
    entries: Vec<Entry>,
}

impl Archive {
    pub fn new(run: serde_json::Value) -> Self {
        Self {
            run,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn trials(&self) -> impl DoubleEndedIterator<Item = &TrialRecord> + '_ {
        self.entries.iter().filter_map(|e| match e {
            Entry::Trial(t) => Some(t),
            Entry::Guideline(_) => None,
        })
    }

    pub fn guidelines(&self) -> impl Iterator<Item = &GuidelineRecord> + '_ {
        self.entries.iter().filter_map(|e| match e {
            Entry::Guideline(g) => Some(g),
            Entry::Trial(_) => None,
        })
    }

    pub fn trial_count(&self) -> usize {
        self.trials().count()
    }

    pub fn next_trial_id(&self) -> u64 {
        self.trials().last().map_or(0, |t| t.id + 1)
    }

    pub fn next_guideline_id(&self) -> u64 {
        self.guidelines().map(|g| g.id + 1).max().unwrap_or(0)
    }

    /// Number of archived evaluations of `alloc`.
    pub fn times_evaluated(&self, alloc: &Allocation) -> u64 {
        self.trials().filter(|t| &t.allocation == alloc).count() as u64
    }

    pub fn append(&mut self, entry: Entry) -> Result<(), ArchiveError> {
        match &entry {
            Entry::Trial(t) => {
                if let Some(last) = self.trials().last() {
                    if t.id == last.id || self.trials().any(|x| x.id == t.id) {
                        return Err(ArchiveError::DuplicateId {
                            kind: "trial",
                            id: t.id,
                        });
                    }
                    if t.id < last.id {
                        return Err(ArchiveError::NonIncreasingId {
                            id: t.id,
                            last: last.id,
                        });
                    }
                }
            }
            Entry::Guideline(g) => {
                if !g.is_well_formed() {
                    return Err(ArchiveError::MalformedGuideline(g.id));
                }
                if self.guidelines().any(|x| x.id == g.id) {
                    return Err(ArchiveError::DuplicateId {
                        kind: "guideline",
                        id: g.id,
                    });
                }
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn append_trial(&mut self, t: TrialRecord) -> Result<(), ArchiveError> {
        self.append(Entry::Trial(t))
    }

    pub fn append_guideline(&mut self, g: GuidelineRecord) -> Result<(), ArchiveError> {
        self.append(Entry::Guideline(g))
    }

    /// Top `k` trials by score, then lower budget, then lower id.
    pub fn best(&self, k: usize) -> Vec<&TrialRecord> {
        let mut all: Vec<&TrialRecord> = self.trials().collect();
        all.sort_by(|a, b| {
            b.score()
                .total_cmp(&a.score())
                .then(a.budget.total_cmp(&b.budget))
                .then(a.id.cmp(&b.id))
        });
        all.truncate(k);
        all
    }

    /// The last `n` trials in archive order.
    pub fn history_window(&self, n: usize) -> Vec<&TrialRecord> {
        let all: Vec<&TrialRecord> = self.trials().collect();
        all[all.len().saturating_sub(n)..].to_vec()
    }

    /// `(trial number from 1, best score so far)` for every trial.
    pub fn trajectory(&self) -> Vec<(usize, f64)> {
        let mut best = f64::NEG_INFINITY;
        self.trials()
            .enumerate()
            .map(|(i, t)| {
                best = best.max(t.score());
                (i + 1, best)
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), ArchiveError> {
        let mut w = BufWriter::new(w);
        let header = Header {
            kind: "header".into(),
            schema: SCHEMA_VERSION,
            run: self.run.clone(),
        };
        writeln!(w, "{}", to_line(&header)?)?;
        for e in &self.entries {
            writeln!(w, "{}", to_line(e)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ArchiveError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(ArchiveError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| ArchiveError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.kind != "header" || header.schema != SCHEMA_VERSION {
            return Err(ArchiveError::Parse {
                line: 1,
                msg: format!("expected header with schema {SCHEMA_VERSION}"),
            });
        }
        let mut archive = Archive::new(header.run);
        for (k, line) in lines {
            let parse_err = |msg: String| ArchiveError::Parse { line: k + 1, msg };
            let entry: Entry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            archive.append(entry).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(archive)
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn to_line<T: Serialize>(value: &T) -> Result<String, ArchiveError> {
    serde_json::to_string(value).map_err(|e| ArchiveError::Serialize(e.to_string()))
}
