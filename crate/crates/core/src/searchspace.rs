//! Pipelines, allocations and the space of allocations under a total budget.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{BaseConfig, CostError, CostLine, CostMetric, CostModel, ModelSpec, PriceBilling, TaskShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("invalid pipeline: {0}")]
    InvalidSpec(String),
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("allocation count exceeds 2^63")]
    Overflow,
    #[error("no allocation fits within budget {0}")]
    EmptySpace(f64),
}

/// One stage of a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub name: String,
    pub shape: TaskShape,
    /// Candidate models, strictly ascending in parameter count.
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub min_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples_cap: Option<u32>,
    /// Name of the quality metric reported for this stage.
    #[serde(default)]
    pub metric: String,
}

impl SubtaskSpec {
    pub fn new(name: impl Into<String>, shape: TaskShape, models: Vec<ModelSpec>) -> Self {
        Self {
            name: name.into(),
            shape,
            models,
            min_samples: 0,
            max_samples_cap: None,
            metric: String::new(),
        }
    }

    pub fn with_min_samples(mut self, min_samples: u32) -> Self {
        self.min_samples = min_samples;
        self
    }

    pub fn with_metric(mut self, metric: impl Into<String>) -> Self {
        self.metric = metric.into();
        self
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m.name == name)
    }

    fn validate(&self) -> Result<(), SpaceError> {
        self.shape.validate()?;
        if self.models.is_empty() {
            return Err(SpaceError::InvalidSpec(format!(
                "subtask `{}` has an empty model space",
                self.name
            )));
        }
        for m in &self.models {
            m.validate()?;
        }
        if self.models.windows(2).any(|w| w[0].params >= w[1].params) {
            return Err(SpaceError::InvalidSpec(format!(
                "models of subtask `{}` must be strictly ascending in params",
                self.name
            )));
        }
        if let Some(cap) = self.max_samples_cap {
            if cap < self.min_samples {
                return Err(SpaceError::InvalidSpec(format!(
                    "subtask `{}`: max_samples_cap {cap} is below min_samples {}",
                    self.name, self.min_samples
                )));
            }
        }
        Ok(())
    }
}

/// A sequential multi-stage task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub subtasks: Vec<SubtaskSpec>,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub metric: CostMetric,
    #[serde(default)]
    pub billing: PriceBilling,
    pub main_metric: String,
}

impl PipelineSpec {
    pub fn new(name: impl Into<String>, subtasks: Vec<SubtaskSpec>) -> Self {
        Self {
            name: name.into(),
            description: String::new(),
            subtasks,
            base: BaseConfig::default(),
            metric: CostMetric::default(),
            billing: PriceBilling::default(),
            main_metric: "score".into(),
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            metric: self.metric,
            base: self.base,
            billing: self.billing,
        }
    }

    /// Copy of this spec with architecture defaults filled in when the metric
    /// needs exact FLOPs.
    pub fn resolved(mut self) -> Self {
        if self.metric == CostMetric::FlopsExact {
            for st in &mut self.subtasks {
                for m in &mut st.models {
                    *m = m.clone().with_default_arch();
                }
            }
        }
        self
    }

    /// Copy with every subtask's `min_samples` raised to at least `min`.
    pub fn with_min_samples_at_least(&self, min: u32) -> Self {
        let mut out = self.clone();
        for st in &mut out.subtasks {
            st.min_samples = st.min_samples.max(min);
        }
        out
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        self.base.validate()?;
        if self.subtasks.is_empty() {
            return Err(SpaceError::InvalidSpec("pipeline needs at least one subtask".into()));
        }
        let mut seen = HashSet::new();
        for st in &self.subtasks {
            if !seen.insert(st.name.as_str()) {
                return Err(SpaceError::InvalidSpec(format!("duplicate subtask name `{}`", st.name)));
            }
            st.validate()?;
        }
        // Surfaces missing architecture or prices for the chosen metric.
        self.cost_lines()?;
        Ok(())
    }

    /// `lines[i][m]`: cost of subtask `i` with model `m` as a function of samples.
    pub fn cost_lines(&self) -> Result<Vec<Vec<CostLine>>, SpaceError> {
        let cm = self.cost_model();
        self.subtasks
            .iter()
            .map(|st| {
                st.models
                    .iter()
                    .map(|m| cm.line(m, st.shape).map_err(SpaceError::from))
                    .collect()
            })
            .collect()
    }

    pub fn model(&self, subtask: usize, model: usize) -> &ModelSpec {
        &self.subtasks[subtask].models[model]
    }
}

/// Model and sample count for one subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Choice {
    /// Index into the subtask's model space.
    pub model: usize,
    pub samples: u32,
}

impl Choice {
    pub fn new(model: usize, samples: u32) -> Self {
        Self { model, samples }
    }
}

/// One trial: a (model, samples) choice per subtask, in pipeline order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation {
    pub entries: Vec<Choice>,
}

impl Allocation {
    pub fn new(entries: Vec<Choice>) -> Self {
        Self { entries }
    }

    pub fn from_pairs(pairs: &[(usize, u32)]) -> Self {
        Self::new(pairs.iter().map(|&(m, s)| Choice::new(m, s)).collect())
    }

    /// Human-readable form, e.g. `retrieval=qwen-72b x1, qa=llama-3b x40`.
    pub fn describe(&self, spec: &PipelineSpec) -> String {
        DescribedAllocation { alloc: self, spec }.to_string()
    }
}

struct DescribedAllocation<'a> {
    alloc: &'a Allocation,
    spec: &'a PipelineSpec,
}

impl fmt::Display for DescribedAllocation<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (c, st)) in self.alloc.entries.iter().zip(&self.spec.subtasks).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let model = st.models.get(c.model).map(|m| m.name.as_str()).unwrap_or("?");
            write!(f, "{}={} x{}", st.name, model, c.samples)?;
        }
        Ok(())
    }
}

pub fn validate_allocation(spec: &PipelineSpec, alloc: &Allocation) -> Result<(), SpaceError> {
    if alloc.entries.len() != spec.subtasks.len() {
        return Err(SpaceError::InvalidAllocation(format!(
            "expected {} entries, got {}",
            spec.subtasks.len(),
            alloc.entries.len()
        )));
    }
    for (c, st) in alloc.entries.iter().zip(&spec.subtasks) {
        if c.model >= st.models.len() {
            return Err(SpaceError::InvalidAllocation(format!(
                "subtask `{}` has no model #{}",
                st.name, c.model
            )));
        }
        if c.samples < st.min_samples {
            return Err(SpaceError::InvalidAllocation(format!(
                "subtask `{}` needs at least {} samples, got {}",
                st.name, st.min_samples, c.samples
            )));
        }
        if let Some(cap) = st.max_samples_cap {
            if c.samples > cap {
                return Err(SpaceError::InvalidAllocation(format!(
                    "subtask `{}` allows at most {cap} samples, got {}",
                    st.name, c.samples
                )));
            }
        }
    }
    Ok(())
}

/// Total cost of an allocation: per-subtask costs summed in pipeline order.
pub fn allocation_budget(spec: &PipelineSpec, alloc: &Allocation) -> Result<f64, SpaceError> {
    validate_allocation(spec, alloc)?;
    let cm = spec.cost_model();
    let mut total = 0.0;
    for (c, st) in alloc.entries.iter().zip(&spec.subtasks) {
        total += cm.cost(&st.models[c.model], c.samples, st.shape)?;
    }
    Ok(total)
}

/// Sum over subtasks of the cost of one pass with the largest model.
pub fn default_budget(spec: &PipelineSpec) -> Result<f64, SpaceError> {
    let cm = spec.cost_model();
    let mut total = 0.0;
    for st in &spec.subtasks {
        let largest = st
            .models
            .last()
            .ok_or_else(|| SpaceError::InvalidSpec(format!("subtask `{}` has no models", st.name)))?;
        total += cm.cost(largest, 1, st.shape)?;
    }
    Ok(total)
}

pub fn count_valid(spec: &PipelineSpec, total_budget: f64) -> Result<u64, SpaceError> {
    AllocationSpace::new(spec, total_budget)?.count()
}

pub fn enumerate_valid(spec: &PipelineSpec, total_budget: f64) -> Result<ValidAllocations, SpaceError> {
    Ok(AllocationSpace::new(spec, total_budget)?.into_iter())
}

/// `n` independent uniform draws from the valid set, reproducible per seed.
pub fn sample_uniform(
    spec: &PipelineSpec,
    total_budget: f64,
    seed: u64,
    n: usize,
) -> Result<Vec<Allocation>, SpaceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AllocationSpace::new(spec, total_budget)?.sample(&mut rng, n)
}

/// The feasible allocations of a pipeline under a total budget.
///
/// An allocation is feasible when its costs, accumulated in pipeline order,
/// never exceed the total. Every count, stream and sample below uses that one
/// predicate.
#[derive(Debug, Clone)]
pub struct AllocationSpace {
    total: f64,
    lines: Vec<Vec<CostLine>>,
    mins: Vec<u32>,
    caps: Vec<u32>,
}

/// Rejection sampling gives up on the product-of-boxes proposal below this
/// acceptance rate.
const MIN_ACCEPTANCE: f64 = 0.01;
const PILOT_ATTEMPTS: u64 = 1000;

impl AllocationSpace {
    pub fn new(spec: &PipelineSpec, total_budget: f64) -> Result<Self, SpaceError> {
        spec.validate()?;
        Ok(Self {
            total: total_budget,
            lines: spec.cost_lines()?,
            mins: spec.subtasks.iter().map(|s| s.min_samples).collect(),
            caps: spec
                .subtasks
                .iter()
                .map(|s| s.max_samples_cap.unwrap_or(u32::MAX - 1))
                .collect(),
        })
    }

    pub fn total_budget(&self) -> f64 {
        self.total
    }

    fn levels(&self) -> usize {
        self.lines.len()
    }

    #[inline]
    fn fits(&self, level: usize, partial: f64, model: usize, samples: u32) -> bool {
        partial + self.lines[level][model].eval(samples) <= self.total
    }

    /// Largest feasible sample count for `model` at `level` given the cost
    /// accumulated so far, honoring min/cap.
    fn max_feasible(&self, level: usize, partial: f64, model: usize) -> Option<u32> {
        let line = &self.lines[level][model];
        let s = line.max_samples_where(
            |s| self.fits(level, partial, model, s),
            self.total - partial - line.eval(0),
        )?;
        let s = s.min(self.caps[level]);
        (s >= self.mins[level] && self.fits(level, partial, model, self.mins[level])).then_some(s)
    }

    pub fn count(&self) -> Result<u64, SpaceError> {
        self.count_from(0, 0.0)
    }

    fn count_from(&self, level: usize, partial: f64) -> Result<u64, SpaceError> {
        let last = level + 1 == self.levels();
        let mut total: u64 = 0;
        for model in 0..self.lines[level].len() {
            let Some(hi) = self.max_feasible(level, partial, model) else {
                continue;
            };
            let lo = self.mins[level];
            if last {
                total = total
                    .checked_add(u64::from(hi - lo) + 1)
                    .filter(|&t| t <= i64::MAX as u64)
                    .ok_or(SpaceError::Overflow)?;
            } else {
                for s in lo..=hi {
                    let sub = self.count_from(level + 1, partial + self.lines[level][model].eval(s))?;
                    total = total
                        .checked_add(sub)
                        .filter(|&t| t <= i64::MAX as u64)
                        .ok_or(SpaceError::Overflow)?;
                }
            }
        }
        Ok(total)
    }

    /// The `k`-th allocation in enumeration order (0-based).
    pub fn nth(&self, mut k: u64) -> Result<Option<Allocation>, SpaceError> {
        let n = self.levels();
        let mut entries = Vec::with_capacity(n);
        let mut partial = 0.0;
        'level: for level in 0..n {
            let last = level + 1 == n;
            let his: Vec<Option<u32>> = (0..self.lines[level].len())
                .map(|m| self.max_feasible(level, partial, m))
                .collect();
            let top = his.iter().flatten().copied().max();
            let Some(top) = top else { return Ok(None) };
            for s in self.mins[level]..=top {
                for (m, hi) in his.iter().enumerate() {
                    if !matches!(hi, Some(h) if s <= *h) {
                        continue;
                    }
                    let cost = self.lines[level][m].eval(s);
                    let size = if last {
                        1
                    } else {
                        self.count_from(level + 1, partial + cost)?
                    };
                    if k < size {
                        entries.push(Choice::new(m, s));
                        partial += cost;
                        continue 'level;
                    }
                    k -= size;
                }
            }
            return Ok(None);
        }
        Ok(Some(Allocation::new(entries)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Allocation>, SpaceError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let boxes = self.proposal_boxes().ok_or(SpaceError::EmptySpace(self.total))?;
        let mut out = Vec::with_capacity(n);
        let (mut attempts, mut accepted) = (0u64, 0u64);
        while out.len() < n {
            if attempts >= PILOT_ATTEMPTS && (accepted as f64) < MIN_ACCEPTANCE * attempts as f64 {
                return self.sample_by_index(rng, n, out);
            }
            attempts += 1;
            let entries: Vec<Choice> = boxes.iter().map(|b| b.draw(rng)).collect();
            if self.is_feasible(&entries) {
                accepted += 1;
                out.push(Allocation::new(entries));
            }
        }
        Ok(out)
    }

    fn sample_by_index<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
        mut out: Vec<Allocation>,
    ) -> Result<Vec<Allocation>, SpaceError> {
        let size = self.count()?;
        if size == 0 {
            return Err(SpaceError::EmptySpace(self.total));
        }
        while out.len() < n {
            let k = rng.random_range(0..size);
            out.push(self.nth(k)?.expect("index below count"));
        }
        Ok(out)
    }

    pub fn is_feasible(&self, entries: &[Choice]) -> bool {
        if entries.len() != self.levels() {
            return false;
        }
        let mut partial = 0.0;
        for (level, c) in entries.iter().enumerate() {
            if c.model >= self.lines[level].len()
                || c.samples < self.mins[level]
                || c.samples > self.caps[level]
                || !self.fits(level, partial, c.model, c.samples)
            {
                return false;
            }
            partial += self.lines[level][c.model].eval(c.samples);
        }
        true
    }

    /// Cost of `samples` calls of `model` on subtask `level`.
    pub fn cost(&self, level: usize, model: usize, samples: u32) -> f64 {
        self.lines[level][model].eval(samples)
    }

    pub fn num_models(&self, level: usize) -> usize {
        self.lines[level].len()
    }

    pub fn min_samples(&self, level: usize) -> u32 {
        self.mins[level]
    }

    /// Largest sample count for `model` on subtask `level` that keeps the
    /// allocation feasible with every other entry fixed.
    pub fn axis_max(&self, entries: &[Choice], level: usize, model: usize) -> Option<u32> {
        let others: f64 = entries
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != level)
            .map(|(j, c)| self.cost(j, c.model, c.samples))
            .sum();
        let mut s = self.lines[level][model]
            .max_samples(self.total - others)?
            .min(self.caps[level]);
        let mut probe = entries.to_vec();
        probe[level] = Choice::new(model, self.mins[level]);
        if s < self.mins[level] || !self.is_feasible(&probe) {
            return None;
        }
        loop {
            probe[level] = Choice::new(model, s);
            if self.is_feasible(&probe) {
                return Some(s);
            }
            s -= 1;
        }
    }

    /// Per-subtask sets of (model, samples) pairs that could appear in a
    /// feasible allocation given every other subtask at its cheapest choice.
    fn proposal_boxes(&self) -> Option<Vec<ProposalBox>> {
        let cheapest: Vec<f64> = self
            .lines
            .iter()
            .zip(&self.mins)
            .map(|(ls, &min)| ls.iter().map(|l| l.eval(min)).fold(f64::INFINITY, f64::min))
            .collect();
        let floor: f64 = cheapest.iter().sum();
        let slack = 1e-9 * self.total.abs().max(1.0);
        (0..self.levels())
            .map(|level| {
                let cap = self.total - (floor - cheapest[level]) + slack;
                let ranges: Vec<(usize, u32, u32)> = self.lines[level]
                    .iter()
                    .enumerate()
                    .filter_map(|(m, line)| {
                        let hi = line.max_samples(cap)?.min(self.caps[level]);
                        (hi >= self.mins[level]).then_some((m, self.mins[level], hi))
                    })
                    .collect();
                let size: u64 = ranges.iter().map(|&(_, lo, hi)| u64::from(hi - lo) + 1).sum();
                (size > 0).then_some(ProposalBox { ranges, size })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ProposalBox {
    ranges: Vec<(usize, u32, u32)>,
    size: u64,
}

impl ProposalBox {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Choice {
        let mut k = rng.random_range(0..self.size);
        for &(m, lo, hi) in &self.ranges {
            let width = u64::from(hi - lo) + 1;
            if k < width {
                return Choice::new(m, lo + k as u32);
            }
            k -= width;
        }
        unreachable!("draw index below box size")
    }
}

impl IntoIterator for AllocationSpace {
    type Item = Allocation;
    type IntoIter = ValidAllocations;

    fn into_iter(self) -> ValidAllocations {
        ValidAllocations {
            cur: Vec::with_capacity(self.levels()),
            partial: Vec::with_capacity(self.levels()),
            space: self,
            started: false,
            done: false,
        }
    }
}

/// Streams feasible allocations in lexicographic order: per subtask, samples
/// ascending and then model ascending, first subtask most significant.
#[derive(Debug, Clone)]
pub struct ValidAllocations {
    space: AllocationSpace,
    cur: Vec<Choice>,
    /// `partial[i]`: accumulated cost of subtasks before `i`.
    partial: Vec<f64>,
    started: bool,
    done: bool,
}

impl ValidAllocations {
    /// Moves level `level` to its next feasible choice, or to its first one if
    /// `fresh`. Returns false when the level is exhausted.
    fn advance(&mut self, level: usize, fresh: bool) -> bool {
        let sp = &self.space;
        let partial = self.partial[level];
        let n_models = sp.lines[level].len();
        let (mut s, mut m, mut row_has_fit) = if fresh {
            (sp.mins[level], 0, false)
        } else {
            let c = self.cur[level];
            (c.samples, c.model + 1, true)
        };
        loop {
            if s > sp.caps[level] {
                return false;
            }
            while m < n_models {
                if sp.fits(level, partial, m, s) {
                    let c = Choice::new(m, s);
                    if fresh {
                        self.cur.push(c);
                    } else {
                        self.cur[level] = c;
                    }
                    return true;
                }
                m += 1;
            }
            // Costs are nondecreasing in samples, so an empty row ends the level.
            if !row_has_fit {
                return false;
            }
            s += 1;
            m = 0;
            row_has_fit = false;
        }
    }
}

impl Iterator for ValidAllocations {
    type Item = Allocation;

    fn next(&mut self) -> Option<Allocation> {
        if self.done {
            return None;
        }
        let n = self.space.levels();
        let mut level;
        let mut fresh;
        if !self.started {
            self.started = true;
            self.partial.push(0.0);
            level = 0;
            fresh = true;
        } else {
            level = n - 1;
            fresh = false;
        }
        loop {
            if self.advance(level, fresh) {
                if level + 1 == n {
                    return Some(Allocation::new(self.cur.clone()));
                }
                let c = self.cur[level];
                let next_partial = self.partial[level] + self.space.lines[level][c.model].eval(c.samples);
                self.partial.truncate(level + 1);
                self.partial.push(next_partial);
                level += 1;
                fresh = true;
            } else {
                if level == 0 {
                    self.done = true;
                    return None;
                }
                self.cur.truncate(level);
                self.partial.truncate(level + 1);
                level -= 1;
                fresh = false;
            }
        }
    }
}
