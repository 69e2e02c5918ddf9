//! Allocation search strategies and the shared propose/evaluate loop.

mod insight;
pub mod llm;
mod random;
mod surrogate;

use std::collections::HashSet;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError, Directive, GuidelineRecord, TrialRecord};
use crate::environment::{EnvError, Environment, EvalResult, Mode};
use crate::searchspace::{allocation_budget, Allocation, AllocationSpace, PipelineSpec, SpaceError};

pub use insight::{insight_init, insight_preference, InsightAgent, Phase};
pub use llm::{LlmAgent, LlmConfig};
pub use random::RandomSearch;
pub use surrogate::{expected_improvement, SurrogateConfig, SurrogateSearch};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("no feasible allocation under budget {0}")]
    Infeasible(f64),
    #[error("strategy produced no feasible new allocation after {0} attempts")]
    NoProposals(usize),
    #[error("language model endpoint: {0}")]
    Endpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Everything a strategy may look at when proposing a batch.
pub struct Context<'a> {
    /// The pipeline with every subtask forced to at least one sample.
    pub spec: &'a PipelineSpec,
    pub space: &'a AllocationSpace,
    pub total_budget: f64,
    pub archive: &'a Archive,
    /// Number of allocations wanted.
    pub batch: usize,
    pub stage: u32,
    /// Allocations already archived or accepted into the current batch.
    pub taken: &'a HashSet<Allocation>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guideline {
    Text(String),
    Structured(Vec<Directive>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Proposal {
    pub allocations: Vec<Allocation>,
    pub guideline: Option<Guideline>,
}

impl Proposal {
    pub fn new(allocations: Vec<Allocation>) -> Self {
        Self {
            allocations,
            guideline: None,
        }
    }
}

pub trait Strategy {
    fn name(&self) -> &str;

    fn propose(&mut self, ctx: &mut Context<'_>) -> Result<Proposal, StrategyError>;

    /// Called once per stage with the records just archived.
    fn on_feedback(&mut self, _records: &[TrialRecord]) {}
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchConfig {
    pub max_trials: usize,
    pub batch: usize,
    pub seed: u64,
    /// Archived allocations re-evaluated in Test mode for the final report.
    pub top_k: usize,
    /// Stop after this many consecutive stages without improvement.
    pub patience: Option<u32>,
    /// Re-proposals allowed per stage before duplicates are evaluated anyway.
    pub max_retries: usize,
    /// Record wall-clock timestamps (makes archives differ across runs).
    pub timestamps: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_trials: 50,
            batch: 5,
            seed: 0,
            top_k: 3,
            patience: None,
            max_retries: 5,
            timestamps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub trial_id: u64,
    pub allocation: Allocation,
    pub train_score: f64,
    pub test: EvalResult,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub archive: Archive,
    pub report: Vec<TestReport>,
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn cheapest_exists(space: &AllocationSpace, levels: usize) -> bool {
    let entries: Vec<_> = (0..levels)
        .map(|i| {
            let m = (0..space.num_models(i))
                .min_by(|&a, &b| {
                    space
                        .cost(i, a, space.min_samples(i))
                        .total_cmp(&space.cost(i, b, space.min_samples(i)))
                })
                .unwrap_or(0);
            crate::searchspace::Choice::new(m, space.min_samples(i))
        })
        .collect();
    space.is_feasible(&entries)
}

/// Alternates propose, Train-mode evaluation and feedback until
/// `max_trials` evaluations are archived, then re-scores the best archived
/// allocations in Test mode.
pub fn run_search(
    strategy: &mut dyn Strategy,
    env: &dyn Environment,
    total_budget: f64,
    config: &SearchConfig,
) -> Result<SearchOutcome, StrategyError> {
    if config.max_trials == 0 || config.batch == 0 {
        return Err(StrategyError::Config("max_trials and batch must be at least 1".into()));
    }
    let spec = env.spec().with_min_samples_at_least(1);
    let space = AllocationSpace::new(&spec, total_budget)?;
    if !cheapest_exists(&space, spec.subtasks.len()) {
        return Err(StrategyError::Infeasible(total_budget));
    }
    let mut archive = Archive::new(serde_json::json!({
        "strategy": strategy.name(),
        "total_budget": total_budget,
        "config": config,
        "spec": env.spec(),
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stage: u32 = 0;
    let mut best = f64::NEG_INFINITY;
    let mut stale: u32 = 0;

    while archive.trial_count() < config.max_trials {
        let want = config.batch.min(config.max_trials - archive.trial_count());
        let mut taken: HashSet<Allocation> = archive.trials().map(|t| t.allocation.clone()).collect();
        let mut accepted: Vec<Allocation> = Vec::new();
        let mut duplicates: Vec<Allocation> = Vec::new();
        let mut guideline = None;
        for _ in 0..=config.max_retries {
            let mut ctx = Context {
                spec: &spec,
                space: &space,
                total_budget,
                archive: &archive,
                batch: want - accepted.len(),
                stage,
                taken: &taken,
                rng: &mut rng,
            };
            let proposal = strategy.propose(&mut ctx)?;
            if guideline.is_none() {
                guideline = proposal.guideline;
            }
            for alloc in proposal.allocations {
                if accepted.len() == want {
                    break;
                }
                if !space.is_feasible(&alloc.entries) {
                    continue;
                }
                if taken.contains(&alloc) {
                    if !duplicates.contains(&alloc) {
                        duplicates.push(alloc);
                    }
                    continue;
                }
                taken.insert(alloc.clone());
                accepted.push(alloc);
            }
            if accepted.len() == want {
                break;
            }
        }
        // Re-evaluating a duplicate still yields a fresh noisy measurement.
        let short = want - accepted.len();
        accepted.extend(duplicates.into_iter().take(short));
        if accepted.is_empty() {
            return Err(StrategyError::NoProposals(config.max_retries + 1));
        }

        let guideline_ref = match guideline {
            Some(g) => {
                let id = archive.next_guideline_id();
                let record = match g {
                    Guideline::Text(text) => GuidelineRecord::text(id, stage, text),
                    Guideline::Structured(d) => GuidelineRecord::structured(id, stage, d),
                };
                archive.append_guideline(record)?;
                Some(id)
            }
            None => None,
        };

        let mut records = Vec::with_capacity(accepted.len());
        for alloc in accepted {
            let repeat = archive.times_evaluated(&alloc);
            let result = env.evaluate(&alloc, Mode::Train, repeat)?;
            let record = TrialRecord {
                id: archive.next_trial_id(),
                stage,
                strategy: strategy.name().to_string(),
                budget: allocation_budget(&spec, &alloc)?,
                allocation: alloc,
                result,
                guideline_ref,
                timestamp: config.timestamps.then(unix_millis),
            };
            archive.append_trial(record.clone())?;
            records.push(record);
        }
        strategy.on_feedback(&records);

        let stage_best = records.iter().map(TrialRecord::score).fold(f64::NEG_INFINITY, f64::max);
        if stage_best > best {
            best = stage_best;
            stale = 0;
        } else {
            stale += 1;
        }
        stage += 1;
        if config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    let mut report = Vec::new();
    let mut seen = HashSet::new();
    for t in archive.best(archive.trial_count()) {
        if report.len() == config.top_k {
            break;
        }
        if !seen.insert(t.allocation.clone()) {
            continue;
        }
        report.push(TestReport {
            trial_id: t.id,
            allocation: t.allocation.clone(),
            train_score: t.score(),
            test: env.evaluate(&t.allocation, Mode::Test, 0)?,
        });
    }
    Ok(SearchOutcome { archive, report })
}

/// Trial number (from 1) at which an evaluated allocation first scores at
/// least `(1 - tol) * optimum` under `score`, if ever.
pub fn trials_to_within(
    archive: &Archive,
    optimum: f64,
    tol: f64,
    score: impl Fn(&Allocation) -> f64,
) -> Option<usize> {
    archive
        .trials()
        .position(|t| score(&t.allocation) >= (1.0 - tol) * optimum)
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::make_preset;
    use crate::searchspace::default_budget;

    struct Fixed(Vec<Allocation>);

    impl Strategy for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn propose(&mut self, _ctx: &mut Context<'_>) -> Result<Proposal, StrategyError> {
            Ok(Proposal::new(self.0.clone()))
        }
    }

    fn env() -> crate::environment::SyntheticEnv {
        make_preset("retrieval-qa", 1).unwrap()
    }

    #[test]
    fn exactly_max_trials_are_archived() {
        let env = env();
        let total = default_budget(&env.spec).unwrap();
        for (max_trials, batch) in [(50, 5), (1, 5), (7, 3)] {
            let cfg = SearchConfig {
                max_trials,
                batch,
                seed: 4,
                ..Default::default()
            };
            let out = run_search(&mut RandomSearch, &env, total, &cfg).unwrap();
            assert_eq!(out.archive.trial_count(), max_trials);
            assert_eq!(out.archive.trajectory().len(), max_trials);
            assert!(out.archive.trials().all(|t| t.budget <= total));
            assert!(!out.report.is_empty() && out.report.len() <= 3);
        }
    }

    #[test]
    fn duplicates_are_evaluated_after_retries() {
        let env = env();
        let a = Allocation::from_pairs(&[(2, 1), (0, 10)]);
        let cfg = SearchConfig {
            max_trials: 4,
            batch: 2,
            ..Default::default()
        };
        let out = run_search(&mut Fixed(vec![a.clone()]), &env, 929.0, &cfg).unwrap();
        assert_eq!(out.archive.trial_count(), 4);
        let scores: Vec<f64> = out.archive.trials().map(|t| t.score()).collect();
        assert!(scores.windows(2).any(|w| w[0] != w[1]), "repeats draw fresh noise");
        assert_eq!(out.report.len(), 1);
    }

    #[test]
    fn infeasible_proposals_are_an_error() {
        let env = env();
        let cfg = SearchConfig::default();
        let bad = Allocation::from_pairs(&[(2, 50), (2, 50)]);
        assert!(matches!(
            run_search(&mut Fixed(vec![bad]), &env, 929.0, &cfg),
            Err(StrategyError::NoProposals(6))
        ));
        assert!(matches!(
            run_search(&mut RandomSearch, &env, 10.0, &cfg),
            Err(StrategyError::Infeasible(_))
        ));
    }

    #[test]
    fn patience_stops_early() {
        let env = env();
        let a = Allocation::from_pairs(&[(0, 1), (0, 1)]);
        let cfg = SearchConfig {
            patience: Some(1),
            max_trials: 50,
            batch: 1,
            ..Default::default()
        };
        let out = run_search(&mut Fixed(vec![a]), &env, 929.0, &cfg).unwrap();
        assert!(out.archive.trial_count() < 50);
    }

    #[test]
    fn trials_to_within_counts_from_one() {
        let env = env();
        let cfg = SearchConfig {
            max_trials: 5,
            ..Default::default()
        };
        let out = run_search(&mut RandomSearch, &env, 929.0, &cfg).unwrap();
        let first = env.true_score(&out.archive.trials().next().unwrap().allocation);
        assert_eq!(
            trials_to_within(&out.archive, first, 0.0, |a| env.true_score(a)),
            Some(1)
        );
        assert_eq!(trials_to_within(&out.archive, 2.0, 0.01, |a| env.true_score(a)), None);
    }
}
