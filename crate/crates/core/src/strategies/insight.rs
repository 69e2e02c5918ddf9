use std::collections::{HashMap, HashSet};

use super::{Context, Guideline, Proposal, Strategy, StrategyError};
use crate::archive::{Archive, Directive, TrialRecord};
use crate::searchspace::{Allocation, AllocationSpace, Choice, PipelineSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Refine,
}

/// Smallest model whose best score is within `epsilon` (relative) of the
/// best model's. Models without a score are skipped.
pub fn insight_preference(scores: &[Option<f64>], epsilon: f64) -> Option<usize> {
    let best = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return None;
    }
    let threshold = (1.0 - epsilon) * best;
    scores.iter().position(|s| s.is_some_and(|s| s >= threshold))
}

fn one_pass(space: &AllocationSpace, i: usize, m: usize) -> f64 {
    space.cost(i, m, space.min_samples(i))
}

/// Per subtask, the largest model whose one-pass cost fits next to every
/// other subtask's cheapest one-pass configuration. Downsizes further if the
/// anchors do not fit together.
fn anchors(space: &AllocationSpace, n: usize) -> Result<Vec<usize>, StrategyError> {
    let cheapest: Vec<f64> = (0..n)
        .map(|i| {
            (0..space.num_models(i))
                .map(|m| one_pass(space, i, m))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let floor: f64 = cheapest.iter().sum();
    if floor > space.total_budget() {
        return Err(StrategyError::Infeasible(space.total_budget()));
    }
    let mut out: Vec<usize> = (0..n)
        .map(|i| {
            let cap = space.total_budget() - (floor - cheapest[i]);
            (0..space.num_models(i))
                .rev()
                .find(|&m| one_pass(space, i, m) <= cap)
                .expect("the cheapest model fits")
        })
        .collect();
    let mins: Vec<u32> = (0..n).map(|i| space.min_samples(i)).collect();
    let entries = |a: &[usize]| -> Vec<Choice> { a.iter().zip(&mins).map(|(&m, &s)| Choice::new(m, s)).collect() };
    while !space.is_feasible(&entries(&out)) {
        // Step down the costliest anchor that still has a cheaper model.
        let i = (0..n)
            .filter(|&i| one_pass(space, i, out[i]) > cheapest[i])
            .max_by(|&a, &b| one_pass(space, a, out[a]).total_cmp(&one_pass(space, b, out[b])))
            .ok_or(StrategyError::Infeasible(space.total_budget()))?;
        let current = one_pass(space, i, out[i]);
        out[i] = (0..out[i])
            .rev()
            .find(|&m| one_pass(space, i, m) < current)
            .unwrap_or(0);
    }
    Ok(out)
}

fn init_trials(space: &AllocationSpace, n: usize) -> Result<Vec<Allocation>, StrategyError> {
    let anchor = anchors(space, n)?;
    let base: Vec<Choice> = anchor
        .iter()
        .enumerate()
        .map(|(i, &m)| Choice::new(m, space.min_samples(i)))
        .collect();
    let mut out: Vec<Allocation> = Vec::new();
    for i in 0..n {
        for m in (0..space.num_models(i)).rev() {
            let Some(s) = space.axis_max(&base, i, m) else { continue };
            let mut entries = base.clone();
            entries[i] = Choice::new(m, s);
            let alloc = Allocation::new(entries);
            if !out.contains(&alloc) {
                out.push(alloc);
            }
        }
    }
    Ok(out)
}

/// Initial trials: for each subtask, one trial per model that fits, using
/// all the budget the other subtasks leave at their anchor models with the
/// minimum sample count.
pub fn insight_init(spec: &PipelineSpec, total_budget: f64) -> Result<Vec<Allocation>, StrategyError> {
    let spec = spec.with_min_samples_at_least(1);
    let space = AllocationSpace::new(&spec, total_budget)?;
    init_trials(&space, spec.subtasks.len())
}

/// Mean Train score per distinct allocation, in order of first evaluation.
struct Observations {
    allocs: Vec<Allocation>,
    means: Vec<f64>,
}

impl Observations {
    fn from_archive(archive: &Archive) -> Self {
        let mut index: HashMap<&Allocation, usize> = HashMap::new();
        let mut allocs = Vec::new();
        let mut sums: Vec<(f64, f64)> = Vec::new();
        for t in archive.trials() {
            let k = *index.entry(&t.allocation).or_insert_with(|| {
                allocs.push(t.allocation.clone());
                sums.push((0.0, 0.0));
                allocs.len() - 1
            });
            sums[k].0 += t.score();
            sums[k].1 += 1.0;
        }
        let means = sums.iter().map(|(s, c)| s / c).collect();
        Self { allocs, means }
    }

    fn iter(&self) -> impl Iterator<Item = (&Allocation, f64)> + '_ {
        self.allocs.iter().zip(self.means.iter().copied())
    }
}

/// Deterministic search that follows the three structural insights: pick
/// models per subtask from a one-factor initial sweep, then bracket each
/// subtask's sample count and shift budget between subtasks.
#[derive(Debug, Clone)]
pub struct InsightAgent {
    /// Relative margin under which a smaller model is preferred.
    pub epsilon_pref: f64,
    /// Budget moved per rebalancing step, as a fraction of the total.
    pub quantum_fraction: f64,
    /// Stages without improvement before an exploration trial is added.
    pub stale_limit: u32,
    phase: Phase,
    init_queue: Option<Vec<Allocation>>,
    preferred: Vec<usize>,
    brackets: Vec<Option<(u32, u32)>>,
    best: f64,
    stale: u32,
}

impl Default for InsightAgent {
    fn default() -> Self {
        Self {
            epsilon_pref: 0.05,
            quantum_fraction: 0.05,
            stale_limit: 2,
            phase: Phase::Init,
            init_queue: None,
            preferred: Vec::new(),
            brackets: Vec::new(),
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }
}

impl InsightAgent {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn preferred(&self) -> &[usize] {
        &self.preferred
    }

    pub fn brackets(&self) -> &[Option<(u32, u32)>] {
        &self.brackets
    }

    /// Quality of subtask `i` as observed in a trial: its own measurement
    /// when the backend reports one, the main metric otherwise.
    fn subtask_score(t: &TrialRecord, i: usize, n: usize) -> f64 {
        if t.result.per_subtask_quality.len() == n {
            t.result.per_subtask_quality[i]
        } else {
            t.score()
        }
    }

    fn choose_models(&mut self, spec: &PipelineSpec, archive: &Archive) {
        let n = spec.subtasks.len();
        self.preferred = (0..n)
            .map(|i| {
                let mut scores = vec![None; spec.subtasks[i].models.len()];
                for t in archive.trials() {
                    let m = t.allocation.entries[i].model;
                    let s = Self::subtask_score(t, i, n);
                    scores[m] = Some(scores[m].map_or(s, |b: f64| b.max(s)));
                }
                insight_preference(&scores, self.epsilon_pref).unwrap_or(0)
            })
            .collect();
        self.brackets = vec![None; n];
        self.phase = Phase::Refine;
    }

    /// Preferred models everywhere, spare budget split evenly in cost terms.
    fn start_point(&self, space: &AllocationSpace) -> Allocation {
        let n = self.preferred.len();
        let fixed: f64 = (0..n).map(|i| one_pass(space, i, self.preferred[i])).sum();
        let share = (space.total_budget() - fixed).max(0.0) / n as f64;
        let mut entries: Vec<Choice> = (0..n)
            .map(|i| Choice::new(self.preferred[i], space.min_samples(i)))
            .collect();
        for i in 0..n {
            let (m, lo) = (self.preferred[i], space.min_samples(i));
            let slope = space.cost(i, m, lo + 1) - space.cost(i, m, lo);
            let extra = if slope > 0.0 { (share / slope).floor() as u32 } else { 0 };
            entries[i] = Choice::new(m, lo + extra);
            while entries[i].samples > lo && !space.is_feasible(&entries) {
                entries[i].samples -= 1;
            }
        }
        Allocation::new(entries)
    }

    fn refine(&mut self, ctx: &mut Context<'_>) -> Proposal {
        let space = ctx.space;
        let n = self.preferred.len();
        let obs = Observations::from_archive(ctx.archive);
        let on_pref = |a: &Allocation| a.entries.iter().zip(&self.preferred).all(|(c, &p)| c.model == p);
        let incumbent = obs
            .iter()
            .filter(|(a, _)| on_pref(a))
            .fold(None::<(&Allocation, f64)>, |best, (a, s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((a, s)),
            })
            .map(|(a, _)| a.clone());
        let (inc, fresh_start) = match incumbent {
            Some(a) => (a, false),
            None => (self.start_point(space), true),
        };

        let mut first_probes = Vec::new();
        let mut second_probes = Vec::new();
        let mut fillers = Vec::new();
        let mut directives = Vec::new();
        let mut gains = vec![f64::INFINITY; n];
        let with = |i: usize, s: u32| {
            let mut e = inc.entries.clone();
            e[i].samples = s;
            Allocation::new(e)
        };

        for k in 0..n {
            let i = (k + ctx.stage as usize) % n;
            let floor = space.min_samples(i);
            let c = inc.entries[i].samples;
            let cap = space.axis_max(&inc.entries, i, self.preferred[i]).unwrap_or(c).max(c);
            let axis: Vec<(u32, f64)> = {
                let mut pts: Vec<(u32, f64)> = obs
                    .iter()
                    .filter(|(a, _)| {
                        on_pref(a)
                            && a.entries
                                .iter()
                                .enumerate()
                                .all(|(j, e)| j == i || *e == inc.entries[j])
                    })
                    .map(|(a, s)| (a.entries[i].samples, s))
                    .collect();
                pts.sort_by_key(|p| p.0);
                pts
            };
            let on_axis: HashSet<u32> = axis.iter().map(|p| p.0).collect();

            let (lo, hi) = self.brackets[i].unwrap_or((floor, cap));
            let (lo, hi) = (lo.max(floor).min(c), hi.min(cap).max(c));
            let below = axis.iter().rev().map(|p| p.0).find(|&s| s < c && s >= lo);
            let above = axis.iter().map(|p| p.0).find(|&s| s > c && s <= hi);
            let (lo, hi) = (below.unwrap_or(lo), above.unwrap_or(hi));

            let (bracket, probes, rationale) = if c == hi && hi < cap {
                let new_hi = hi.saturating_mul(2).min(cap);
                (
                    (lo, new_hi),
                    vec![new_hi, c + (new_hi - c) / 2],
                    "best at upper edge: widen",
                )
            } else if c == lo && lo > floor {
                let new_lo = (lo / 2).max(floor);
                (
                    (new_lo, hi),
                    vec![new_lo, new_lo + (c - new_lo) / 2],
                    "best at lower edge: widen",
                )
            } else {
                let third = |k: f64| (lo as f64 + k * (hi - lo) as f64 / 3.0).round() as u32;
                ((lo, hi), vec![third(1.0), third(2.0)], "interior best: probe thirds")
            };
            self.brackets[i] = Some(bracket);
            let mut probes: Vec<u32> = probes
                .into_iter()
                .filter(|&s| s >= floor && s <= cap && s != c && !on_axis.contains(&s))
                .collect();
            probes.dedup();
            if probes.is_empty() {
                probes.extend(
                    [c.saturating_sub(1), c + 1]
                        .into_iter()
                        .filter(|&s| s >= bracket.0.max(floor) && s <= bracket.1 && !on_axis.contains(&s)),
                );
            }
            let mut probes = probes.into_iter();
            if let Some(s) = probes.next() {
                first_probes.push(with(i, s));
            }
            second_probes.extend(probes.map(|s| with(i, s)));
            let (blo, bhi) = bracket;
            for q in 1..4u32 {
                let s = blo + q * (bhi - blo) / 4;
                if s != c && !on_axis.contains(&s) {
                    fillers.push(with(i, s));
                }
            }

            // Finite-difference gain per budget unit from the nearest axis point.
            let nearest = axis.iter().filter(|p| p.0 != c).min_by_key(|p| (p.0.abs_diff(c), p.0));
            let score_c = axis.iter().find(|p| p.0 == c).map(|p| p.1);
            if let (Some(&(s, score)), Some(score_c)) = (nearest, score_c) {
                let m = self.preferred[i];
                let (a, b) = if s < c {
                    ((s, score), (c, score_c))
                } else {
                    ((c, score_c), (s, score))
                };
                let dc = space.cost(i, m, b.0) - space.cost(i, m, a.0);
                if dc > 0.0 {
                    gains[i] = (b.1 - a.1) / dc;
                }
            }

            directives.push(Directive {
                subtask: ctx.spec.subtasks[i].name.clone(),
                preferred_model: ctx.spec.subtasks[i].models[self.preferred[i]].name.clone(),
                sample_lower: bracket.0,
                sample_upper: bracket.1,
                rationale: rationale.to_string(),
            });
        }
        directives.sort_by_key(|d| ctx.spec.subtasks.iter().position(|s| s.name == d.subtask));

        let quantum = self.quantum_fraction * ctx.total_budget;
        let mut pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|d| (0..n).filter(move |&r| r != d).map(move |r| (d, r)))
            .collect();
        let priority = |&(d, r): &(usize, usize)| {
            let diff = gains[r] - gains[d];
            if diff.is_nan() {
                0.0
            } else {
                diff
            }
        };
        pairs.sort_by(|a, b| priority(b).total_cmp(&priority(a)));
        let rebalances: Vec<Allocation> = pairs
            .iter()
            .filter_map(|&(d, r)| self.rebalance(space, &inc, d, r, quantum))
            .collect();

        let mut ordered: Vec<Allocation> = Vec::new();
        if fresh_start {
            ordered.push(inc.clone());
        }
        let mut rebalances = rebalances.into_iter();
        ordered.extend(first_probes);
        ordered.extend(rebalances.next());
        ordered.extend(second_probes);
        ordered.extend(rebalances);
        ordered.extend(fillers);

        let mut seen: HashSet<Allocation> = ctx.taken.clone();
        let mut batch: Vec<Allocation> = ordered
            .into_iter()
            .filter(|a| seen.insert(a.clone()))
            .take(ctx.batch)
            .collect();
        let explore = self.stale >= self.stale_limit;
        let wanted_random = if explore { 1 } else { 0 } + ctx.batch.saturating_sub(batch.len());
        if explore && batch.len() == ctx.batch {
            batch.pop();
        }
        let mut tries = 0;
        let mut added = 0;
        while added < wanted_random && tries < 20 {
            tries += 1;
            if let Ok(draw) = space.sample(ctx.rng, 1) {
                if seen.insert(draw[0].clone()) {
                    batch.push(draw[0].clone());
                    added += 1;
                }
            }
        }
        Proposal {
            allocations: batch,
            guideline: Some(Guideline::Structured(directives)),
        }
    }

    /// Moves at least `quantum` (and at least one sample) of budget from
    /// subtask `d` to subtask `r`; the recipient takes all budget left.
    fn rebalance(
        &self,
        space: &AllocationSpace,
        inc: &Allocation,
        d: usize,
        r: usize,
        quantum: f64,
    ) -> Option<Allocation> {
        let (md, mr) = (self.preferred[d], self.preferred[r]);
        let cd = inc.entries[d].samples;
        let cr = inc.entries[r].samples;
        let floor = space.min_samples(d);
        let current = space.cost(d, md, cd);
        let mut sd = (floor..cd)
            .rev()
            .find(|&s| current - space.cost(d, md, s) >= quantum)
            .unwrap_or(floor);
        loop {
            if sd >= cd {
                return None;
            }
            let mut e = inc.entries.clone();
            e[d].samples = sd;
            if let Some(sr) = space.axis_max(&e, r, mr).filter(|&s| s > cr) {
                e[r].samples = sr;
                return Some(Allocation::new(e));
            }
            if sd == floor {
                return None;
            }
            sd -= 1;
        }
    }
}

impl Strategy for InsightAgent {
    fn name(&self) -> &str {
        "insight"
    }

    fn propose(&mut self, ctx: &mut Context<'_>) -> Result<Proposal, StrategyError> {
        if self.init_queue.is_none() {
            self.init_queue = Some(init_trials(ctx.space, ctx.spec.subtasks.len())?);
        }
        if self.phase == Phase::Init {
            let queue = self.init_queue.as_mut().expect("built above");
            queue.retain(|a| !ctx.taken.contains(a));
            if !queue.is_empty() {
                let take = ctx.batch.min(queue.len());
                return Ok(Proposal::new(queue.drain(..take).collect()));
            }
            self.choose_models(ctx.spec, ctx.archive);
        }
        Ok(self.refine(ctx))
    }

    fn on_feedback(&mut self, records: &[TrialRecord]) {
        let stage_best = records.iter().map(TrialRecord::score).fold(f64::NEG_INFINITY, f64::max);
        if stage_best > self.best {
            self.best = stage_best;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
    }
}
