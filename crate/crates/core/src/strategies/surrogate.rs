use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::erf::erf;

use super::{Context, Proposal, Strategy, StrategyError};
use crate::archive::Archive;
use crate::searchspace::{Allocation, AllocationSpace};

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub length_scale: f64,
    pub jitter: f64,
    pub candidate_pool: usize,
    /// Observations needed before the model is used instead of random draws.
    pub min_observations: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            length_scale: 0.3,
            jitter: 1e-6,
            candidate_pool: 512,
            min_observations: 3,
        }
    }
}

/// Gaussian-process regression with expected-improvement acquisition.
#[derive(Debug, Clone, Default)]
pub struct SurrogateSearch {
    pub config: SurrogateConfig,
}

impl SurrogateSearch {
    pub fn new(config: SurrogateConfig) -> Self {
        Self { config }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement over `best` of a Gaussian prediction.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = mean - best;
    if sd <= 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    gain * std_normal_cdf(z) + sd * std_normal_pdf(z)
}

/// One-hot model per subtask followed by `ln(1+s) / ln(1+s_max)`.
struct Encoder {
    models: Vec<usize>,
    log_max: Vec<f64>,
}

impl Encoder {
    fn new(space: &AllocationSpace, levels: usize) -> Self {
        let total = space.total_budget();
        let models = (0..levels).map(|i| space.num_models(i)).collect();
        let log_max = (0..levels)
            .map(|i| {
                let s_max = (0..space.num_models(i))
                    .filter_map(|m| {
                        let s0 = space.cost(i, m, 0);
                        let slope = space.cost(i, m, 1) - s0;
                        (slope > 0.0).then(|| ((total - s0) / slope).max(1.0))
                    })
                    .fold(1.0, f64::max);
                (1.0 + s_max).ln()
            })
            .collect();
        Self { models, log_max }
    }

    fn encode(&self, alloc: &Allocation) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.models.iter().sum::<usize>() + self.models.len());
        for (i, c) in alloc.entries.iter().enumerate() {
            x.extend((0..self.models[i]).map(|m| if m == c.model { 1.0 } else { 0.0 }));
            x.push((1.0 + c.samples as f64).ln() / self.log_max[i]);
        }
        x
    }
}

struct Gp {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    length_scale: f64,
}

impl Gp {
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        se_kernel(a, b, self.length_scale)
    }

    fn fit(xs: Vec<Vec<f64>>, ys: &[f64], length_scale: f64, jitter: f64) -> Option<Self> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&xs[i], &xs[j], length_scale));
        let y = DVector::from_column_slice(ys);
        let mut eps = jitter;
        for _ in 0..6 {
            if let Some(chol) = Cholesky::new(&k + DMatrix::identity(n, n) * eps) {
                let alpha = chol.solve(&y);
                return Some(Self {
                    xs,
                    chol,
                    alpha,
                    length_scale,
                });
            }
            eps *= 10.0;
        }
        None
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.kernel(xi, x)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("nonsingular factor");
        let var = (1.0 - v.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }
}

fn se_kernel(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

fn standardize(ys: &[f64]) -> Vec<f64> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    ys.iter().map(|y| (y - mean) / sd).collect()
}

impl SurrogateSearch {
    fn rank_pool(
        &self,
        archive: &Archive,
        space: &AllocationSpace,
        levels: usize,
        pool: Vec<Allocation>,
    ) -> Vec<(f64, Allocation)> {
        let enc = Encoder::new(space, levels);
        let xs: Vec<Vec<f64>> = archive.trials().map(|t| enc.encode(&t.allocation)).collect();
        let raw: Vec<f64> = archive.trials().map(|t| t.score()).collect();
        let ys = standardize(&raw);
        let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let Some(gp) = Gp::fit(xs, &ys, self.config.length_scale, self.config.jitter) else {
            return pool.into_iter().map(|a| (0.0, a)).collect();
        };
        let mut scored: Vec<(f64, Allocation)> = pool
            .into_iter()
            .map(|a| {
                let (mean, sd) = gp.predict(&enc.encode(&a));
                (expected_improvement(mean, sd, best), a)
            })
            .collect();
        // Stable sort keeps pool order among equal scores.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored
    }
}

impl Strategy for SurrogateSearch {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn propose(&mut self, ctx: &mut Context<'_>) -> Result<Proposal, StrategyError> {
        if ctx.archive.trial_count() < self.config.min_observations {
            return Ok(Proposal::new(ctx.space.sample(ctx.rng, ctx.batch)?));
        }
        let mut seen: HashSet<Allocation> = ctx.taken.clone();
        let pool: Vec<Allocation> = ctx
            .space
            .sample(ctx.rng, self.config.candidate_pool.max(ctx.batch))?
            .into_iter()
            .filter(|a| seen.insert(a.clone()))
            .collect();
        let ranked = self.rank_pool(ctx.archive, ctx.space, ctx.spec.subtasks.len(), pool);
        Ok(Proposal::new(
            ranked.into_iter().take(ctx.batch).map(|(_, a)| a).collect(),
        ))
    }
}
