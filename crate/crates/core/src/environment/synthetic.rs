use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Aggregation, EnvError, Environment, EvalResult, Mode};
use crate::searchspace::{
    allocation_budget, count_valid, enumerate_valid, validate_allocation, Allocation, PipelineSpec,
};

pub const DEFAULT_GRID_CAP: u64 = 10_000_000;

/// Quality curve of one model on one subtask.
///
/// Quality saturates as `1 - exp(-s / tau)` and decays linearly once the
/// sample count passes the peak. Lower upstream quality shrinks the ceiling
/// (`gamma`) and stretches both the saturation scale and the peak (`kappa`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    /// Ceiling at perfect upstream quality, in (0, 1].
    pub a0: f64,
    /// Saturation scale in samples.
    pub tau0: f64,
    /// Peak sample count at perfect upstream quality.
    pub peak0: f64,
    /// Relative loss per peak-width of oversampling, in [0, 1).
    pub decay: f64,
    pub kappa: f64,
    pub gamma: f64,
}

impl CurveParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = self.a0 > 0.0
            && self.a0 <= 1.0
            && self.tau0 > 0.0
            && self.peak0 >= 1.0
            && (0.0..1.0).contains(&self.decay)
            && self.kappa >= 0.0
            && self.gamma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidParams(format!("{self:?}")))
        }
    }

    pub fn tau(&self, upstream: f64) -> f64 {
        self.tau0 * (1.0 + self.kappa * (1.0 - upstream))
    }

    pub fn peak(&self, upstream: f64) -> f64 {
        self.peak0 * (1.0 + self.kappa * (1.0 - upstream))
    }

    /// Noiseless quality at `samples` given the quality of the stage before.
    pub fn quality(&self, samples: u32, upstream: f64) -> f64 {
        let s = samples as f64;
        let ceiling = self.a0 * upstream.powf(self.gamma);
        let tau = self.tau(upstream);
        let peak = self.peak(upstream);
        let raw = ceiling * (1.0 - (-s / tau).exp());
        let decayed = raw * (1.0 - self.decay * (s - peak).max(0.0) / peak);
        decayed.clamp(0.0, 1.0)
    }
}

/// A seeded synthetic pipeline whose performance surface exhibits model
/// preferences, per-stage optimal budgets, and upstream coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub spec: PipelineSpec,
    /// `params[i][m]`: curve of model `m` on subtask `i`.
    pub params: Vec<Vec<CurveParams>>,
    pub seed: u64,
    pub mode: Mode,
    pub n_train: u32,
    pub sigma: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl SyntheticEnv {
    pub fn new(spec: PipelineSpec, params: Vec<Vec<CurveParams>>, seed: u64) -> Result<Self, EnvError> {
        let env = Self {
            spec,
            params,
            seed,
            mode: Mode::Test,
            n_train: 50,
            sigma: 0.05,
            aggregation: Aggregation::Final,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.spec.validate()?;
        if self.params.len() != self.spec.subtasks.len()
            || self
                .params
                .iter()
                .zip(&self.spec.subtasks)
                .any(|(p, st)| p.len() != st.models.len())
        {
            return Err(EnvError::InvalidParams(
                "curve table does not match the model spaces".into(),
            ));
        }
        for p in self.params.iter().flatten() {
            p.validate()?;
        }
        if self.n_train == 0 || self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(EnvError::InvalidParams("n_train must be >= 1 and sigma >= 0".into()));
        }
        Ok(())
    }

    /// Standard deviation of Train-mode noise on each stage.
    pub fn noise_sd(&self) -> f64 {
        self.sigma / (self.n_train as f64).sqrt()
    }

    /// Evaluates in the environment's own mode.
    pub fn eval(&self, alloc: &Allocation) -> Result<EvalResult, EnvError> {
        self.evaluate(alloc, self.mode, 0)
    }

    /// Noiseless per-stage qualities.
    pub fn true_qualities(&self, alloc: &Allocation) -> Vec<f64> {
        let mut upstream = 1.0;
        alloc
            .entries
            .iter()
            .enumerate()
            .map(|(i, c)| {
                upstream = self.params[i][c.model].quality(c.samples, upstream);
                upstream
            })
            .collect()
    }

    /// Main metric of the noiseless surface.
    pub fn true_score(&self, alloc: &Allocation) -> f64 {
        self.aggregation.apply(&self.true_qualities(alloc))
    }

    fn noise(&self, alloc: &Allocation, stage: usize, repeat: u64) -> f64 {
        let sd = self.noise_sd();
        if sd == 0.0 {
            return 0.0;
        }
        let mut key = mix(self.seed ^ 0x005e_ed0f_a110_ca7e);
        for c in &alloc.entries {
            key = mix(key ^ c.model as u64);
            key = mix(key ^ u64::from(c.samples));
        }
        key = mix(key ^ stage as u64);
        key = mix(key ^ repeat);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Normal::new(0.0, sd).expect("finite sd").sample(&mut rng)
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Environment for SyntheticEnv {
    fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    fn evaluate(&self, alloc: &Allocation, mode: Mode, repeat: u64) -> Result<EvalResult, EnvError> {
        validate_allocation(&self.spec, alloc)?;
        let budget_spent = allocation_budget(&self.spec, alloc)?;
        let truth = self.true_qualities(alloc);
        // Noise is observation error on each stage's measurement; the chain
        // itself runs on the noiseless qualities.
        let per_subtask_quality: Vec<f64> = match mode {
            Mode::Test => truth,
            Mode::Train => truth
                .iter()
                .enumerate()
                .map(|(i, q)| (q + self.noise(alloc, i, repeat)).clamp(0.0, 1.0))
                .collect(),
        };
        Ok(EvalResult {
            main_metric: self.aggregation.apply(&per_subtask_quality),
            per_subtask_quality,
            budget_spent,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTruth {
    pub allocation: Allocation,
    pub score: f64,
    pub evaluated: u64,
}

/// Exhaustive Test-mode optimum; ties go to the first allocation in
/// enumeration order.
pub fn grid_truth(env: &SyntheticEnv, total_budget: f64, cap: u64) -> Result<GridTruth, EnvError> {
    let size = count_valid(&env.spec, total_budget)?;
    if size > cap {
        return Err(EnvError::TooLarge { size, cap });
    }
    let mut best: Option<(Allocation, f64)> = None;
    let mut evaluated = 0;
    for alloc in enumerate_valid(&env.spec, total_budget)? {
        evaluated += 1;
        let score = env.true_score(&alloc);
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((alloc, score));
        }
    }
    let (allocation, score) = best.ok_or(crate::searchspace::SpaceError::EmptySpace(total_budget))?;
    Ok(GridTruth {
        allocation,
        score,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{ModelSpec, TaskShape};
    use crate::searchspace::{sample_uniform, SubtaskSpec};

    fn curve() -> CurveParams {
        CurveParams {
            a0: 0.8,
            tau0: 3.0,
            peak0: 12.0,
            decay: 0.05,
            kappa: 1.0,
            gamma: 1.0,
        }
    }

    fn single(params: CurveParams) -> SyntheticEnv {
        let spec = PipelineSpec::new(
            "one",
            vec![SubtaskSpec::new(
                "only",
                TaskShape::new(128, 64),
                vec![ModelSpec::new("3b", 3e9)],
            )],
        );
        SyntheticEnv::new(spec, vec![vec![params]], 1).unwrap()
    }

    fn two_stage() -> SyntheticEnv {
        let models = || vec![ModelSpec::new("3b", 3e9), ModelSpec::new("8b", 8e9)];
        let spec = PipelineSpec::new(
            "two",
            vec![
                SubtaskSpec::new("a", TaskShape::new(128, 64), models()).with_min_samples(1),
                SubtaskSpec::new("b", TaskShape::new(256, 64), models()).with_min_samples(1),
            ],
        );
        let p = vec![vec![curve(), CurveParams { a0: 0.9, ..curve() }]; 2];
        SyntheticEnv::new(spec, p, 3).unwrap()
    }

    #[test]
    fn zero_samples_give_zero_quality() {
        let env = single(curve());
        let r = env.eval(&Allocation::from_pairs(&[(0, 0)])).unwrap();
        assert_eq!(r.per_subtask_quality, vec![0.0]);
        assert_eq!(r.main_metric, 0.0);
    }

    #[test]
    fn saturation_limit() {
        let env = single(CurveParams {
            decay: 0.0,
            kappa: 0.0,
            ..curve()
        });
        let q = env.eval(&Allocation::from_pairs(&[(0, 3000)])).unwrap().main_metric;
        assert!((q - 0.8).abs() < 1e-4);
    }

    #[test]
    fn decaying_curve_peaks_in_the_interior() {
        let c = curve();
        let (arg, _) = (1..=200u32)
            .map(|s| (s, c.quality(s, 1.0)))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!(arg > 1 && arg < 200);
        assert!((arg as f64 - c.peak0).abs() <= 2.0, "argmax {arg}");
    }

    #[test]
    fn budget_spent_is_reported() {
        let env = single(curve());
        let r = env.eval(&Allocation::from_pairs(&[(0, 7)])).unwrap();
        assert_eq!(r.budget_spent, 7.0);
        assert!(env.eval(&Allocation::from_pairs(&[(1, 7)])).is_err());
    }

    #[test]
    fn train_noise_is_reproducible_and_scaled() {
        let env = two_stage();
        let a = Allocation::from_pairs(&[(0, 4), (0, 3)]);
        let truth = env.true_score(&a);
        assert!(truth > 0.2 && truth < 0.8);
        let r1 = env.evaluate(&a, Mode::Train, 0).unwrap();
        let r2 = env.evaluate(&a, Mode::Train, 0).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(r1, env.evaluate(&a, Mode::Train, 1).unwrap());
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|k| env.evaluate(&a, Mode::Train, k).unwrap().main_metric)
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let expected = 0.05 / 50f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.2, "sd {sd} vs {expected}");
        assert!((mean - truth).abs() < 4.0 * expected / (n as f64).sqrt() + 1e-12);
    }

    #[test]
    fn qualities_stay_in_range() {
        let env = two_stage();
        for a in sample_uniform(&env.spec, 200.0, 4, 300).unwrap() {
            for mode in [Mode::Train, Mode::Test] {
                let r = env.evaluate(&a, mode, 0).unwrap();
                assert!(r.per_subtask_quality.iter().all(|q| (0.0..=1.0).contains(q)));
                assert_eq!(r.main_metric, *r.per_subtask_quality.last().unwrap());
            }
        }
    }

    #[test]
    fn grid_truth_on_tiny_space() {
        let env = single(curve());
        let g = grid_truth(&env, 5.0, DEFAULT_GRID_CAP).unwrap();
        let best = (0..=5u32).map(|s| curve().quality(s, 1.0)).fold(f64::MIN, f64::max);
        assert_eq!(g.score, best);
        assert_eq!(g.evaluated, 6);
        assert_eq!(g, grid_truth(&env, 5.0, DEFAULT_GRID_CAP).unwrap());
        assert!(matches!(
            grid_truth(&env, 5.0, 3),
            Err(EnvError::TooLarge { size: 6, cap: 3 })
        ));
    }

    #[test]
    fn grid_truth_beats_random_draws() {
        let env = two_stage();
        let g = grid_truth(&env, 150.0, DEFAULT_GRID_CAP).unwrap();
        for a in sample_uniform(&env.spec, 150.0, 8, 100).unwrap() {
            assert!(env.true_score(&a) <= g.score);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CurveParams { decay: 1.0, ..curve() }.validate().is_err());
        assert!(CurveParams { a0: 0.0, ..curve() }.validate().is_err());
        assert!(CurveParams { peak0: 0.5, ..curve() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_curve() -> impl Strategy<Value = CurveParams> {
            (
                0.05f64..1.0,
                0.2f64..20.0,
                1.0f64..60.0,
                0.0f64..0.99,
                0.0f64..3.0,
                0.0f64..2.0,
            )
                .prop_map(|(a0, tau0, peak0, decay, kappa, gamma)| CurveParams {
                    a0,
                    tau0,
                    peak0,
                    decay,
                    kappa,
                    gamma,
                })
        }

        proptest! {
            #[test]
            fn nondecreasing_before_the_peak(c in any_curve(), up in 0.0f64..=1.0) {
                let peak = c.peak(up).floor() as u32;
                for s in 0..peak {
                    prop_assert!(c.quality(s + 1, up) >= c.quality(s, up));
                }
            }

            #[test]
            fn worse_upstream_never_shrinks_scale_or_peak(c in any_curve(), lo in 0.0f64..=1.0, hi in 0.0f64..=1.0) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                prop_assert!(c.tau(lo) >= c.tau(hi));
                prop_assert!(c.peak(lo) >= c.peak(hi));
            }

            #[test]
            fn quality_in_unit_interval(c in any_curve(), s in 0u32..2000, up in 0.0f64..=1.0) {
                let q = c.quality(s, up);
                prop_assert!((0.0..=1.0).contains(&q));
            }
        }
    }
}
