//! Seeded synthetic pipelines.
//!
//! Every parameter is drawn uniformly from the range written next to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CurveParams, EnvError, SyntheticEnv};
use crate::costmodel::{ModelSpec, TaskShape};
use crate::searchspace::{PipelineSpec, SubtaskSpec};

pub const PRESET_NAMES: [&str; 3] = ["retrieval-qa", "three-stage", "flat"];

type Range = (f64, f64);

/// Ranges for one curve; a degenerate range pins the value.
#[derive(Debug, Clone, Copy)]
struct CurveRanges {
    a0: Range,
    tau0: Range,
    peak0: Range,
    decay: Range,
    kappa: Range,
    gamma: Range,
}

impl CurveRanges {
    fn draw(&self, rng: &mut ChaCha8Rng) -> CurveParams {
        let mut u = |(lo, hi): Range| if hi > lo { rng.random_range(lo..hi) } else { lo };
        CurveParams {
            a0: u(self.a0),
            tau0: u(self.tau0),
            peak0: u(self.peak0),
            decay: u(self.decay),
            kappa: u(self.kappa),
            gamma: u(self.gamma),
        }
    }
}

const FIXED_ZERO: Range = (0.0, 0.0);

fn qwen() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new("qwen2.5-7b", 7e9).with_prices(0.30, 0.30),
        ModelSpec::new("qwen2.5-32b", 32e9).with_prices(0.80, 0.80),
        ModelSpec::new("qwen2.5-72b", 72e9).with_prices(1.20, 1.20),
    ]
}

fn llama() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new("llama-3.2-3b", 3e9).with_prices(0.06, 0.06),
        ModelSpec::new("llama-3.1-8b", 8e9).with_prices(0.18, 0.18),
        ModelSpec::new("llama-3.1-70b", 70e9).with_prices(0.88, 0.88),
    ]
}

fn retrieval_qa_spec() -> PipelineSpec {
    let mut spec = PipelineSpec::new(
        "retrieval-qa",
        vec![
            SubtaskSpec::new("retrieval", TaskShape::new(2048, 128), qwen())
                .with_min_samples(1)
                .with_metric("retrieval-f1"),
            SubtaskSpec::new("qa", TaskShape::new(256, 64), llama())
                .with_min_samples(1)
                .with_metric("exact-match"),
        ],
    );
    spec.description = "Multi-hop question answering: passage retrieval followed by answer generation.".into();
    spec.main_metric = "exact-match".into();
    spec
}

fn three_stage_spec() -> PipelineSpec {
    let mut spec = PipelineSpec::new(
        "three-stage",
        vec![
            SubtaskSpec::new("coding", TaskShape::new(1024, 1024), llama())
                .with_min_samples(1)
                .with_metric("pass-rate"),
            SubtaskSpec::new("static-test", TaskShape::new(1024, 512), llama())
                .with_min_samples(1)
                .with_metric("pass-rate"),
            SubtaskSpec::new("dynamic-test", TaskShape::new(1024, 256), llama())
                .with_min_samples(1)
                .with_metric("consistency"),
        ],
    );
    spec.description = "Software development: code generation, static review, dynamic testing.".into();
    spec.main_metric = "consistency".into();
    spec
}

// Retrieval: the 72B model is far ahead and saturates within a couple of
// samples, so one or two calls of it beat any amount of the smaller ones.
const RETRIEVAL: [CurveRanges; 3] = [
    CurveRanges {
        a0: (0.30, 0.40),
        tau0: (2.0, 4.0),
        peak0: (1.0, 1.0),
        decay: FIXED_ZERO,
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
    CurveRanges {
        a0: (0.55, 0.65),
        tau0: (1.0, 2.0),
        peak0: (1.0, 1.0),
        decay: FIXED_ZERO,
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
    CurveRanges {
        a0: (0.82, 0.90),
        tau0: (0.4, 0.6),
        peak0: (1.0, 1.0),
        decay: FIXED_ZERO,
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
];

// QA: similar ceilings, but the 3B model saturates long before its peak while
// the larger models peak early relative to their saturation scale.
const QA: [CurveRanges; 3] = [
    CurveRanges {
        a0: (0.82, 0.86),
        tau0: (4.0, 7.0),
        peak0: (30.0, 45.0),
        decay: (0.06, 0.12),
        kappa: (0.8, 1.5),
        gamma: (0.8, 1.2),
    },
    CurveRanges {
        a0: (0.80, 0.86),
        tau0: (4.0, 6.0),
        peak0: (10.0, 14.0),
        decay: (0.08, 0.15),
        kappa: (0.8, 1.5),
        gamma: (0.8, 1.2),
    },
    CurveRanges {
        a0: (0.84, 0.88),
        tau0: (2.0, 3.0),
        peak0: (3.0, 5.0),
        decay: (0.08, 0.15),
        kappa: (0.8, 1.5),
        gamma: (0.8, 1.2),
    },
];

const CODING: [CurveRanges; 3] = [
    CurveRanges {
        a0: (0.50, 0.60),
        tau0: (3.0, 6.0),
        peak0: (15.0, 25.0),
        decay: (0.05, 0.10),
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
    CurveRanges {
        a0: (0.75, 0.85),
        tau0: (2.0, 3.0),
        peak0: (6.0, 9.0),
        decay: (0.05, 0.10),
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
    CurveRanges {
        a0: (0.85, 0.92),
        tau0: (0.5, 1.0),
        peak0: (1.0, 1.0),
        decay: FIXED_ZERO,
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
];

const STATIC_TEST: [CurveRanges; 3] = [
    CurveRanges {
        a0: (0.70, 0.80),
        tau0: (3.0, 5.0),
        peak0: (20.0, 30.0),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
    CurveRanges {
        a0: (0.72, 0.82),
        tau0: (2.0, 4.0),
        peak0: (8.0, 12.0),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
    CurveRanges {
        a0: (0.80, 0.88),
        tau0: (0.8, 1.2),
        peak0: (2.5, 3.5),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
];

const DYNAMIC_TEST: [CurveRanges; 3] = [
    CurveRanges {
        a0: (0.85, 0.90),
        tau0: (3.0, 5.0),
        peak0: (30.0, 45.0),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
    CurveRanges {
        a0: (0.80, 0.86),
        tau0: (2.0, 4.0),
        peak0: (8.0, 12.0),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
    CurveRanges {
        a0: (0.80, 0.86),
        tau0: (1.0, 1.5),
        peak0: (3.0, 5.0),
        decay: (0.05, 0.10),
        kappa: (0.5, 1.2),
        gamma: (0.5, 1.0),
    },
];

// Flat: one curve per subtask, shared by every model.
const FLAT: [CurveRanges; 2] = [
    CurveRanges {
        a0: (0.60, 0.80),
        tau0: (1.0, 3.0),
        peak0: (5.0, 10.0),
        decay: (0.05, 0.10),
        kappa: FIXED_ZERO,
        gamma: FIXED_ZERO,
    },
    CurveRanges {
        a0: (0.70, 0.85),
        tau0: (2.0, 5.0),
        peak0: (10.0, 20.0),
        decay: (0.05, 0.10),
        kappa: (0.8, 1.5),
        gamma: (0.8, 1.2),
    },
];

fn preset_rng(name: &str, seed: u64) -> ChaCha8Rng {
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Builds a named synthetic pipeline with parameters drawn from `seed`.
pub fn make_preset(name: &str, seed: u64) -> Result<SyntheticEnv, EnvError> {
    let mut rng = preset_rng(name, seed);
    let draw_all = |rng: &mut ChaCha8Rng, stages: &[&[CurveRanges; 3]]| -> Vec<Vec<CurveParams>> {
        stages
            .iter()
            .map(|st| st.iter().map(|r| r.draw(rng)).collect())
            .collect()
    };
    let (spec, params) = match name {
        "retrieval-qa" => (retrieval_qa_spec(), draw_all(&mut rng, &[&RETRIEVAL, &QA])),
        "three-stage" => (
            three_stage_spec(),
            draw_all(&mut rng, &[&CODING, &STATIC_TEST, &DYNAMIC_TEST]),
        ),
        "flat" => {
            let mut spec = retrieval_qa_spec();
            spec.name = "flat".into();
            spec.description = "Null surface: every model behaves identically.".into();
            let params = FLAT.iter().map(|r| vec![r.draw(&mut rng); 3]).collect();
            (spec, params)
        }
        other => return Err(EnvError::UnknownPreset(other.to_string())),
    };
    SyntheticEnv::new(spec, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        for name in PRESET_NAMES {
            assert_eq!(make_preset(name, 7).unwrap(), make_preset(name, 7).unwrap());
            assert_ne!(
                make_preset(name, 7).unwrap().params,
                make_preset(name, 8).unwrap().params
            );
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(make_preset("nope", 0), Err(EnvError::UnknownPreset(_))));
    }

    #[test]
    fn draws_stay_in_range() {
        for seed in 0..50 {
            let env = make_preset("retrieval-qa", seed).unwrap();
            for (curves, ranges) in env.params.iter().zip([&RETRIEVAL, &QA]) {
                for (c, r) in curves.iter().zip(ranges.iter()) {
                    assert!(c.a0 >= r.a0.0 && c.a0 <= r.a0.1);
                    assert!(c.tau0 >= r.tau0.0 && c.tau0 <= r.tau0.1);
                    assert!(c.decay >= r.decay.0 && c.decay <= r.decay.1);
                }
            }
            assert!(env.params[1].iter().all(|c| c.decay > 0.0 && c.kappa > 0.0));
        }
    }

    #[test]
    fn flat_models_are_identical() {
        let env = make_preset("flat", 2).unwrap();
        for curves in &env.params {
            assert!(curves.iter().all(|c| c == &curves[0]));
        }
    }
}
