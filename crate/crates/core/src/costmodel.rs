//! Inference cost accounting and the normalized budget calculus.
//!
//! A budget unit is the cost of one pass of the base model (3B parameters by
//! default) on the base task shape (128 prompt tokens, 64 generated tokens).
//! Every cost metric is affine in the sample count, which is what lets
//! [`CostLine`] invert budgets in closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("model `{0}` has no layer/hidden dimensions; exact FLOPs need both")]
    MissingArchitecture(String),
    #[error("model `{0}` has no per-token prices")]
    MissingPrices(String),
    #[error("invalid model `{name}`: {reason}")]
    InvalidModel { name: String, reason: String },
    #[error("invalid task shape: {0}")]
    InvalidShape(String),
    #[error("invalid base configuration: {0}")]
    InvalidBase(String),
}

/// One candidate language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Non-embedding parameter count.
    pub params: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<u32>,
    /// Currency per 10^6 prompt tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_in: Option<f64>,
    /// Currency per 10^6 generated tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_out: Option<f64>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, params: f64) -> Self {
        Self {
            name: name.into(),
            params,
            layers: None,
            hidden: None,
            price_in: None,
            price_out: None,
        }
    }

    pub fn with_arch(mut self, layers: u32, hidden: u32) -> Self {
        self.layers = Some(layers);
        self.hidden = Some(hidden);
        self
    }

    pub fn with_prices(mut self, price_in: f64, price_out: f64) -> Self {
        self.price_in = Some(price_in);
        self.price_out = Some(price_out);
        self
    }

    /// Fills in layer/hidden dimensions from [`representative_arch`] when the
    /// model does not carry its own.
    pub fn with_default_arch(mut self) -> Self {
        if self.layers.is_none() && self.hidden.is_none() {
            if let Some((l, d)) = representative_arch(self.params) {
                self.layers = Some(l);
                self.hidden = Some(d);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |reason: &str| {
            Err(CostError::InvalidModel {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.params.is_finite() && self.params > 0.0) {
            return bad("params must be a positive finite number");
        }
        match (self.layers, self.hidden) {
            (None, None) => {}
            (Some(l), Some(d)) if l > 0 && d > 0 => {}
            (Some(_), Some(_)) => return bad("layers and hidden must be > 0"),
            _ => return bad("layers and hidden must be given together"),
        }
        for p in [self.price_in, self.price_out].into_iter().flatten() {
            if !(p.is_finite() && p >= 0.0) {
                return bad("prices must be finite and >= 0");
            }
        }
        Ok(())
    }

    fn arch(&self) -> Result<(f64, f64), CostError> {
        match (self.layers, self.hidden) {
            (Some(l), Some(d)) => Ok((l as f64, d as f64)),
            _ => Err(CostError::MissingArchitecture(self.name.clone())),
        }
    }

    fn prices(&self) -> Result<(f64, f64), CostError> {
        match (self.price_in, self.price_out) {
            (Some(i), Some(o)) => Ok((i, o)),
            _ => Err(CostError::MissingPrices(self.name.clone())),
        }
    }
}

/// Standard published architecture shapes used when exact FLOPs are requested
/// for a model that does not declare its own dimensions.
pub fn representative_arch(params: f64) -> Option<(u32, u32)> {
    const TABLE: [(f64, u32, u32); 3] = [(3e9, 28, 3072), (8e9, 32, 4096), (70e9, 80, 8192)];
    TABLE
        .iter()
        .find(|(p, _, _)| (params - p).abs() <= 1e-9 * p)
        .map(|&(_, l, d)| (l, d))
}

/// Average prompt and generation lengths of a subtask, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskShape {
    pub prompt_len: u32,
    pub gen_len: u32,
}

impl TaskShape {
    pub fn new(prompt_len: u32, gen_len: u32) -> Self {
        Self { prompt_len, gen_len }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if self.prompt_len == 0 || self.gen_len == 0 {
            return Err(CostError::InvalidShape(format!(
                "prompt_len and gen_len must be >= 1, got ({}, {})",
                self.prompt_len, self.gen_len
            )));
        }
        Ok(())
    }
}

/// The reference configuration that defines one budget unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub params: f64,
    pub prompt: u32,
    pub gen: u32,
    /// Architecture of the base model for exact FLOPs; falls back to
    /// [`representative_arch`] of `params`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<u32>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            params: 3e9,
            prompt: 128,
            gen: 64,
            layers: None,
            hidden: None,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.params.is_finite() && self.params > 0.0) || self.prompt == 0 || self.gen == 0 {
            return Err(CostError::InvalidBase("params, prompt and gen must all be > 0".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape::new(self.prompt, self.gen)
    }

    /// The base model as a [`ModelSpec`], with architecture resolved if known.
    pub fn model(&self) -> ModelSpec {
        let mut m = ModelSpec::new("base", self.params);
        m.layers = self.layers;
        m.hidden = self.hidden;
        m.with_default_arch()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMetric {
    /// Dense-layer FLOPs only: attention terms dropped.
    #[default]
    FlopsSimplified,
    /// Full per-phase FLOPs including attention terms.
    FlopsExact,
    /// API price in currency; budgets are money, not base-pass units.
    ApiPrice,
}

impl std::str::FromStr for CostMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flops-simplified" | "flops" => Ok(Self::FlopsSimplified),
            "flops-exact" => Ok(Self::FlopsExact),
            "api-price" | "price" => Ok(Self::ApiPrice),
            other => Err(format!(
                "unknown cost metric `{other}` (expected flops-simplified, flops-exact or api-price)"
            )),
        }
    }
}

/// How prompt tokens are billed when drawing several samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceBilling {
    /// One request with `n` completions: prompt charged once.
    #[default]
    SharedPrompt,
    /// One request per sample: prompt charged every time.
    PerRequest,
}

/// `2M + 4LDt`: FLOPs to process one token with `t` preceding tokens.
pub fn flops_per_token(model: &ModelSpec, t: f64) -> Result<f64, CostError> {
    let (l, d) = model.arch()?;
    Ok(2.0 * model.params + 4.0 * l * d * t)
}

/// Prompt encoding: `2 M N_p + 2 L D N_p (N_p + 1)`.
pub fn flops_prompt(model: &ModelSpec, shape: TaskShape) -> Result<f64, CostError> {
    let (l, d) = model.arch()?;
    let np = shape.prompt_len as f64;
    Ok(2.0 * model.params * np + 2.0 * l * d * np * (np + 1.0))
}

/// Decoding one sample: `2 M N_d + 2 L D N_d (2 N_p + N_d + 1)`.
pub fn flops_decode(model: &ModelSpec, shape: TaskShape) -> Result<f64, CostError> {
    let (l, d) = model.arch()?;
    let np = shape.prompt_len as f64;
    let nd = shape.gen_len as f64;
    Ok(2.0 * model.params * nd + 2.0 * l * d * nd * (2.0 * np + nd + 1.0))
}

/// Prompt encoded once and shared by all `samples` decodes.
pub fn flops_total(model: &ModelSpec, samples: u32, shape: TaskShape) -> Result<f64, CostError> {
    Ok(flops_prompt(model, shape)? + samples as f64 * flops_decode(model, shape)?)
}

/// Fraction of exact total FLOPs contributed by attention terms.
pub fn attention_share(model: &ModelSpec, samples: u32, shape: TaskShape) -> Result<f64, CostError> {
    let total = flops_total(model, samples, shape)?;
    let dense = 2.0 * model.params * (shape.prompt_len as f64 + samples as f64 * shape.gen_len as f64);
    Ok((total - dense) / total)
}

/// Normalized budget under the simplified FLOPs metric, in base-pass units.
pub fn normalized_budget(model: &ModelSpec, samples: u32, shape: TaskShape, base: &BaseConfig) -> f64 {
    CostLine::simplified(model, shape, base).eval(samples)
}

/// Largest `S >= 0` with `normalized_budget(S) <= budget_cap`, or `None` when
/// even `S = 0` does not fit.
pub fn max_samples(model: &ModelSpec, shape: TaskShape, budget_cap: f64, base: &BaseConfig) -> Option<u32> {
    CostLine::simplified(model, shape, base).max_samples(budget_cap)
}

/// Price of one configuration: `(N_p p_in + S N_d p_out) / 10^6` under shared
/// prompt billing.
pub fn price_cost(model: &ModelSpec, samples: u32, shape: TaskShape, billing: PriceBilling) -> Result<f64, CostError> {
    Ok(CostLine::price(model, shape, billing)?.eval(samples))
}

/// Sample count the target configuration can afford for the cost of the source
/// configuration. May be fractional or negative; callers floor or clamp.
pub fn equivalent_samples(
    source: &ModelSpec,
    source_samples: u32,
    source_shape: TaskShape,
    target: &ModelSpec,
    target_shape: TaskShape,
    metric: CostMetric,
) -> Result<f64, CostError> {
    match metric {
        CostMetric::FlopsSimplified => {
            let alpha = source.params / target.params;
            let beta1 = source_shape.prompt_len as f64 / source_shape.gen_len as f64;
            let beta2 = source_shape.prompt_len as f64 / target_shape.prompt_len as f64;
            let beta3 = target_shape.prompt_len as f64 / target_shape.gen_len as f64;
            Ok(beta3 * ((alpha * beta2 / beta1) * (beta1 + source_samples as f64) - 1.0))
        }
        CostMetric::FlopsExact => {
            let total = flops_total(source, source_samples, source_shape)?;
            Ok((total - flops_prompt(target, target_shape)?) / flops_decode(target, target_shape)?)
        }
        CostMetric::ApiPrice => {
            let total = price_cost(source, source_samples, source_shape, PriceBilling::SharedPrompt)?;
            let line = CostLine::price(target, target_shape, PriceBilling::SharedPrompt)?;
            Ok((total - line.eval(0)) / (line.eval(1) - line.eval(0)))
        }
    }
}

/// Cost of one (model, shape) pair as an affine function of the sample count.
///
/// All budget arithmetic in the crate goes through [`CostLine::eval`], so
/// feasibility checks, enumeration and inversion agree bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostLine {
    Simplified {
        alpha: f64,
        beta1: f64,
        beta2: f64,
        beta3: f64,
    },
    Exact {
        prompt: f64,
        decode: f64,
        base_prompt: f64,
        base_decode: f64,
    },
    Price {
        fixed: f64,
        per_sample: f64,
    },
}

impl CostLine {
    pub fn simplified(model: &ModelSpec, shape: TaskShape, base: &BaseConfig) -> Self {
        let np = shape.prompt_len as f64;
        CostLine::Simplified {
            alpha: model.params / base.params,
            beta1: np / shape.gen_len as f64,
            beta2: np / base.prompt as f64,
            beta3: base.prompt as f64 / base.gen as f64,
        }
    }

    pub fn exact(model: &ModelSpec, shape: TaskShape, base: &BaseConfig) -> Result<Self, CostError> {
        let base_model = base.model();
        Ok(CostLine::Exact {
            prompt: flops_prompt(model, shape)?,
            decode: flops_decode(model, shape)?,
            base_prompt: flops_prompt(&base_model, base.shape())?,
            base_decode: flops_decode(&base_model, base.shape())?,
        })
    }

    pub fn price(model: &ModelSpec, shape: TaskShape, billing: PriceBilling) -> Result<Self, CostError> {
        let (p_in, p_out) = model.prices()?;
        let prompt = shape.prompt_len as f64 * p_in / 1e6;
        let gen = shape.gen_len as f64 * p_out / 1e6;
        Ok(match billing {
            PriceBilling::SharedPrompt => CostLine::Price {
                fixed: prompt,
                per_sample: gen,
            },
            PriceBilling::PerRequest => CostLine::Price {
                fixed: 0.0,
                per_sample: prompt + gen,
            },
        })
    }

    pub fn new(
        model: &ModelSpec,
        shape: TaskShape,
        metric: CostMetric,
        base: &BaseConfig,
        billing: PriceBilling,
    ) -> Result<Self, CostError> {
        match metric {
            CostMetric::FlopsSimplified => Ok(Self::simplified(model, shape, base)),
            CostMetric::FlopsExact => Self::exact(model, shape, base),
            CostMetric::ApiPrice => Self::price(model, shape, billing),
        }
    }

    pub fn eval(&self, samples: u32) -> f64 {
        let s = samples as f64;
        match *self {
            CostLine::Simplified {
                alpha,
                beta1,
                beta2,
                beta3,
            } => beta3 * ((alpha * beta2 / beta1) * (beta1 + s) - 1.0),
            CostLine::Exact {
                prompt,
                decode,
                base_prompt,
                base_decode,
            } => (prompt + s * decode - base_prompt) / base_decode,
            CostLine::Price { fixed, per_sample } => fixed + s * per_sample,
        }
    }

    /// Largest `S` with `eval(S) <= cap`.
    pub fn max_samples(&self, cap: f64) -> Option<u32> {
        self.max_samples_where(|s| self.eval(s) <= cap, cap - self.eval(0))
    }

    /// Largest `S` satisfying `fits`, where `fits` is monotone (true then
    /// false) in `S` and `headroom` approximates the budget left above `S = 0`.
    pub(crate) fn max_samples_where(&self, fits: impl Fn(u32) -> bool, headroom: f64) -> Option<u32> {
        if !fits(0) {
            return None;
        }
        let slope = self.eval(1) - self.eval(0);
        let guess = if slope > 0.0 {
            (headroom / slope).floor()
        } else {
            u32::MAX as f64
        };
        let mut s = if guess.is_nan() || guess < 0.0 {
            0
        } else if guess >= u32::MAX as f64 {
            u32::MAX - 1
        } else {
            guess as u32
        };
        // The floor can be off by one ulp-driven step either way.
        while s > 0 && !fits(s) {
            s -= 1;
        }
        while s < u32::MAX && fits(s + 1) {
            s += 1;
        }
        Some(s)
    }
}

/// Budget accounting under one metric and base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub metric: CostMetric,
    pub base: BaseConfig,
    pub billing: PriceBilling,
}

impl CostModel {
    pub fn line(&self, model: &ModelSpec, shape: TaskShape) -> Result<CostLine, CostError> {
        CostLine::new(model, shape, self.metric, &self.base, self.billing)
    }

    pub fn cost(&self, model: &ModelSpec, samples: u32, shape: TaskShape) -> Result<f64, CostError> {
        Ok(self.line(model, shape)?.eval(samples))
    }

    pub fn max_samples(&self, model: &ModelSpec, shape: TaskShape, cap: f64) -> Result<Option<u32>, CostError> {
        Ok(self.line(model, shape)?.max_samples(cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama3b() -> ModelSpec {
        ModelSpec::new("llama-3b", 3e9).with_arch(28, 3072)
    }

    fn base() -> BaseConfig {
        BaseConfig::default()
    }

    /// Closed form, written independently of `CostLine`.
    fn closed_form(params: f64, s: f64, np: f64, nd: f64) -> f64 {
        let alpha = params / 3e9;
        let beta1 = np / nd;
        let beta2 = np / 128.0;
        2.0 * alpha * beta2 * s / beta1 + 2.0 * (alpha * beta2 - 1.0)
    }

    #[test]
    fn per_token_flops() {
        assert_eq!(flops_per_token(&llama3b(), 0.0).unwrap(), 6.0e9);
        assert_eq!(flops_per_token(&llama3b(), 100.0).unwrap(), 6.0344064e9);
        let big = ModelSpec::new("70b", 70e9).with_arch(80, 8192);
        let f = flops_per_token(&big, 2048.0).unwrap();
        assert!((f - 1.45368709120e11).abs() < 1.0);
    }

    #[test]
    fn missing_arch_is_an_error() {
        let m = ModelSpec::new("bare", 3e9);
        assert_eq!(
            flops_per_token(&m, 1.0),
            Err(CostError::MissingArchitecture("bare".into()))
        );
        assert!(flops_total(&m, 1, TaskShape::new(1, 1)).is_err());
    }

    #[test]
    fn phase_sums_match_per_token_sums() {
        // Sum the per-token formula directly over each phase.
        let m = llama3b();
        let shape = TaskShape::new(128, 64);
        let prompt: f64 = (1..=128).map(|t| flops_per_token(&m, t as f64).unwrap()).sum();
        let decode: f64 = (1..=64).map(|t| flops_per_token(&m, (128 + t) as f64).unwrap()).sum();
        assert!((flops_prompt(&m, shape).unwrap() - prompt).abs() / prompt < 1e-12);
        assert!((flops_decode(&m, shape).unwrap() - decode).abs() / decode < 1e-12);
        // Hand evaluation: 2*3e9*128 + 2*28*3072*128*129 = 7.70840592384e11,
        // 2*3e9*64 + 2*28*3072*64*321 = 3.87534225408e11.
        let total = flops_total(&m, 1, shape).unwrap();
        assert_eq!(total, 7.70840592384e11 + 3.87534225408e11);
    }

    #[test]
    fn total_is_linear_in_samples() {
        let m = llama3b();
        let shape = TaskShape::new(1024, 256);
        assert_eq!(flops_total(&m, 0, shape).unwrap(), flops_prompt(&m, shape).unwrap());
        let d = flops_total(&m, 2, shape).unwrap() - flops_total(&m, 1, shape).unwrap();
        assert_eq!(d, flops_decode(&m, shape).unwrap());
    }

    #[test]
    fn normalized_budget_examples() {
        let b = base();
        let s = |p: f64, n: u32, np: u32, nd: u32| {
            normalized_budget(&ModelSpec::new("m", p), n, TaskShape::new(np, nd), &b)
        };
        assert_eq!(s(3e9, 1, 128, 64), 1.0);
        assert_eq!(s(72e9, 1, 2048, 128).round(), 814.0);
        assert_eq!(s(70e9, 10, 1024, 2048).round(), 7838.0);
        assert_eq!(s(8e9, 5, 256, 64).round(), 22.0);
    }

    #[test]
    fn normalized_budget_step_is_constant() {
        let b = base();
        let m = ModelSpec::new("m", 32e9);
        let shape = TaskShape::new(1024, 256);
        let step = 2.0 * (32.0 / 3.0) * 8.0 / 4.0;
        for s in 0..50 {
            let d = normalized_budget(&m, s + 1, shape, &b) - normalized_budget(&m, s, shape, &b);
            assert!((d - step).abs() < 1e-9);
        }
    }

    /// Appendix-style bounded scan, kept as the oracle for the inversion.
    fn scan_max_samples(m: &ModelSpec, shape: TaskShape, cap: f64) -> Option<u32> {
        let b = base();
        if normalized_budget(m, 0, shape, &b) > cap {
            return None;
        }
        (1..100_000)
            .find(|&s| normalized_budget(m, s, shape, &b) > cap)
            .map(|s| s - 1)
    }

    #[test]
    fn max_samples_examples() {
        let b = base();
        let m3 = ModelSpec::new("3b", 3e9);
        let chatdev_code = TaskShape::new(1024, 1024);
        assert_eq!(max_samples(&m3, chatdev_code, 1767.33, &b), Some(109));
        assert_eq!(scan_max_samples(&m3, chatdev_code, 1767.33), Some(109));
        let retrieval = TaskShape::new(2048, 128);
        assert_eq!(max_samples(&m3, retrieval, 814.0, &b), Some(392));
        assert_eq!(scan_max_samples(&m3, retrieval, 814.0), Some(392));
        assert_eq!(max_samples(&m3, TaskShape::new(128, 64), 1.0, &b), Some(1));
    }

    #[test]
    fn max_samples_infeasible_cap() {
        let b = base();
        let m = ModelSpec::new("72b", 72e9);
        // S = 0 already costs 766 on this shape.
        assert_eq!(max_samples(&m, TaskShape::new(2048, 128), 700.0, &b), None);
        assert_eq!(max_samples(&m, TaskShape::new(2048, 128), 766.0, &b), Some(0));
    }

    #[test]
    fn equivalent_samples_identity_and_base_unit() {
        let m = ModelSpec::new("m", 8e9).with_arch(32, 4096);
        let shape = TaskShape::new(256, 64);
        for metric in [CostMetric::FlopsSimplified, CostMetric::FlopsExact] {
            let k = equivalent_samples(&m, 7, shape, &m, shape, metric).unwrap();
            assert!((k - 7.0).abs() < 1e-9, "{metric:?}: {k}");
        }
        let big = ModelSpec::new("72b", 72e9);
        let small = ModelSpec::new("3b", 3e9);
        let s = equivalent_samples(
            &big,
            1,
            TaskShape::new(2048, 128),
            &small,
            TaskShape::new(128, 64),
            CostMetric::FlopsSimplified,
        )
        .unwrap();
        assert!((s - 814.0).abs() < 1e-9);
    }

    #[test]
    fn exact_and_simplified_conversions_are_close() {
        let big = ModelSpec::new("70b", 70e9).with_arch(80, 8192);
        let small = llama3b();
        let (src, dst) = (TaskShape::new(2048, 128), TaskShape::new(128, 64));
        let exact = equivalent_samples(&big, 1, src, &small, dst, CostMetric::FlopsExact).unwrap();
        let simple = equivalent_samples(&big, 1, src, &small, dst, CostMetric::FlopsSimplified).unwrap();
        // Oracle from the phase formulas by hand: (tot_70b - prompt_3b) / decode_3b.
        let tot = 2.0 * 70e9 * 2048.0
            + 2.0 * 80.0 * 8192.0 * 2048.0 * 2049.0
            + 2.0 * 70e9 * 128.0
            + 2.0 * 80.0 * 8192.0 * 128.0 * (4096.0 + 128.0 + 1.0);
        let oracle = (tot - 7.70840592384e11) / 3.87534225408e11;
        assert!((exact - oracle).abs() / oracle < 1e-12);
        assert!(((exact - simple) / exact).abs() < 0.05);
    }

    #[test]
    fn price_examples() {
        let llama3b = ModelSpec::new("llama-3.2-3b", 3e9).with_prices(0.06, 0.06);
        let c = price_cost(&llama3b, 1, TaskShape::new(128, 64), PriceBilling::SharedPrompt).unwrap();
        assert!((c - 1.152e-5).abs() < 1e-15);
        let c0 = price_cost(&llama3b, 0, TaskShape::new(128, 64), PriceBilling::SharedPrompt).unwrap();
        assert!((c0 - 128.0 * 0.06 / 1e6).abs() < 1e-18);
        let qwen = ModelSpec::new("qwen-72b", 72e9).with_prices(1.2, 1.2);
        let c = price_cost(&qwen, 10, TaskShape::new(1024, 2048), PriceBilling::SharedPrompt).unwrap();
        assert!((c - 0.0258048).abs() < 1e-12);
        let per_req = price_cost(&qwen, 10, TaskShape::new(1024, 2048), PriceBilling::PerRequest).unwrap();
        assert!((per_req - 10.0 * 3072.0 * 1.2 / 1e6).abs() < 1e-12);
        assert_eq!(
            price_cost(
                &ModelSpec::new("x", 1e9),
                1,
                TaskShape::new(1, 1),
                PriceBilling::SharedPrompt
            ),
            Err(CostError::MissingPrices("x".into()))
        );
    }

    #[test]
    fn model_validation() {
        assert!(ModelSpec::new("ok", 1e9).validate().is_ok());
        assert!(ModelSpec::new("zero", 0.0).validate().is_err());
        let mut half = ModelSpec::new("half", 1e9);
        half.layers = Some(4);
        assert!(half.validate().is_err());
        assert!(ModelSpec::new("neg", 1e9).with_prices(-1.0, 0.0).validate().is_err());
        assert!(TaskShape::new(0, 5).validate().is_err());
    }

    #[test]
    fn representative_defaults() {
        assert_eq!(representative_arch(3e9), Some((28, 3072)));
        assert_eq!(representative_arch(8e9), Some((32, 4096)));
        assert_eq!(representative_arch(70e9), Some((80, 8192)));
        assert_eq!(representative_arch(7e9), None);
        let m = ModelSpec::new("x", 70e9).with_arch(1, 1).with_default_arch();
        assert_eq!((m.layers, m.hidden), (Some(1), Some(1)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn closed_and_ratio_forms_agree(
                params in 1e8f64..2e11,
                s in 0u32..10_000,
                np in 1u32..8192,
                nd in 1u32..8192,
            ) {
                let ratio = normalized_budget(&ModelSpec::new("m", params), s, TaskShape::new(np, nd), &base());
                let closed = closed_form(params, s as f64, np as f64, nd as f64);
                let scale = ratio.abs().max(closed.abs()).max(1.0);
                prop_assert!((ratio - closed).abs() <= 1e-9 * scale);
            }

            #[test]
            fn budget_strictly_increasing(
                params in 1e8f64..1e11,
                s in 0u32..5000,
                np in 1u32..4096,
                nd in 1u32..4096,
            ) {
                let shape = TaskShape::new(np, nd);
                let b = base();
                let m = ModelSpec::new("m", params);
                let bigger = ModelSpec::new("m2", params * 1.5);
                prop_assert!(normalized_budget(&m, s + 1, shape, &b) > normalized_budget(&m, s, shape, &b));
                prop_assert!(normalized_budget(&bigger, s, shape, &b) > normalized_budget(&m, s, shape, &b));
            }

            #[test]
            fn max_samples_is_galois(
                params in 1e9f64..1e11,
                np in 1u32..4096,
                nd in 1u32..4096,
                cap in 0f64..50_000.0,
            ) {
                let m = ModelSpec::new("m", params);
                let shape = TaskShape::new(np, nd);
                let b = base();
                match max_samples(&m, shape, cap, &b) {
                    Some(s) => {
                        prop_assert!(normalized_budget(&m, s, shape, &b) <= cap);
                        prop_assert!(normalized_budget(&m, s + 1, shape, &b) > cap);
                    }
                    None => prop_assert!(normalized_budget(&m, 0, shape, &b) > cap),
                }
            }
        }
    }
}
