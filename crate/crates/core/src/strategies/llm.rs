//! Language-model agent: guideline and trial prompts sent to a chat
//! endpoint, with response validation and a repair loop.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Context, Guideline, Proposal, Strategy, StrategyError};
use crate::archive::Archive;
use crate::searchspace::{allocation_budget, Allocation, Choice, PipelineSpec};

pub const PLACEHOLDERS: [&str; 10] = [
    "task_name",
    "task_desc",
    "subtask_specification",
    "model_space",
    "budget",
    "metrics",
    "main_metric",
    "history",
    "experience",
    "batch_size",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

pub trait ChatBackend {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, StrategyError>;
}

/// Chat-completions style HTTP endpoint.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    temperature: f64,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: &LlmConfig) -> Result<Self, StrategyError> {
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| StrategyError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            temperature: config.temperature,
            token,
            agent,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, StrategyError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": messages,
        });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| StrategyError::Endpoint(e.to_string()))?;
        let reply: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| StrategyError::Endpoint(e.to_string()))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| StrategyError::Endpoint(format!("no message content in response {reply}")))
    }
}

/// Prompt texts with `{placeholder}` fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub system: String,
    pub initial_guidelines: String,
    pub noninitial_guidelines: String,
    pub trial_generation: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            system: include_str!("../../templates/system.txt").trim_end().to_string(),
            initial_guidelines: include_str!("../../templates/initial_guidelines.txt").to_string(),
            noninitial_guidelines: include_str!("../../templates/noninitial_guidelines.txt").to_string(),
            trial_generation: include_str!("../../templates/trial_generation.txt").to_string(),
        }
    }
}

/// `{name}` fields whose name is a lowercase identifier.
fn referenced(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')) {
            Some(end) if end > 0 && after[end..].starts_with('}') => {
                out.push(&after[..end]);
                rest = &after[end + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

impl Templates {
    /// Reads `system.txt`, `initial_guidelines.txt`,
    /// `noninitial_guidelines.txt` and `trial_generation.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, StrategyError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| StrategyError::Config(format!("{name}: {e}")))
        };
        let t = Self {
            system: read("system.txt")?.trim_end().to_string(),
            initial_guidelines: read("initial_guidelines.txt")?,
            noninitial_guidelines: read("noninitial_guidelines.txt")?,
            trial_generation: read("trial_generation.txt")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        for t in [
            &self.initial_guidelines,
            &self.noninitial_guidelines,
            &self.trial_generation,
        ] {
            if let Some(bad) = referenced(t).into_iter().find(|p| !PLACEHOLDERS.contains(p)) {
                return Err(StrategyError::Config(format!("unknown template placeholder {{{bad}}}")));
            }
        }
        if !referenced(&self.trial_generation).contains(&"batch_size") {
            return Err(StrategyError::Config(
                "trial template must reference {batch_size}".into(),
            ));
        }
        Ok(())
    }
}

pub fn fill(template: &str, values: &[(&str, String)]) -> String {
    values
        .iter()
        .fold(template.to_string(), |t, (k, v)| t.replace(&format!("{{{k}}}"), v))
}

/// How much search history the agent sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMode {
    /// Archive history and model-written guidelines.
    Full,
    /// No history and no guidelines (zero-shot).
    None,
    /// Archive history, with this text as the starting guideline.
    Primed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: usize,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub history: HistoryMode,
    /// Most recent trials included in prompts.
    pub history_window: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.7,
            max_retries: 3,
            token_env: None,
            timeout_secs: 120,
            history: HistoryMode::Full,
            history_window: 50,
        }
    }
}

/// Proposes allocations by prompting a chat model.
pub struct LlmAgent {
    pub config: LlmConfig,
    pub templates: Templates,
    backend: Box<dyn ChatBackend>,
    guideline: Option<String>,
    /// Allocations filled in by random draws after the repair loop failed.
    pub fallbacks: usize,
    /// Validation errors seen across all proposals.
    pub rejected: Vec<String>,
}

impl LlmAgent {
    pub fn new(config: LlmConfig, backend: Box<dyn ChatBackend>) -> Result<Self, StrategyError> {
        Self::with_templates(config, backend, Templates::default())
    }

    pub fn with_templates(
        config: LlmConfig,
        backend: Box<dyn ChatBackend>,
        templates: Templates,
    ) -> Result<Self, StrategyError> {
        templates.validate()?;
        let guideline = match &config.history {
            HistoryMode::Primed(text) => Some(text.clone()),
            _ => None,
        };
        Ok(Self {
            config,
            templates,
            backend,
            guideline,
            fallbacks: 0,
            rejected: Vec::new(),
        })
    }

    pub fn http(config: LlmConfig) -> Result<Self, StrategyError> {
        let backend = HttpBackend::new(&config)?;
        Self::new(config, Box::new(backend))
    }

    fn ask(&mut self, messages: &[ChatMessage]) -> Result<String, StrategyError> {
        let mut last = None;
        for _ in 0..=self.config.max_retries {
            match self.backend.complete(messages) {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| StrategyError::Endpoint("no attempt made".into())))
    }

    fn values(&self, spec: &PipelineSpec, total: f64, archive: &Archive, batch: usize) -> Vec<(&'static str, String)> {
        let history = match self.config.history {
            HistoryMode::None => "None".to_string(),
            _ => describe_history(spec, archive, self.config.history_window),
        };
        vec![
            ("task_name", spec.name.clone()),
            ("task_desc", spec.description.clone()),
            ("subtask_specification", describe_subtasks(spec)),
            ("model_space", describe_models(spec)),
            ("budget", format!("{total:.2}")),
            ("metrics", describe_metrics(spec)),
            ("main_metric", spec.main_metric.clone()),
            ("history", history),
            ("experience", self.guideline.clone().unwrap_or_else(|| "None".into())),
            ("batch_size", batch.to_string()),
        ]
    }

    /// Summarizes the archive into a text guideline.
    pub fn guidelines(&mut self, spec: &PipelineSpec, total: f64, archive: &Archive) -> Result<String, StrategyError> {
        let initial = self.guideline.is_none()
            || archive.guidelines().next().is_none() && !matches!(self.config.history, HistoryMode::Primed(_));
        let template = if initial {
            &self.templates.initial_guidelines
        } else {
            &self.templates.noninitial_guidelines
        };
        let prompt = fill(template, &self.values(spec, total, archive, 0));
        let messages = [
            ChatMessage::new("system", self.templates.system.clone()),
            ChatMessage::new("user", prompt),
        ];
        let text = self.ask(&messages)?;
        self.guideline = Some(text.clone());
        Ok(text)
    }
}

fn describe_subtasks(spec: &PipelineSpec) -> String {
    spec.subtasks
        .iter()
        .enumerate()
        .map(|(i, st)| {
            format!(
                "subtask_{} = {}: prompt length {}, generation length {}, models [{}]",
                i + 1,
                st.name,
                st.shape.prompt_len,
                st.shape.gen_len,
                st.models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn describe_models(spec: &PipelineSpec) -> String {
    let mut seen: Vec<(&str, f64)> = Vec::new();
    for m in spec.subtasks.iter().flat_map(|s| &s.models) {
        if !seen.iter().any(|(n, _)| *n == m.name) {
            seen.push((&m.name, m.params));
        }
    }
    seen.iter()
        .map(|(n, p)| format!("{n} ({:.1}B parameters)", p / 1e9))
        .collect::<Vec<_>>()
        .join(", ")
}

fn describe_metrics(spec: &PipelineSpec) -> String {
    spec.subtasks
        .iter()
        .map(|s| format!("{}: {}", s.name, s.metric))
        .collect::<Vec<_>>()
        .join(", ")
}

fn allocation_json(spec: &PipelineSpec, alloc: &Allocation) -> Value {
    let mut map = serde_json::Map::new();
    for (st, c) in spec.subtasks.iter().zip(&alloc.entries) {
        map.insert(
            st.name.clone(),
            serde_json::json!({"model": st.models[c.model].name, "samples": c.samples}),
        );
    }
    Value::Object(map)
}

fn describe_history(spec: &PipelineSpec, archive: &Archive, window: usize) -> String {
    let trials = archive.history_window(window);
    if trials.is_empty() {
        return "None".into();
    }
    trials
        .iter()
        .map(|t| {
            let per: Vec<String> = spec
                .subtasks
                .iter()
                .zip(&t.result.per_subtask_quality)
                .map(|(s, q)| format!("{}={q:.4}", s.metric))
                .collect();
            format!(
                "{} -> {}={:.4}{}{}, budget={:.2}",
                allocation_json(spec, &t.allocation),
                spec.main_metric,
                t.score(),
                if per.is_empty() { "" } else { ", " },
                per.join(", "),
                t.budget
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The first JSON value in `text`, ignoring code fences and prose.
fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let starts = trimmed
        .char_indices()
        .filter(|(_, c)| *c == '[' || *c == '{')
        .map(|(i, _)| i);
    for start in starts {
        let mut stream = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

fn subtask_entry<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, i: usize) -> Option<&'a Value> {
    obj.get(name)
        .or_else(|| obj.get(&format!("subtask_{}", i + 1)))
        .or_else(|| obj.get(&format!("subtask{}", i + 1)))
}

fn is_config(obj: &serde_json::Map<String, Value>, spec: &PipelineSpec) -> bool {
    spec.subtasks
        .iter()
        .enumerate()
        .any(|(i, st)| subtask_entry(obj, &st.name, i).is_some())
}

fn parse_config(obj: &serde_json::Map<String, Value>, spec: &PipelineSpec, total: f64) -> Result<Allocation, String> {
    let mut entries = Vec::with_capacity(spec.subtasks.len());
    for (i, st) in spec.subtasks.iter().enumerate() {
        let v = subtask_entry(obj, &st.name, i).ok_or_else(|| format!("missing subtask {}", st.name))?;
        let model = match v.get("model") {
            Some(Value::String(name)) => st
                .models
                .iter()
                .position(|m| m.name.eq_ignore_ascii_case(name.trim()))
                .ok_or_else(|| {
                    let choices: Vec<&str> = st.models.iter().map(|m| m.name.as_str()).collect();
                    format!(
                        "unknown model {name} for subtask {} (choices: {})",
                        st.name,
                        choices.join(", ")
                    )
                })?,
            Some(Value::Number(n)) => n
                .as_u64()
                .map(|n| n as usize)
                .filter(|&n| n < st.models.len())
                .ok_or_else(|| format!("model index {n} out of range for subtask {}", st.name))?,
            _ => return Err(format!("subtask {}: missing model", st.name)),
        };
        let samples = v
            .get("samples")
            .and_then(Value::as_u64)
            .and_then(|s| u32::try_from(s).ok())
            .ok_or_else(|| format!("subtask {}: samples must be a non-negative integer", st.name))?;
        if samples < st.min_samples {
            return Err(format!(
                "subtask {}: samples must be at least {}",
                st.name, st.min_samples
            ));
        }
        entries.push(Choice::new(model, samples));
    }
    let alloc = Allocation::new(entries);
    let used = allocation_budget(spec, &alloc).map_err(|e| e.to_string())?;
    if used > total {
        return Err(format!(
            "configuration {} exceeds the budget by {:.2} (uses {:.2} of {:.2})",
            allocation_json(spec, &alloc),
            used - total,
            used,
            total
        ));
    }
    Ok(alloc)
}

/// Parses every configuration in a response; invalid ones become errors.
pub fn parse_response(text: &str, spec: &PipelineSpec, total: f64) -> (Vec<Allocation>, Vec<String>) {
    let Some(value) = extract_json(text) else {
        return (Vec::new(), vec!["response contains no JSON".into()]);
    };
    let items: Vec<Value> = match value {
        Value::Array(items) => items,
        Value::Object(obj) if is_config(&obj, spec) => vec![Value::Object(obj)],
        Value::Object(obj) => match obj.values().find(|v| v.is_array()) {
            Some(Value::Array(items)) => items.clone(),
            _ => obj.into_iter().map(|(_, v)| v).collect(),
        },
        _ => Vec::new(),
    };
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for item in items {
        match item.as_object() {
            Some(obj) => match parse_config(obj, spec, total) {
                Ok(a) => ok.push(a),
                Err(e) => errors.push(e),
            },
            None => errors.push(format!("expected an object, got {item}")),
        }
    }
    if ok.is_empty() && errors.is_empty() {
        errors.push("response contains no configurations".into());
    }
    (ok, errors)
}

impl Strategy for LlmAgent {
    fn name(&self) -> &str {
        "llm"
    }

    fn propose(&mut self, ctx: &mut Context<'_>) -> Result<Proposal, StrategyError> {
        let spec = ctx.spec;
        let total = ctx.total_budget;
        let mut guideline = None;
        if self.config.history != HistoryMode::None && ctx.archive.trial_count() > 0 {
            guideline = Some(Guideline::Text(self.guidelines(spec, total, ctx.archive)?));
        }
        let prompt = fill(
            &self.templates.trial_generation,
            &self.values(spec, total, ctx.archive, ctx.batch),
        );
        let mut messages = vec![
            ChatMessage::new("system", self.templates.system.clone()),
            ChatMessage::new("user", prompt),
        ];
        let mut accepted: Vec<Allocation> = Vec::new();
        for attempt in 0..=self.config.max_retries {
            let reply = self.ask(&messages)?;
            let (ok, errors) = parse_response(&reply, spec, total);
            for a in ok {
                if accepted.len() < ctx.batch && !accepted.contains(&a) && !ctx.taken.contains(&a) {
                    accepted.push(a);
                }
            }
            self.rejected.extend(errors.iter().cloned());
            if accepted.len() >= ctx.batch || attempt == self.config.max_retries {
                break;
            }
            let missing = ctx.batch - accepted.len();
            let problems = if errors.is_empty() {
                "some configurations repeat earlier trials".to_string()
            } else {
                errors.join("; ")
            };
            messages.push(ChatMessage::new("assistant", reply));
            messages.push(ChatMessage::new(
                "user",
                format!(
                    "These problems were found: {problems}. Return exactly {missing} new valid configurations in strict JSON format, each within the total budget of {total:.2}."
                ),
            ));
        }
        if accepted.len() < ctx.batch {
            let missing = ctx.batch - accepted.len();
            self.fallbacks += missing;
            accepted.extend(ctx.space.sample(ctx.rng, missing)?);
        }
        Ok(Proposal {
            allocations: accepted,
            guideline,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::make_preset;
    use crate::strategies::{run_search, SearchConfig};
    use std::collections::VecDeque;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Replies from a fixed script and records every request.
    struct Scripted {
        replies: VecDeque<String>,
        seen: Transcript,
    }

    impl ChatBackend for Scripted {
        fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, StrategyError> {
            self.seen.lock().unwrap().push(messages.to_vec());
            self.replies
                .pop_front()
                .ok_or_else(|| StrategyError::Endpoint("script exhausted".into()))
        }
    }

    type Transcript = Arc<Mutex<Vec<Vec<ChatMessage>>>>;

    fn scripted(replies: &[&str]) -> (Box<Scripted>, Transcript) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let b = Scripted {
            replies: replies.iter().map(|s| s.to_string()).collect(),
            seen: Arc::clone(&seen),
        };
        (Box::new(b), seen)
    }

    fn spec() -> PipelineSpec {
        make_preset("retrieval-qa", 0)
            .unwrap()
            .spec
            .with_min_samples_at_least(1)
    }

    const LATER: &str = r#"[{"retrieval": {"model": "qwen2.5-7b", "samples": 10}, "qa": {"model": "llama-3.2-3b", "samples": 30}},
 {"retrieval": {"model": "qwen2.5-7b", "samples": 20}, "qa": {"model": "llama-3.2-3b", "samples": 20}}]"#;

    const LAST: &str = r#"[{"retrieval": {"model": "qwen2.5-32b", "samples": 5}, "qa": {"model": "llama-3.2-3b", "samples": 30}},
 {"retrieval": {"model": "qwen2.5-32b", "samples": 6}, "qa": {"model": "llama-3.2-3b", "samples": 20}}]"#;

    const GOOD: &str = r#"```json
[{"subtask_1": {"model": "qwen2.5-72b", "samples": 1}, "subtask_2": {"model": "llama-3.2-3b", "samples": 40}},
 {"retrieval": {"model": "Qwen2.5-32B", "samples": 3}, "qa": {"model": "llama-3.1-8b", "samples": 20}}]
```"#;

    #[test]
    fn templates_are_complete() {
        let t = Templates::default();
        t.validate().unwrap();
        assert_eq!(t.system, "You are an expert in parameter optimization.");
        for p in PLACEHOLDERS
            .iter()
            .filter(|p| **p != "experience" && **p != "batch_size")
        {
            assert!(t.initial_guidelines.contains(&format!("{{{p}}}")), "{p}");
            assert!(t.trial_generation.contains(&format!("{{{p}}}")), "{p}");
        }
        // The JSON schema braces in the trial template are not placeholders.
        assert!(referenced(&t.trial_generation).iter().all(|p| PLACEHOLDERS.contains(p)));
        let bad = Templates {
            trial_generation: "{batch_size} {oops}".into(),
            ..Templates::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn well_formed_response_is_parsed() {
        let (ok, errors) = parse_response(GOOD, &spec(), 929.0);
        assert!(errors.is_empty(), "{errors:?}");
        assert_eq!(
            ok,
            vec![
                Allocation::from_pairs(&[(2, 1), (0, 40)]),
                Allocation::from_pairs(&[(1, 3), (1, 20)])
            ]
        );
        let single =
            r#"Here you go: {"retrieval": {"model": 0, "samples": 5}, "qa": {"model": 0, "samples": 5}} thanks"#;
        assert_eq!(parse_response(single, &spec(), 929.0).0.len(), 1);
        let wrapped = r#"{"configurations": [{"subtask_1": {"model": "qwen2.5-7b", "samples": 2}, "subtask_2": {"model": "llama-3.2-3b", "samples": 2}}]}"#;
        assert_eq!(parse_response(wrapped, &spec(), 929.0).0.len(), 1);
    }

    #[test]
    fn validation_errors() {
        let over = r#"[{"retrieval": {"model": "qwen2.5-72b", "samples": 4}, "qa": {"model": "llama-3.2-3b", "samples": 10}}]"#;
        let (ok, errors) = parse_response(over, &spec(), 929.0);
        assert!(ok.is_empty());
        assert!(errors[0].contains("exceeds the budget by"), "{errors:?}");
        let unknown =
            r#"[{"retrieval": {"model": "gpt-9", "samples": 1}, "qa": {"model": "llama-3.2-3b", "samples": 10}}]"#;
        assert!(parse_response(unknown, &spec(), 929.0).1[0].contains("unknown model gpt-9"));
        let zero =
            r#"[{"retrieval": {"model": "qwen2.5-7b", "samples": 0}, "qa": {"model": "llama-3.2-3b", "samples": 10}}]"#;
        assert!(parse_response(zero, &spec(), 929.0).1[0].contains("at least 1"));
        assert!(!parse_response("no json here", &spec(), 929.0).1.is_empty());
    }

    fn context_run(agent: &mut LlmAgent, batch: usize) -> Result<Proposal, StrategyError> {
        let spec = spec();
        let space = crate::searchspace::AllocationSpace::new(&spec, 929.0).unwrap();
        let archive = Archive::default();
        let taken = Default::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ctx = Context {
            spec: &spec,
            space: &space,
            total_budget: 929.0,
            archive: &archive,
            batch,
            stage: 0,
            taken: &taken,
            rng: &mut rng,
        };
        agent.propose(&mut ctx)
    }

    #[test]
    fn over_budget_triggers_one_repair_message() {
        let over = r#"[{"retrieval": {"model": "qwen2.5-72b", "samples": 4}, "qa": {"model": "llama-3.2-3b", "samples": 10}}]"#;
        let fixed = r#"[{"retrieval": {"model": "qwen2.5-72b", "samples": 2}, "qa": {"model": "llama-3.2-3b", "samples": 10}}]"#;
        let (backend, seen) = scripted(&[over, fixed]);
        let mut agent = LlmAgent::new(LlmConfig::default(), backend).unwrap();
        let p = context_run(&mut agent, 1).unwrap();
        assert_eq!(p.allocations, vec![Allocation::from_pairs(&[(2, 2), (0, 10)])]);
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        let repair = &seen[1].last().unwrap().content;
        assert!(repair.contains("exceeds the budget by 41.00"), "{repair}");
        assert_eq!(agent.fallbacks, 0);
        assert_eq!(seen[0][0].role, "system");
        assert!(seen[0][1].content.contains("Return only 1 candidates"));
    }

    #[test]
    fn persistent_garbage_falls_back_to_random() {
        let (backend, seen) = scripted(&["nope", "still nope", "no", "never"]);
        let mut agent = LlmAgent::new(LlmConfig::default(), backend).unwrap();
        let p = context_run(&mut agent, 3).unwrap();
        assert_eq!(p.allocations.len(), 3);
        assert_eq!(agent.fallbacks, 3);
        assert_eq!(seen.lock().unwrap().len(), 4);
        let (backend, _) = scripted(&[]);
        let mut agent = LlmAgent::new(LlmConfig::default(), backend).unwrap();
        assert!(matches!(context_run(&mut agent, 1), Err(StrategyError::Endpoint(_))));
    }

    #[test]
    fn zero_shot_mode_hides_history() {
        let env = make_preset("retrieval-qa", 0).unwrap();
        let replies: Vec<&str> = std::iter::repeat_n(GOOD, 10).collect();
        let (backend, seen) = scripted(&replies);
        let config = LlmConfig {
            history: HistoryMode::None,
            ..LlmConfig::default()
        };
        let mut agent = LlmAgent::new(config, backend).unwrap();
        let cfg = SearchConfig {
            max_trials: 4,
            batch: 2,
            ..Default::default()
        };
        let out = run_search(&mut agent, &env, 929.0, &cfg).unwrap();
        assert_eq!(out.archive.trial_count(), 4);
        let seen = seen.lock().unwrap();
        assert!(seen.iter().all(|m| m[1].content.contains("Search history: None")));
        assert_eq!(out.archive.guidelines().count(), 0);
    }

    #[test]
    fn guidelines_use_initial_then_noninitial_prompt() {
        let env = make_preset("retrieval-qa", 0).unwrap();
        let (backend, seen) = scripted(&[GOOD, "prefer 72b for retrieval", LATER, "explore qa samples", LAST]);
        let mut agent = LlmAgent::new(LlmConfig::default(), backend).unwrap();
        let cfg = SearchConfig {
            max_trials: 6,
            batch: 2,
            ..Default::default()
        };
        let out = run_search(&mut agent, &env, 929.0, &cfg).unwrap();
        let seen = seen.lock().unwrap();
        assert!(seen[1][1]
            .content
            .contains("initial trials that use different model sizes"));
        assert!(seen[3][1].content.contains("both old and recent search history"));
        assert!(seen[4][1].content.contains("Guidelines: explore qa samples"));
        let texts: Vec<_> = out.archive.guidelines().map(|g| g.text.clone().unwrap()).collect();
        assert_eq!(texts, vec!["prefer 72b for retrieval", "explore qa samples"]);
    }

    #[test]
    fn http_backend_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let reply =
                serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "pong"}}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (request, auth)
        });
        std::env::set_var("TTSALLOC_TEST_TOKEN", "secret");
        let config = LlmConfig {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            model: "test-model".into(),
            temperature: 0.2,
            token_env: Some("TTSALLOC_TEST_TOKEN".into()),
            ..LlmConfig::default()
        };
        let mut backend = HttpBackend::new(&config).unwrap();
        let reply = backend
            .complete(&[ChatMessage::new("system", "s"), ChatMessage::new("user", "ping")])
            .unwrap();
        assert_eq!(reply, "pong");
        let (request, auth) = server.join().unwrap();
        assert_eq!(request["model"], "test-model");
        assert_eq!(request["temperature"], 0.2);
        assert_eq!(request["messages"][1]["content"], "ping");
        assert!(auth.eq_ignore_ascii_case("authorization: Bearer secret"), "{auth}");
    }
}
