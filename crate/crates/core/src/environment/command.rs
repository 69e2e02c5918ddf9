use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{EnvError, Environment, EvalResult, Mode};
use crate::searchspace::{allocation_budget, validate_allocation, Allocation, PipelineSpec};

/// Runs an external program per evaluation.
///
/// The template is a shell command line. `{<subtask>.model}` and
/// `{<subtask>.samples}` are replaced for every subtask; `{mode}` (`train` or
/// `test`) and `{repeat}` are optional. The result is the last
/// whitespace-delimited token of the last non-empty stdout line.
#[derive(Debug)]
pub struct CommandEnv {
    spec: PipelineSpec,
    template: String,
    timeout: Duration,
    limit: usize,
    running: Mutex<usize>,
    slot_freed: Condvar,
}

impl CommandEnv {
    pub fn new(spec: PipelineSpec, template: impl Into<String>, timeout: Duration) -> Result<Self, EnvError> {
        let template = template.into();
        let known: Vec<String> = spec
            .subtasks
            .iter()
            .flat_map(|st| [format!("{}.model", st.name), format!("{}.samples", st.name)])
            .collect();
        let used = placeholders(&template)?;
        if let Some(bad) = used
            .iter()
            .find(|p| !known.contains(p) && *p != "mode" && *p != "repeat")
        {
            return Err(EnvError::Template(format!("unknown placeholder {{{bad}}}")));
        }
        if let Some(missing) = known.iter().find(|k| !used.contains(k)) {
            return Err(EnvError::Template(format!("missing placeholder {{{missing}}}")));
        }
        Ok(Self {
            spec,
            template,
            timeout,
            limit: 1,
            running: Mutex::new(0),
            slot_freed: Condvar::new(),
        })
    }

    /// Maximum number of concurrently running commands (at least 1).
    pub fn with_parallelism(mut self, limit: usize) -> Self {
        self.limit = limit.max(1);
        self
    }

    pub fn render(&self, alloc: &Allocation, mode: Mode, repeat: u64) -> String {
        let mut out = self.template.clone();
        for (st, c) in self.spec.subtasks.iter().zip(&alloc.entries) {
            out = out.replace(&format!("{{{}.model}}", st.name), &st.models[c.model].name);
            out = out.replace(&format!("{{{}.samples}}", st.name), &c.samples.to_string());
        }
        let mode = match mode {
            Mode::Train => "train",
            Mode::Test => "test",
        };
        out.replace("{mode}", mode).replace("{repeat}", &repeat.to_string())
    }

    fn acquire(&self) {
        let mut n = self.running.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.slot_freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.running.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.slot_freed.notify_one();
    }

    fn run(&self, line: &str) -> Result<String, EnvError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(line)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let drain = |mut r: Box<dyn Read + Send>| {
            thread::spawn(move || {
                let mut buf = String::new();
                let _ = r.read_to_string(&mut buf);
                buf
            })
        };
        let stdout = drain(Box::new(child.stdout.take().expect("piped")));
        let stderr = drain(Box::new(child.stderr.take().expect("piped")));
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EnvError::Timeout(self.timeout));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let stdout = stdout.join().unwrap_or_default();
        let stderr = stderr.join().unwrap_or_default();
        if !status.success() {
            return Err(EnvError::CommandFailed {
                status: status.to_string(),
                stderr: stderr.trim().to_string(),
            });
        }
        Ok(stdout)
    }
}

fn placeholders(template: &str) -> Result<Vec<String>, EnvError> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| EnvError::Template("unclosed `{`".into()))?;
        out.push(after[..close].to_string());
        rest = &after[close + 1..];
    }
    Ok(out)
}

/// Last whitespace token of the last non-empty line.
pub(crate) fn parse_result(stdout: &str) -> Result<f64, EnvError> {
    stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.split_whitespace().last())
        .and_then(|t| t.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| EnvError::Unparsable(stdout.to_string()))
}

impl Environment for CommandEnv {
    fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    /// Per-subtask qualities are not observable through this backend and are
    /// returned empty.
    fn evaluate(&self, alloc: &Allocation, mode: Mode, repeat: u64) -> Result<EvalResult, EnvError> {
        validate_allocation(&self.spec, alloc)?;
        let line = self.render(alloc, mode, repeat);
        self.acquire();
        let out = self.run(&line);
        self.release();
        Ok(EvalResult {
            per_subtask_quality: Vec::new(),
            main_metric: parse_result(&out?)?,
            budget_spent: allocation_budget(&self.spec, alloc)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::make_preset;
    use std::sync::Arc;

    fn spec() -> PipelineSpec {
        make_preset("retrieval-qa", 0).unwrap().spec
    }

    const ECHO: &str = "echo {retrieval.model} {retrieval.samples} {qa.model} {qa.samples}";

    fn alloc() -> Allocation {
        Allocation::from_pairs(&[(2, 1), (0, 9)])
    }

    #[test]
    fn echo_wrapper_returns_value() {
        let env = CommandEnv::new(spec(), format!("{ECHO} 0.5"), Duration::from_secs(10)).unwrap();
        let r = env.evaluate(&alloc(), Mode::Train, 0).unwrap();
        assert_eq!(r.main_metric, 0.5);
    }

    #[test]
    fn placeholders_are_substituted() {
        let env = CommandEnv::new(spec(), format!("{ECHO} {{mode}} {{repeat}}"), Duration::from_secs(1)).unwrap();
        assert_eq!(
            env.render(&alloc(), Mode::Test, 3),
            "echo qwen2.5-72b 1 llama-3.2-3b 9 test 3"
        );
    }

    #[test]
    fn template_validation() {
        assert!(CommandEnv::new(spec(), "echo 0.5", Duration::from_secs(1)).is_err());
        assert!(CommandEnv::new(spec(), format!("{ECHO} {{oops}}"), Duration::from_secs(1)).is_err());
        assert!(CommandEnv::new(spec(), format!("{ECHO} {{mode"), Duration::from_secs(1)).is_err());
    }

    #[test]
    fn failures() {
        let t = Duration::from_secs(10);
        let env = CommandEnv::new(spec(), format!("{ECHO} >&2; exit 3"), t).unwrap();
        assert!(matches!(
            env.evaluate(&alloc(), Mode::Train, 0),
            Err(EnvError::CommandFailed { .. })
        ));
        let env = CommandEnv::new(spec(), format!("{ECHO} done"), t).unwrap();
        assert!(matches!(
            env.evaluate(&alloc(), Mode::Train, 0),
            Err(EnvError::Unparsable(_))
        ));
        let env = CommandEnv::new(spec(), format!("sleep 5; {ECHO} 1"), Duration::from_millis(100)).unwrap();
        let start = Instant::now();
        assert!(matches!(
            env.evaluate(&alloc(), Mode::Train, 0),
            Err(EnvError::Timeout(_))
        ));
        assert!(start.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn parsing_rules() {
        assert_eq!(parse_result("log\nscore 0.25\n\n").unwrap(), 0.25);
        assert!(parse_result("").is_err());
        assert!(parse_result("0.3 nan").is_err());
    }

    #[test]
    fn parallelism_limit_serializes_runs() {
        let env = Arc::new(
            CommandEnv::new(spec(), format!("sleep 0.2; {ECHO} 1"), Duration::from_secs(10))
                .unwrap()
                .with_parallelism(1),
        );
        let start = Instant::now();
        let handles: Vec<_> = (0..3)
            .map(|_| {
                let env = Arc::clone(&env);
                thread::spawn(move || env.evaluate(&alloc(), Mode::Train, 0).unwrap().main_metric)
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 1.0);
        }
        assert!(start.elapsed() >= Duration::from_millis(600));
    }
}
