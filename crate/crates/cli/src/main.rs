use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ttsalloc::archive::Archive;
use ttsalloc::config::{load_pipeline, Catalog};
use ttsalloc::costmodel::{BaseConfig, CostMetric, CostModel, ModelSpec, PriceBilling, TaskShape};
use ttsalloc::environment::{make_preset, verify_insights, CommandEnv, Environment, TableEnv, PRESET_NAMES};
use ttsalloc::searchspace::{count_valid, default_budget, PipelineSpec};
use ttsalloc::strategies::llm::{HistoryMode, Templates};
use ttsalloc::strategies::{
    run_search, InsightAgent, LlmAgent, LlmConfig, RandomSearch, SearchConfig, Strategy, SurrogateSearch,
};

#[derive(Parser)]
#[command(
    name = "ttsalloc",
    version,
    about = "Compute-budget allocation for multi-stage LLM pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalized budget of sampling one model on one subtask.
    Budget(BudgetArgs),
    /// Write budget look-up tables as CSV.
    Tables(TablesArgs),
    /// Count the allocations that fit a total budget.
    Space(SpaceArgs),
    /// Search for a good allocation and write the archive and trajectory.
    Search(Box<SearchArgs>),
    /// Check the structural properties of a synthetic preset.
    Verify(VerifyArgs),
    /// Summarize an archive and write its best-so-far series.
    Report(ReportArgs),
}

/// `auto` (one pass of the largest model per subtask) or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
enum BudgetArg {
    Auto,
    Value(f64),
}

impl FromStr for BudgetArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Self::Value(v)),
            _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
        }
    }
}

impl BudgetArg {
    fn resolve(self, spec: &PipelineSpec) -> Result<f64> {
        Ok(match self {
            Self::Auto => default_budget(spec)?,
            Self::Value(v) => v,
        })
    }
}

#[derive(Args)]
struct BudgetArgs {
    /// Parameter count, e.g. 72e9.
    #[arg(long)]
    params: f64,
    #[arg(long, default_value_t = 1)]
    samples: u32,
    /// Prompt length in tokens.
    #[arg(long)]
    prompt: u32,
    /// Generated tokens per sample.
    #[arg(long)]
    gen: u32,
    #[arg(long, default_value = "flops-simplified")]
    metric: CostMetric,
    #[arg(long)]
    layers: Option<u32>,
    #[arg(long)]
    hidden: Option<u32>,
    /// Price per 10^6 prompt tokens (api-price metric).
    #[arg(long)]
    price_in: Option<f64>,
    /// Price per 10^6 generated tokens (api-price metric).
    #[arg(long)]
    price_out: Option<f64>,
    #[arg(long, value_enum, default_value_t = Billing::SharedPrompt)]
    billing: Billing,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Billing {
    SharedPrompt,
    PerRequest,
}

impl From<Billing> for PriceBilling {
    fn from(b: Billing) -> Self {
        match b {
            Billing::SharedPrompt => PriceBilling::SharedPrompt,
            Billing::PerRequest => PriceBilling::PerRequest,
        }
    }
}

#[derive(Args)]
struct TablesArgs {
    #[arg(long)]
    catalog: PathBuf,
    /// Directory for `budget_s<S>.csv` files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,45,90")]
    samples: Vec<u32>,
}

#[derive(Args)]
struct SpaceArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "auto")]
    budget: BudgetArg,
    /// Override every subtask's minimum sample count.
    #[arg(long)]
    min_samples: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StrategyName {
    Random,
    Insight,
    Surrogate,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum HistoryArg {
    Full,
    None,
    Primed,
}

#[derive(Args, Serialize)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["env", "table", "command"])))]
struct SearchArgs {
    #[arg(long, value_enum)]
    strategy: StrategyName,
    /// Synthetic preset name.
    #[arg(long)]
    env: Option<String>,
    /// JSONL table of precomputed results (needs --spec).
    #[arg(long, requires = "spec")]
    table: Option<PathBuf>,
    /// Shell command template that prints a score (needs --spec).
    #[arg(long, requires = "spec")]
    command: Option<String>,
    /// Pipeline file; presets bring their own.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    budget: BudgetArg,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Preset seed; defaults to --seed.
    #[arg(long)]
    env_seed: Option<u64>,
    /// Stop after this many stages without improvement.
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    /// Record wall-clock timestamps in the archive.
    #[arg(long)]
    timestamps: bool,
    /// Per-evaluation timeout for --command, in seconds.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    epsilon_pref: f64,
    #[arg(long, default_value = "http://127.0.0.1:8000/v1/chat/completions")]
    llm_endpoint: String,
    #[arg(long, default_value = "gpt-4o-mini")]
    llm_model: String,
    #[arg(long, default_value_t = 0.7)]
    llm_temperature: f64,
    /// Environment variable holding the endpoint token.
    #[arg(long)]
    llm_token_env: Option<String>,
    #[arg(long, value_enum, default_value_t = HistoryArg::Full)]
    history: HistoryArg,
    /// Guideline text used with `--history primed`.
    #[arg(long, required_if_eq("history", "primed"))]
    experience: Option<PathBuf>,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "auto")]
    budget: BudgetArg,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Best-so-far CSV; defaults to `best_so_far.csv` next to the archive.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_budget(a: BudgetArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = ModelSpec::new("model", a.params);
    model.layers = a.layers;
    model.hidden = a.hidden;
    model.price_in = a.price_in;
    model.price_out = a.price_out;
    let model = model.with_default_arch();
    model.validate()?;
    let shape = TaskShape::new(a.prompt, a.gen);
    shape.validate()?;
    let cm = CostModel {
        metric: a.metric,
        base: BaseConfig::default(),
        billing: a.billing.into(),
    };
    let value = cm.cost(&model, a.samples, shape)?;
    writeln!(out, "{value:.6}")?;
    writeln!(out, "{}", value.round() as i64)?;
    Ok(())
}

fn cmd_tables(a: TablesArgs, out: &mut dyn Write) -> Result<()> {
    let catalog = Catalog::load(&a.catalog)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in a.samples {
        let path = a.out.join(format!("budget_s{s}.csv"));
        fs::write(&path, catalog.table_csv(s)).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

fn cmd_space(a: SpaceArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = load_pipeline(&a.spec)?;
    if let Some(min) = a.min_samples {
        for st in &mut spec.subtasks {
            st.min_samples = min;
        }
    }
    let total = a.budget.resolve(&spec)?;
    writeln!(out, "{}", count_valid(&spec, total)?)?;
    Ok(())
}

fn build_env(a: &SearchArgs) -> Result<Box<dyn Environment>> {
    if let Some(name) = &a.env {
        if a.spec.is_some() {
            bail!("--spec cannot be combined with a preset");
        }
        let env = make_preset(name, a.env_seed.unwrap_or(a.seed))
            .with_context(|| format!("known presets: {}", PRESET_NAMES.join(", ")))?;
        return Ok(Box::new(env));
    }
    let spec_path = a.spec.as_ref().expect("clap enforces --spec");
    let spec = load_pipeline(spec_path)?;
    if let Some(table) = &a.table {
        return Ok(Box::new(TableEnv::load(table, spec)?));
    }
    let template = a.command.as_ref().expect("clap enforces one source");
    Ok(Box::new(CommandEnv::new(
        spec,
        template.clone(),
        Duration::from_secs(a.timeout),
    )?))
}

fn build_strategy(a: &SearchArgs) -> Result<Box<dyn Strategy>> {
    Ok(match a.strategy {
        StrategyName::Random => Box::new(RandomSearch),
        StrategyName::Surrogate => Box::new(SurrogateSearch::default()),
        StrategyName::Insight => {
            let mut agent = InsightAgent::default();
            agent.epsilon_pref = a.epsilon_pref;
            Box::new(agent)
        }
        StrategyName::Llm => {
            let history = match a.history {
                HistoryArg::Full => HistoryMode::Full,
                HistoryArg::None => HistoryMode::None,
                HistoryArg::Primed => {
                    let path = a.experience.as_ref().expect("clap enforces --experience");
                    HistoryMode::Primed(
                        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                    )
                }
            };
            let config = LlmConfig {
                endpoint: a.llm_endpoint.clone(),
                model: a.llm_model.clone(),
                temperature: a.llm_temperature,
                token_env: a.llm_token_env.clone(),
                history,
                ..LlmConfig::default()
            };
            let mut agent = LlmAgent::http(config)?;
            if let Some(dir) = &a.templates {
                agent.templates = Templates::load_dir(dir)?;
            }
            Box::new(agent)
        }
    })
}

fn trajectory_csv(archive: &Archive) -> String {
    let mut out = String::from("trial,score,best_so_far,budget\n");
    for ((n, best), t) in archive.trajectory().into_iter().zip(archive.trials()) {
        out.push_str(&format!("{n},{},{best},{}\n", t.score(), t.budget));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_search(a: SearchArgs, out: &mut dyn Write) -> Result<()> {
    let env = build_env(&a)?;
    let total = a.budget.resolve(env.spec())?;
    let mut strategy = build_strategy(&a)?;
    let config = SearchConfig {
        max_trials: a.trials,
        batch: a.batch,
        seed: a.seed,
        top_k: a.top_k,
        patience: a.patience,
        timestamps: a.timestamps,
        ..SearchConfig::default()
    };
    let mut outcome = run_search(strategy.as_mut(), env.as_ref(), total, &config)?;
    outcome.archive.run["run_config"] = serde_json::to_value(&a)?;
    outcome.archive.run["test_report"] = serde_json::to_value(&outcome.report)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let archive_path = a.out.join("archive.jsonl");
    outcome.archive.save(&archive_path)?;
    write_file(&a.out.join("trajectory.csv"), &trajectory_csv(&outcome.archive))?;

    let spec = env.spec();
    writeln!(
        out,
        "{} trials archived in {}",
        outcome.archive.trial_count(),
        archive_path.display()
    )?;
    for r in &outcome.report {
        writeln!(
            out,
            "trial {}: {}  train {:.4}  test {:.4}",
            r.trial_id,
            r.allocation.describe(spec),
            r.train_score,
            r.test.main_metric
        )?;
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let env = make_preset(&a.preset, a.seed).with_context(|| format!("known presets: {}", PRESET_NAMES.join(", ")))?;
    let total = a.budget.resolve(&env.spec)?;
    let report = verify_insights(&env, total)?;
    for (name, check) in report.checks() {
        writeln!(out, "{name}: {}", if check.passed { "pass" } else { "fail" })?;
        for w in &check.witnesses {
            writeln!(out, "  {w}")?;
        }
    }
    writeln!(
        out,
        "{}",
        if report.all_passed() {
            "all checks passed"
        } else {
            "some checks failed"
        }
    )?;
    Ok(())
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let archive = Archive::load(&a.archive)?;
    let spec: Option<PipelineSpec> = serde_json::from_value(archive.run["spec"].clone()).ok();
    let Some(best) = archive.best(1).into_iter().next() else {
        bail!("{} holds no trials", a.archive.display());
    };
    let described = match &spec {
        Some(spec) => best.allocation.describe(spec),
        None => format!("{:?}", best.allocation.entries),
    };
    writeln!(out, "trials: {}", archive.trial_count())?;
    writeln!(out, "best trial: {}", best.id)?;
    writeln!(out, "allocation: {described}")?;
    writeln!(out, "score: {}", best.score())?;
    writeln!(out, "budget: {}", best.budget)?;
    let csv = a.out.unwrap_or_else(|| a.archive.with_file_name("best_so_far.csv"));
    write_file(&csv, &trajectory_csv(&archive))?;
    writeln!(out, "best-so-far series: {}", csv.display())?;
    Ok(())
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Budget(a) => cmd_budget(a, out),
        Command::Tables(a) => cmd_tables(a, out),
        Command::Space(a) => cmd_space(a, out),
        Command::Search(a) => cmd_search(*a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
