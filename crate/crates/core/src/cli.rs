//! Operator commands: config loading and validation, single-episode runs,
//! supervised warm-up, RL training and evaluation.
//!
//! Every command is a plain function over a loaded [`RunConfig`], so the
//! binary stays a thin argument parser.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::orchestrator::EpisodeResult;
use crate::policy::{demonstrations, parse_sft_dataset, FixedPolicy, LinearSoftmax, Policy, PolicyParams, SftRecord};
use crate::registry::{AgentMetrics, CardFileEntry};
use crate::rewards::{reward_vector, scalarize, NoveltyLedger, RewardWeights};
use crate::router::RoutingWeights;
use crate::simenv::{preset_case_study, stream_rng, Scenario, ScenarioConfig};
use crate::trainer::{EvalMode, EvalSummary, TrainError, Trainer, TrainerConfig, TrainingReport};
use crate::trajectory::{Terminal, TrajectoryLogLine};

pub const CASE_STUDY: &str = "case-study";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_EPISODE_FAILURE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad dataset: line {line}: {reason}")]
    BadDataset { line: usize, reason: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Demonstrations generated when no dataset file is given.
    pub demos: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 500,
            learning_rate: 0.1,
            demos: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Named scenario preset; currently only `case-study`.
    pub profile: Option<String>,
    /// Explicit scenario; takes precedence over `profile`.
    pub scenario: Option<ScenarioConfig>,
    /// Agent-card JSON file replacing the scenario's cards.
    pub agent_cards: Option<PathBuf>,
    pub router: RoutingWeights,
    pub rewards: RewardWeights,
    pub trainer: TrainerConfig,
    pub sft: SftConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            profile: None,
            scenario: None,
            agent_cards: None,
            router: RoutingWeights::default(),
            rewards: RewardWeights::default(),
            trainer: TrainerConfig::default(),
            sft: SftConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// A validated config together with the scenario it describes.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub scenario: Scenario,
}

impl Loaded {
    pub fn trainer(&self) -> Result<Trainer<'_>, CliError> {
        Trainer::new(
            &self.scenario,
            self.config.router,
            self.config.rewards,
            self.config.trainer,
        )
        .map_err(|e| CliError::BadConfig(e.to_string()))
    }
}

/// Applies `key=value` overrides. Dotted keys address nested fields; bare
/// keys are resolved against the known config sections.
pub fn apply_overrides(config: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::BadConfig(format!("override `{item}` is not key=value")))?;
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else {
            let mut found = Vec::new();
            find_key(&defaults, key, &mut Vec::new(), &mut found);
            match found.len() {
                0 => return Err(CliError::BadConfig(format!("unknown config key `{key}`"))),
                1 => found.remove(0),
                _ => {
                    let options: Vec<String> = found.iter().map(|p| p.join(".")).collect();
                    return Err(CliError::BadConfig(format!(
                        "config key `{key}` is ambiguous; use one of {}",
                        options.join(", ")
                    )));
                }
            }
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(config, &path, value)?;
    }
    Ok(())
}

/// Every path in `defaults` whose last segment is `key`.
fn find_key(defaults: &Value, key: &str, prefix: &mut Vec<String>, found: &mut Vec<Vec<String>>) {
    let Some(obj) = defaults.as_object() else { return };
    for (k, v) in obj {
        prefix.push(k.clone());
        if k == key {
            found.push(prefix.clone());
        }
        find_key(v, key, prefix, found);
        prefix.pop();
    }
}

/// Deep-merges `patch` into `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = root;
    for (i, part) in path.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::BadConfig(format!("`{}` is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        cur = obj.entry(part.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses config text (JSON), applies overrides and validates every
/// constraint up front.
pub fn load_config_str(text: Option<&str>, overrides: &[String], base_dir: &Path) -> Result<Loaded, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(t) = text {
        let user: Value = serde_json::from_str(t).map_err(|e| CliError::BadConfig(e.to_string()))?;
        if !user.is_object() {
            return Err(CliError::BadConfig("config must be a JSON object".into()));
        }
        merge(&mut value, user);
    }
    apply_overrides(&mut value, overrides)?;
    let config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::BadConfig(e.to_string()))?;
    config
        .router
        .validate()
        .map_err(|e| CliError::BadConfig(e.to_string()))?;

    let mut scenario_cfg = match (&config.scenario, config.profile.as_deref()) {
        (Some(s), _) => s.clone(),
        (None, None) | (None, Some(CASE_STUDY)) => preset_case_study(),
        (None, Some(other)) => return Err(CliError::BadConfig(format!("unknown profile `{other}`"))),
    };
    if let Some(path) = &config.agent_cards {
        let path = base_dir.join(path);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let cards: Vec<CardFileEntry> =
            serde_json::from_str(&text).map_err(|e| CliError::BadConfig(format!("agent cards: {e}")))?;
        scenario_cfg.cards = cards;
    }
    let scenario = Scenario::build(scenario_cfg).map_err(|e| CliError::BadConfig(e.to_string()))?;
    let loaded = Loaded { config, scenario };
    loaded.trainer()?;
    Ok(loaded)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let base = p.parent().unwrap_or(Path::new("."));
            load_config_str(Some(&text), overrides, base)
        }
        None => load_config_str(None, overrides, Path::new(".")),
    }
}

fn read_checkpoint(path: &Path, trainer: &Trainer<'_>) -> Result<LinearSoftmax, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let params = PolicyParams::parse_checkpoint(&text, trainer.param_shape())
        .map_err(|e| CliError::BadCheckpoint(e.to_string()))?;
    trainer
        .policy(params)
        .map_err(|e| CliError::BadCheckpoint(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// What a command printed and the exit code it asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct CmdOutput {
    pub stdout: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub task_class: Option<&'a str>,
    pub checkpoint: Option<&'a Path>,
    /// Stub policy that always answers with this token.
    pub force_answer: Option<&'a str>,
}

pub fn episode_log_line(
    episode_id: String,
    result: &EpisodeResult,
    loaded: &Loaded,
    task: &crate::simenv::TaskSpec,
    ledger: &mut NoveltyLedger,
) -> TrajectoryLogLine {
    let vocab = &loaded.scenario.vocab;
    let rv = reward_vector(
        &result.trajectory,
        &result.outcome,
        task,
        vocab,
        loaded.config.trainer.max_steps,
        ledger,
    );
    TrajectoryLogLine {
        episode_id,
        segments: result.trajectory.segment_records(vocab).expect("trajectory tokens in vocabulary"),
        terminal: result.trajectory.terminal_record(vocab).expect("terminal token in vocabulary"),
        reward_vector: rv,
        scalar_reward: scalarize(&rv, &loaded.config.rewards),
    }
}

/// Runs one seeded episode and appends its log line to
/// `<out>/trajectories.jsonl`.
pub fn cmd_run(loaded: &Loaded, opts: &RunOptions<'_>) -> Result<CmdOutput, CliError> {
    let trainer = loaded.trainer()?;
    let scenario = &loaded.scenario;
    let n = trainer.actions.len();
    let policy: Box<dyn Policy> = match (opts.force_answer, opts.checkpoint) {
        (Some(tok), _) => {
            let t = scenario
                .vocab
                .token(tok)
                .map_err(|e| CliError::BadConfig(e.to_string()))?;
            let idx = trainer
                .actions
                .answer_index(t)
                .ok_or_else(|| CliError::BadConfig(format!("`{tok}` is not an answer token")))?;
            Box::new(FixedPolicy::always(n, idx))
        }
        (None, Some(path)) => Box::new(read_checkpoint(path, &trainer)?),
        (None, None) => Box::new(trainer.uniform_policy()),
    };

    let seed = loaded.config.seed;
    let mut rng = stream_rng(seed, 0);
    let task = match opts.task_class {
        Some(name) => {
            let idx = scenario
                .generator
                .class_index(name)
                .ok_or_else(|| CliError::BadConfig(format!("unknown task class `{name}`")))?;
            scenario.generator.task(idx, format!("{name}-{seed}"))
        }
        None => scenario.generator.sample(&mut rng),
    };
    let mut env = scenario.environment();
    let result = trainer
        .orchestrator(loaded.config.router)
        .execute_episode(&task, policy.as_ref(), &mut env, &mut rng);

    let line = episode_log_line(
        format!("run-{seed}-{}", task.task_id),
        &result,
        loaded,
        &task,
        &mut NoveltyLedger::new(),
    );
    let json = serde_json::to_string(&line).expect("log line serializes");
    let log_path = loaded.config.output_dir.join("trajectories.jsonl");
    fs::create_dir_all(&loaded.config.output_dir).map_err(io_err(&loaded.config.output_dir))?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    writeln!(f, "{json}").map_err(io_err(&log_path))?;

    let o = &result.outcome;
    let failed = o.failure.is_some() || matches!(result.trajectory.terminal(), Terminal::Truncated);
    let status = match &o.failure {
        Some(f) => f.kind.as_str().to_string(),
        None if failed => "truncated".to_string(),
        None => "ok".to_string(),
    };
    let stdout = format!(
        "{json}\noutcome: status={status} invocations={} latency_ms={:.3} sla_met={}\n",
        o.invocation_count, o.total_latency_ms, o.sla_met
    );
    Ok(CmdOutput {
        stdout,
        exit_code: if failed { EXIT_EPISODE_FAILURE } else { EXIT_OK },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftResult {
    pub final_loss: f64,
    pub mean_demo_prob: f64,
    pub checkpoint: PathBuf,
}

/// Supervised warm-up. Reads `dataset` or, when absent, generates
/// `sft.demos` happy-path demonstrations (saved to `<out>/sft_demos.jsonl`).
pub fn cmd_sft(loaded: &Loaded, dataset: Option<&Path>) -> Result<(CmdOutput, SftResult), CliError> {
    let trainer = loaded.trainer()?;
    let out = &loaded.config.output_dir;
    let samples = match dataset {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            parse_sft_dataset(&text, &trainer.encoder, trainer.actions.len()).map_err(|e| CliError::BadDataset {
                line: e.line,
                reason: e.reason,
            })?
        }
        None => {
            let mut rng = stream_rng(loaded.config.seed, 1);
            let demos = demonstrations(&loaded.scenario.generator, &trainer.actions, loaded.config.sft.demos, &mut rng);
            let mut text = String::new();
            for d in &demos {
                text.push_str(&serde_json::to_string(&SftRecord::from(d)).expect("record serializes"));
                text.push('\n');
            }
            write_file(&out.join("sft_demos.jsonl"), text.as_bytes())?;
            demos
        }
    };
    let mut policy = trainer.uniform_policy();
    for _ in 0..loaded.config.sft.steps {
        policy.sft_update(&samples, loaded.config.sft.learning_rate);
    }
    let final_loss = policy.sft_loss(&samples);
    let mean_demo_prob = policy.mean_demo_prob(&samples);
    let ckpt = out.join("checkpoint.json");
    write_file(&ckpt, policy.params.checkpoint_json().as_bytes())?;
    let stdout = format!(
        "samples={} steps={} final_loss={final_loss} mean_demo_prob={mean_demo_prob}\ncheckpoint={}\n",
        samples.len(),
        loaded.config.sft.steps,
        ckpt.display()
    );
    Ok((
        CmdOutput { stdout, exit_code: EXIT_OK },
        SftResult {
            final_loss,
            mean_demo_prob,
            checkpoint: ckpt,
        },
    ))
}

/// RL training. Writes `<out>/report.csv`, `<out>/checkpoint.json` and,
/// with `checkpoint_every = K`, `<out>/checkpoint_<iter>.json` every K
/// iterations.
pub fn cmd_train(loaded: &Loaded, initial: Option<&Path>) -> Result<(CmdOutput, TrainingReport), CliError> {
    let trainer = loaded.trainer()?;
    let init = match initial {
        Some(p) => Some(read_checkpoint(p, &trainer)?.params),
        None => None,
    };
    let out = loaded.config.output_dir.clone();
    let mut write_err = None;
    let outcome = trainer
        .train_with(loaded.config.seed, init, |iter, params| {
            let path = out.join(format!("checkpoint_{iter:05}.json"));
            if let Err(e) = write_file(&path, params.checkpoint_json().as_bytes()) {
                write_err.get_or_insert(e);
            }
        })
        .map_err(|e| match e {
            TrainError::ShapeMismatch { .. } => CliError::BadCheckpoint(e.to_string()),
            other => CliError::BadConfig(other.to_string()),
        })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_file(&out.join("report.csv"), outcome.report.to_csv_string().as_bytes())?;
    write_file(&out.join("checkpoint.json"), outcome.params.checkpoint_json().as_bytes())?;
    let last = outcome.report.last().expect("at least one iteration");
    let stdout = format!(
        "iterations={} mean_reward={} success_rate={} mean_entropy={} collapse_warnings={}\nreport={}\n",
        last.iteration,
        last.mean_reward,
        last.success_rate,
        last.mean_entropy,
        outcome.report.collapse_warnings,
        out.join("report.csv").display()
    );
    Ok((CmdOutput { stdout, exit_code: EXIT_OK }, outcome.report))
}

/// Deterministic evaluation of a checkpoint (or the uniform policy).
pub fn cmd_eval(
    loaded: &Loaded,
    checkpoint: Option<&Path>,
    episodes: usize,
    mode: EvalMode,
) -> Result<(CmdOutput, EvalSummary), CliError> {
    if episodes < 1 {
        return Err(CliError::BadConfig("episodes must be at least 1".into()));
    }
    let trainer = loaded.trainer()?;
    let policy = match checkpoint {
        Some(p) => read_checkpoint(p, &trainer)?,
        None => trainer.uniform_policy(),
    };
    let summary = trainer.evaluate(&policy, mode, episodes, loaded.config.seed);
    let stdout = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    Ok((CmdOutput { stdout, exit_code: EXIT_OK }, summary))
}

/// Agent-card file contents for the active scenario, handy as a template.
pub fn card_file_json(scenario: &Scenario) -> String {
    let entries: Vec<CardFileEntry> = scenario
        .cards
        .iter()
        .map(|(card, metrics): &(_, AgentMetrics)| CardFileEntry {
            card: card.clone(),
            metrics: *metrics,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("cards serialize")
}
