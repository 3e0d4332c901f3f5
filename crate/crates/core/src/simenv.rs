//! Simulated network environment: task generation, stochastic specialist
//! agents and a simulated clock for latency/SLA bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::registry::{AgentCard, AgentMetrics, CardFileEntry, Registry, RegistryError};
use crate::trajectory::ActionInvocation;
use crate::vocab::{Token, VocabError, Vocabulary};

pub type SimRng = ChaCha8Rng;

/// Multiplicative load decay applied to every agent at each env call after
/// the first.
pub const LOAD_DECAY: f64 = 0.9;

const PROB_TOLERANCE: f64 = 1e-9;

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("bad task generator config: {0}")]
    BadConfig(String),
    #[error("bad simulated agent `{0}`: {1}")]
    BadAgent(String, String),
    #[error("unknown agent `{0}`")]
    UnknownCard(String),
    #[error("agent `{0}` does not support action `{1}`")]
    UnsupportedAction(String, String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskClass {
    pub name: String,
    pub probability: f64,
    /// Absent for tasks the core can answer on its own.
    #[serde(default)]
    pub required_action: Option<String>,
    pub ground_truth: String,
    pub sla_deadline_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: Vec<TaskClass>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadConfig(m));
        if self.classes.is_empty() {
            return bad("at least one task class is required".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate task class `{}`", c.name));
            }
            if !(0.0..=1.0).contains(&c.probability) {
                return bad(format!("class `{}` probability outside [0, 1]", c.name));
            }
            if !(c.sla_deadline_ms > 0.0 && c.sla_deadline_ms.is_finite()) {
                return bad(format!("class `{}` needs a positive sla_deadline_ms", c.name));
            }
            if c.ground_truth.is_empty() {
                return bad(format!("class `{}` has an empty ground truth", c.name));
            }
        }
        let total: f64 = self.classes.iter().map(|c| c.probability).sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return bad(format!("class probabilities sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Feature dimension: one-hot class plus one complexity bit.
    pub fn feature_dim(&self) -> usize {
        self.classes.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_index: usize,
    pub feature_vector: Vec<f64>,
    pub required_action: Option<String>,
    pub ground_truth: Token,
    pub sla_deadline_ms: f64,
}

#[derive(Debug, Clone)]
struct CompiledClass {
    class: TaskClass,
    ground_truth: Token,
    features: Vec<f64>,
}

/// Task sampler compiled against a vocabulary.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    classes: Vec<CompiledClass>,
}

impl TaskGenerator {
    pub fn new(config: &GeneratorConfig, vocab: &Vocabulary) -> Result<Self, SimError> {
        config.validate()?;
        let dim = config.feature_dim();
        let classes = config
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut features = vec![0.0; dim];
                features[i] = 1.0;
                if c.required_action.is_some() {
                    features[dim - 1] = 1.0;
                }
                Ok(CompiledClass {
                    ground_truth: vocab.token(&c.ground_truth)?,
                    class: c.clone(),
                    features,
                })
            })
            .collect::<Result<_, SimError>>()?;
        Ok(TaskGenerator { classes })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, index: usize) -> &TaskClass {
        &self.classes[index].class
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.class.name == name)
    }

    pub fn feature_dim(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn task(&self, class_index: usize, task_id: String) -> TaskSpec {
        let c = &self.classes[class_index];
        TaskSpec {
            task_id,
            class_index,
            feature_vector: c.features.clone(),
            required_action: c.class.required_action.clone(),
            ground_truth: c.ground_truth,
            sla_deadline_ms: c.class.sla_deadline_ms,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let u: f64 = rng.gen();
        let tag: u32 = rng.gen();
        let mut acc = 0.0;
        let mut index = self.classes.len() - 1;
        for (i, c) in self.classes.iter().enumerate() {
            acc += c.class.probability;
            if u < acc {
                index = i;
                break;
            }
        }
        // guard against rounding in the cumulative sum landing on a zero-mass class
        while self.classes[index].class.probability == 0.0 && index > 0 {
            index -= 1;
        }
        let id = format!("{}-{tag:08x}", self.classes[index].class.name);
        self.task(index, id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAgentConfig {
    pub card_id: String,
    pub success_prob: BTreeMap<String, f64>,
    pub latency_base_ms: f64,
    #[serde(default)]
    pub latency_jitter_ms: f64,
    #[serde(default)]
    pub load_per_call: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimAgent {
    pub card: AgentCard,
    pub success_prob: BTreeMap<String, f64>,
    pub latency_base_ms: f64,
    pub latency_jitter_ms: f64,
    pub load_per_call: f64,
}

impl SimAgent {
    pub fn new(card: AgentCard, cfg: &SimAgentConfig) -> Result<Self, SimError> {
        let bad = |m: &str| Err(SimError::BadAgent(card.card_id.clone(), m.to_string()));
        let keys: BTreeSet<&String> = cfg.success_prob.keys().collect();
        let actions: BTreeSet<&String> = card.supported_actions.iter().collect();
        if keys != actions {
            return bad("success_prob keys must match supported_actions");
        }
        if cfg.success_prob.values().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("success probabilities must lie in [0, 1]");
        }
        if !(cfg.latency_base_ms > 0.0 && cfg.latency_base_ms.is_finite()) {
            return bad("latency_base_ms must be positive");
        }
        if !(cfg.latency_jitter_ms >= 0.0 && cfg.latency_jitter_ms.is_finite()) {
            return bad("latency_jitter_ms must be nonnegative");
        }
        if !(0.0..=1.0).contains(&cfg.load_per_call) {
            return bad("load_per_call must lie in [0, 1]");
        }
        Ok(SimAgent {
            card,
            success_prob: cfg.success_prob.clone(),
            latency_base_ms: cfg.latency_base_ms,
            latency_jitter_ms: cfg.latency_jitter_ms,
            load_per_call: cfg.load_per_call,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    pub raw_tokens: Vec<Token>,
    pub latency_ms: f64,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvState {
    pub loads: BTreeMap<String, f64>,
    pub clock_ms: f64,
    pub calls: u64,
}

/// One environment instance; each episode rollout owns its own.
#[derive(Debug, Clone)]
pub struct Environment {
    agents: BTreeMap<String, SimAgent>,
    state: EnvState,
}

impl Environment {
    pub fn new(agents: impl IntoIterator<Item = SimAgent>, initial_loads: BTreeMap<String, f64>) -> Self {
        let agents: BTreeMap<String, SimAgent> = agents
            .into_iter()
            .map(|a| (a.card.card_id.clone(), a))
            .collect();
        let loads = agents
            .keys()
            .map(|id| {
                let l = initial_loads.get(id).copied().unwrap_or(0.0);
                (id.clone(), l.clamp(0.0, 1.0))
            })
            .collect();
        Environment {
            agents,
            state: EnvState {
                loads,
                clock_ms: 0.0,
                calls: 0,
            },
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn clock_ms(&self) -> f64 {
        self.state.clock_ms
    }

    /// Simulated agent call: succeeds with `success_prob[action]`; a failed
    /// agent answers with [`Token::WRONG`].
    pub fn invoke_agent<R: Rng + ?Sized>(
        &mut self,
        card_id: &str,
        invocation: &ActionInvocation,
        task: &TaskSpec,
        rng: &mut R,
    ) -> Result<AgentResponse, SimError> {
        let agent = self
            .agents
            .get(card_id)
            .ok_or_else(|| SimError::UnknownCard(card_id.to_string()))?;
        let p = *agent
            .success_prob
            .get(&invocation.action_type)
            .ok_or_else(|| SimError::UnsupportedAction(card_id.to_string(), invocation.action_type.clone()))?;

        let draw: f64 = rng.gen();
        let jitter = rng.gen::<f64>() * agent.latency_jitter_ms;

        if self.state.calls > 0 {
            for load in self.state.loads.values_mut() {
                *load *= LOAD_DECAY;
            }
        }
        let load = self.state.loads.entry(card_id.to_string()).or_insert(0.0);
        let latency_ms = agent.latency_base_ms * (1.0 + *load) + jitter;
        *load = (*load + agent.load_per_call).clamp(0.0, 1.0);
        self.state.calls += 1;
        self.state.clock_ms += latency_ms;

        let succeeded = draw < p;
        let answer = if succeeded { task.ground_truth } else { Token::WRONG };
        Ok(AgentResponse {
            raw_tokens: vec![Token::NOISE, Token::ANS_OPEN, answer, Token::ANS_CLOSE],
            latency_ms,
            succeeded,
        })
    }
}

/// Everything a run needs to build registries, environments and tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub cards: Vec<CardFileEntry>,
    pub agents: Vec<SimAgentConfig>,
    pub tasks: GeneratorConfig,
    /// Additional answer tokens the policy may emit (distractors).
    #[serde(default)]
    pub extra_answers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub vocab: Vocabulary,
    pub cards: Vec<(AgentCard, AgentMetrics)>,
    pub agents: Vec<SimAgent>,
    pub generator: TaskGenerator,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn build(config: ScenarioConfig) -> Result<Self, SimError> {
        config.tasks.validate()?;
        let mut action_types = BTreeSet::new();
        for e in &config.cards {
            action_types.extend(e.card.supported_actions.iter().cloned());
        }
        for c in &config.tasks.classes {
            if let Some(a) = &c.required_action {
                action_types.insert(a.clone());
            }
        }
        let mut answers: Vec<String> = Vec::new();
        for name in config
            .tasks
            .classes
            .iter()
            .map(|c| &c.ground_truth)
            .chain(&config.extra_answers)
        {
            if !answers.contains(name) {
                answers.push(name.clone());
            }
        }
        let vocab = Vocabulary::new(action_types, answers, config.tasks.feature_dim())?;
        let generator = TaskGenerator::new(&config.tasks, &vocab)?;

        // validate cards through a scratch registry
        let scratch = Registry::new();
        for e in &config.cards {
            scratch.register_card(e.card.clone(), e.metrics)?;
        }
        let mut agents = Vec::with_capacity(config.agents.len());
        let mut seen = BTreeSet::new();
        for a in &config.agents {
            if !seen.insert(a.card_id.as_str()) {
                return Err(SimError::BadAgent(a.card_id.clone(), "duplicate simulated agent".into()));
            }
            let (card, _) = scratch
                .get(&a.card_id)
                .ok_or_else(|| SimError::UnknownCard(a.card_id.clone()))?;
            agents.push(SimAgent::new(card, a)?);
        }
        let cards = config.cards.iter().map(|e| (e.card.clone(), e.metrics)).collect();
        Ok(Scenario {
            vocab,
            cards,
            agents,
            generator,
            config,
        })
    }

    pub fn registry(&self) -> Registry {
        let reg = Registry::new();
        for (card, metrics) in &self.cards {
            reg.register_card(card.clone(), *metrics)
                .expect("cards validated at build");
        }
        reg
    }

    /// Fresh environment whose initial loads come from the card metrics.
    pub fn environment(&self) -> Environment {
        let loads = self
            .cards
            .iter()
            .map(|(c, m)| (c.card_id.clone(), m.load))
            .collect();
        Environment::new(self.agents.iter().cloned(), loads)
    }

    pub fn action_types(&self) -> Vec<String> {
        self.vocab
            .action_types()
            .iter()
            .map(|&t| self.vocab.name(t).expect("own token").to_string())
            .collect()
    }

    pub fn answers(&self) -> Vec<String> {
        self.vocab
            .answers()
            .iter()
            .map(|&t| self.vocab.name(t).expect("own token").to_string())
            .collect()
    }
}

pub const NETWORK_ANALYSIS: &str = "network_analysis";
pub const PROTOCOL_QUERY: &str = "protocol_query";

/// Case-study knobs. Defaults: class mix (direct, network_analysis,
/// protocol_query) = (0.2, 0.4, 0.4), success 0.9, 50 ms base latency.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyOptions {
    pub class_probs: [f64; 3],
    pub success_prob: f64,
    pub latency_base_ms: f64,
    pub latency_jitter_ms: f64,
    pub load_per_call: f64,
    pub sla_deadline_ms: f64,
}

impl Default for CaseStudyOptions {
    fn default() -> Self {
        CaseStudyOptions {
            class_probs: [0.2, 0.4, 0.4],
            success_prob: 0.9,
            latency_base_ms: 50.0,
            latency_jitter_ms: 10.0,
            load_per_call: 0.1,
            sla_deadline_ms: 150.0,
        }
    }
}

pub fn preset_case_study() -> ScenarioConfig {
    preset_case_study_with(&CaseStudyOptions::default())
}

/// One network-analysis agent, one protocol-query agent and three task
/// classes (direct answer, network analysis, protocol query).
pub fn preset_case_study_with(opts: &CaseStudyOptions) -> ScenarioConfig {
    let card = |id: &str, tag: &str, action: &str| CardFileEntry {
        card: AgentCard {
            card_id: id.into(),
            protocol_tag: tag.into(),
            supported_actions: BTreeSet::from([action.to_string()]),
            endpoint: format!("sim://{id}"),
            cost: 1.0,
        },
        metrics: AgentMetrics {
            load: 0.0,
            historical_accuracy: opts.success_prob,
            avg_latency_ms: opts.latency_base_ms,
            throughput_rps: 10.0,
            sample_count: 0,
        },
    };
    let agent = |id: &str, action: &str| SimAgentConfig {
        card_id: id.into(),
        success_prob: BTreeMap::from([(action.to_string(), opts.success_prob)]),
        latency_base_ms: opts.latency_base_ms,
        latency_jitter_ms: opts.latency_jitter_ms,
        load_per_call: opts.load_per_call,
    };
    let class = |name: &str, p: f64, action: Option<&str>, gt: &str| TaskClass {
        name: name.into(),
        probability: p,
        required_action: action.map(str::to_string),
        ground_truth: gt.into(),
        sla_deadline_ms: opts.sla_deadline_ms,
    };
    let [p_direct, p_na, p_pq] = opts.class_probs;
    ScenarioConfig {
        cards: vec![
            card("na-1", "a2a", NETWORK_ANALYSIS),
            card("pq-1", "acp", PROTOCOL_QUERY),
        ],
        agents: vec![agent("na-1", NETWORK_ANALYSIS), agent("pq-1", PROTOCOL_QUERY)],
        tasks: GeneratorConfig {
            classes: vec![
                class("direct", p_direct, None, "qa_answer"),
                class(NETWORK_ANALYSIS, p_na, Some(NETWORK_ANALYSIS), "root_cause"),
                class(PROTOCOL_QUERY, p_pq, Some(PROTOCOL_QUERY), "spec_clause"),
            ],
        },
        extra_answers: Vec::new(),
    }
}
