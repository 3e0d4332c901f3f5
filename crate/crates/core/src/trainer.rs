//! Group-relative policy-gradient training with entropy-guided exploration.
//!
//! Each iteration samples a task, rolls out a group of episodes on it,
//! normalizes their terminal rewards within the group, adds a centered
//! entropy correction per decision step and takes one ascent step on the
//! masked policy-gradient objective. Only the policy's own decisions carry
//! log-prob terms, so agent-produced content can never move the parameters.

use std::collections::BTreeMap;
use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::orchestrator::{EpisodeResult, Orchestrator, StepRecord, DEFAULT_MAX_STEPS};
use crate::policy::{ActionSpace, Greedy, LinearSoftmax, ObsEncoder, Policy, PolicyParams};
use crate::registry::Registry;
use crate::rewards::{reward_vector, scalarize, NoveltyLedger, RewardVector, RewardWeights};
use crate::router::{adapt_weights, RoutingFeedback, RoutingWeights};
use crate::simenv::{stream_rng, Scenario, SimRng, TaskSpec};
use crate::trajectory::Terminal;

pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("group_size must be at least 2")]
    GroupTooSmall,
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("learning_rate must be finite and nonnegative")]
    BadLearningRate,
    #[error("max_steps must be at least 1")]
    NoSteps,
    #[error("entropy thresholds must satisfy 0 <= tau_low < tau_high")]
    BadEntropyThresholds,
    #[error("branch_factor must be at least 1")]
    BadBranchFactor,
    #[error("entropy_bonus must be finite and nonnegative")]
    BadEntropyBonus,
    #[error("adapt_step must lie in (0, 1)")]
    BadAdaptStep,
    #[error("initial parameters have shape {found:?}, expected {expected:?}")]
    ShapeMismatch { expected: [usize; 2], found: [usize; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    /// Defaults to `0.8 * ln(num_actions)` when absent.
    pub tau_high: Option<f64>,
    /// Defaults to `0.05 * ln(num_actions)` when absent.
    pub tau_low: Option<f64>,
    pub branch_factor: usize,
    pub entropy_bonus: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            tau_high: None,
            tau_low: None,
            branch_factor: 2,
            entropy_bonus: 0.1,
        }
    }
}

/// Exploration thresholds resolved against a concrete action count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyThresholds {
    pub tau_high: f64,
    pub tau_low: f64,
    pub beta: f64,
}

impl ExplorationConfig {
    pub fn resolve(&self, num_actions: usize) -> EntropyThresholds {
        let max_h = (num_actions.max(1) as f64).ln();
        EntropyThresholds {
            tau_high: self.tau_high.unwrap_or(0.8 * max_h),
            tau_low: self.tau_low.unwrap_or(0.05 * max_h),
            beta: self.entropy_bonus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub max_steps: usize,
    pub exploration: ExplorationConfig,
    /// Write a checkpoint every K iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Adapt routing weights from SLA feedback during training.
    pub adapt_routing: bool,
    pub adapt_step: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            learning_rate: 0.25,
            iterations: 500,
            max_steps: DEFAULT_MAX_STEPS,
            exploration: ExplorationConfig::default(),
            checkpoint_every: 0,
            adapt_routing: false,
            adapt_step: 0.1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, num_actions: usize) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::GroupTooSmall);
        }
        if self.iterations < 1 {
            return Err(TrainError::NoIterations);
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::BadLearningRate);
        }
        if self.max_steps < 1 {
            return Err(TrainError::NoSteps);
        }
        let t = self.exploration.resolve(num_actions);
        if !(t.tau_low >= 0.0 && t.tau_low < t.tau_high) {
            return Err(TrainError::BadEntropyThresholds);
        }
        if self.exploration.branch_factor < 1 {
            return Err(TrainError::BadBranchFactor);
        }
        if !(t.beta.is_finite() && t.beta >= 0.0) {
            return Err(TrainError::BadEntropyBonus);
        }
        if self.adapt_routing && !(self.adapt_step > 0.0 && self.adapt_step < 1.0) {
            return Err(TrainError::BadAdaptStep);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task: TaskSpec,
    pub episodes: Vec<EpisodeResult>,
    pub reward_vectors: Vec<RewardVector>,
    pub scalar_rewards: Vec<f64>,
}

/// `(r - mean) / (std + eps)` with population std; all zeros when the group
/// has no spread.
pub fn group_advantage(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    // identical rewards have std 0 exactly; the summed mean can round away
    // from them, so test equality directly
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyControl {
    pub triggered: bool,
    pub corrected: Vec<f64>,
}

/// Per-step advantages `A + beta * (H_t - mean_t H)`; triggered when any
/// decision's entropy exceeds `tau_high`.
pub fn entropy_control(steps: &[StepRecord], advantage: f64, thresholds: &EntropyThresholds) -> EntropyControl {
    let triggered = steps.iter().any(|s| s.entropy > thresholds.tau_high);
    if steps.is_empty() {
        return EntropyControl {
            triggered,
            corrected: Vec::new(),
        };
    }
    let mean_h = steps.iter().map(|s| s.entropy).sum::<f64>() / steps.len() as f64;
    let corrected = steps
        .iter()
        .map(|s| {
            if thresholds.beta == 0.0 {
                advantage
            } else {
                advantage + thresholds.beta * (s.entropy - mean_h)
            }
        })
        .collect();
    EntropyControl { triggered, corrected }
}

/// Mean decision entropy below `tau_low` signals collapse.
pub fn collapse_detected(mean_entropy: f64, thresholds: &EntropyThresholds) -> bool {
    mean_entropy < thresholds.tau_low
}

/// One ascent step on `(1/N) Σ_episodes Σ_steps A'_t ∇ log π(a_t | o_t)`.
///
/// Only step records enter the gradient; `advantages[g][e][t]` pairs with
/// `groups[g].episodes[e].steps[t]`. Contributions are summed in group,
/// episode, step order.
pub fn masked_policy_update(
    policy: &LinearSoftmax,
    groups: &[RolloutGroup],
    advantages: &[Vec<Vec<f64>>],
    learning_rate: f64,
) -> PolicyParams {
    let [rows, cols] = policy.shape();
    let mut grad = PolicyParams::zeros(rows, cols);
    let n: usize = groups.iter().map(|g| g.episodes.len()).sum();
    if n == 0 {
        return policy.params.clone();
    }
    let inv_n = 1.0 / n as f64;
    for (group, group_adv) in groups.iter().zip(advantages) {
        for (episode, episode_adv) in group.episodes.iter().zip(group_adv) {
            assert_eq!(episode.steps.len(), episode_adv.len(), "one advantage per decision step");
            for (step, &a) in episode.steps.iter().zip(episode_adv) {
                if a == 0.0 {
                    continue;
                }
                let x = policy.encoder.encode(&step.obs);
                policy.accumulate_grad(&x, step.action_index, a * inv_n, &mut grad);
            }
        }
    }
    let mut next = policy.params.clone();
    next.add_scaled(&grad, learning_rate);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub mean_entropy: f64,
    pub triggers: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub iterations: Vec<IterationStats>,
    /// Iterations whose mean decision entropy fell below `tau_low`.
    pub collapse_warnings: usize,
}

impl TrainingReport {
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.iterations {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn last(&self) -> Option<&IterationStats> {
        self.iterations.last()
    }

    /// Mean of `f` over the trailing `window` iterations.
    pub fn trailing_mean(&self, window: usize, f: impl Fn(&IterationStats) -> f64) -> f64 {
        let k = window.min(self.iterations.len()).max(1);
        let tail = &self.iterations[self.iterations.len().saturating_sub(k)..];
        tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    pub params: PolicyParams,
    pub routing: RoutingWeights,
}

/// Training/evaluation context over one scenario.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub scenario: &'a Scenario,
    pub registry: Registry,
    pub actions: ActionSpace,
    pub encoder: ObsEncoder,
    pub routing: RoutingWeights,
    pub rewards: RewardWeights,
    pub config: TrainerConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        scenario: &'a Scenario,
        routing: RoutingWeights,
        rewards: RewardWeights,
        config: TrainerConfig,
    ) -> Result<Self, TrainError> {
        let actions = ActionSpace::from_vocab(&scenario.vocab);
        config.validate(actions.len())?;
        Ok(Trainer {
            registry: scenario.registry(),
            encoder: ObsEncoder::new(scenario.generator.feature_dim(), config.max_steps),
            actions,
            scenario,
            routing,
            rewards,
            config,
        })
    }

    pub fn param_shape(&self) -> [usize; 2] {
        [self.actions.len(), self.encoder.dim()]
    }

    pub fn thresholds(&self) -> EntropyThresholds {
        self.config.exploration.resolve(self.actions.len())
    }

    pub fn policy(&self, params: PolicyParams) -> Result<LinearSoftmax, TrainError> {
        if params.shape() != self.param_shape() {
            return Err(TrainError::ShapeMismatch {
                expected: self.param_shape(),
                found: params.shape(),
            });
        }
        Ok(LinearSoftmax::new(params, self.encoder))
    }

    pub fn uniform_policy(&self) -> LinearSoftmax {
        LinearSoftmax::zeros(self.actions.len(), self.encoder)
    }

    pub fn orchestrator(&self, routing: RoutingWeights) -> Orchestrator<'_> {
        Orchestrator {
            vocab: &self.scenario.vocab,
            actions: &self.actions,
            registry: &self.registry,
            weights: routing,
            max_steps: self.config.max_steps,
        }
    }

    /// Runs `g` episodes of `task`; episode `i` uses stream
    /// `(base_seed, stream_offset + i)` and a fresh environment. Rewards are
    /// computed in index order so ledger updates are deterministic.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_group<P: Policy + ?Sized>(
        &self,
        task: &TaskSpec,
        policy: &P,
        g: usize,
        routing: RoutingWeights,
        base_seed: u64,
        stream_offset: u64,
        ledger: &mut NoveltyLedger,
    ) -> RolloutGroup {
        let orch = self.orchestrator(routing);
        let episodes: Vec<EpisodeResult> = (0..g)
            .map(|i| {
                let mut rng = stream_rng(base_seed, stream_offset + i as u64);
                let mut env = self.scenario.environment();
                orch.execute_episode(task, policy, &mut env, &mut rng)
            })
            .collect();
        let mut reward_vectors = Vec::with_capacity(g);
        let mut scalar_rewards = Vec::with_capacity(g);
        for ep in &episodes {
            let v = reward_vector(
                &ep.trajectory,
                &ep.outcome,
                task,
                &self.scenario.vocab,
                self.config.max_steps,
                ledger,
            );
            scalar_rewards.push(scalarize(&v, &self.rewards));
            reward_vectors.push(v);
        }
        RolloutGroup {
            task: task.clone(),
            episodes,
            reward_vectors,
            scalar_rewards,
        }
    }

    /// Group advantages plus per-step entropy correction for every group.
    /// Returns the corrected advantages and the number of triggered episodes.
    pub fn corrected_advantages(&self, groups: &[RolloutGroup]) -> (Vec<Vec<Vec<f64>>>, Vec<bool>) {
        let thresholds = self.thresholds();
        let mut all = Vec::with_capacity(groups.len());
        let mut triggered = Vec::new();
        for g in groups {
            let adv = group_advantage(&g.scalar_rewards);
            let mut per_episode = Vec::with_capacity(g.episodes.len());
            for (ep, &a) in g.episodes.iter().zip(&adv) {
                let ctl = entropy_control(&ep.steps, a, &thresholds);
                triggered.push(ctl.triggered);
                per_episode.push(ctl.corrected);
            }
            all.push(per_episode);
        }
        (all, triggered)
    }

    pub fn train(&self, seed: u64, initial: Option<PolicyParams>) -> Result<TrainOutcome, TrainError> {
        self.train_with(seed, initial, |_, _| {})
    }

    /// Full training loop. `on_checkpoint(iteration, params)` fires every
    /// `checkpoint_every` iterations.
    pub fn train_with<F>(
        &self,
        seed: u64,
        initial: Option<PolicyParams>,
        mut on_checkpoint: F,
    ) -> Result<TrainOutcome, TrainError>
    where
        F: FnMut(usize, &PolicyParams),
    {
        let mut policy = match initial {
            Some(p) => self.policy(p)?,
            None => self.uniform_policy(),
        };
        let thresholds = self.thresholds();
        let g = self.config.group_size;
        let mut master = stream_rng(seed, u64::MAX);
        let mut ledger = NoveltyLedger::new();
        let mut routing = self.routing;
        let mut report = TrainingReport::default();
        let mut branch_task: Option<TaskSpec> = None;

        for it in 0..self.config.iterations {
            let iter_seed: u64 = master.gen();
            let task = self.scenario.generator.sample(&mut master);

            let mut tasks = vec![task];
            if let Some(t) = branch_task.take() {
                tasks.extend(std::iter::repeat_n(t, self.config.exploration.branch_factor));
            }
            let groups: Vec<RolloutGroup> = tasks
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    self.rollout_group(t, &policy, g, routing, iter_seed, (j * g) as u64, &mut ledger)
                })
                .collect();

            let (advantages, triggered) = self.corrected_advantages(&groups);
            // the first group that tripped the threshold is re-sampled next iteration
            let mut offset = 0;
            for grp in &groups {
                let n = grp.episodes.len();
                if branch_task.is_none() && triggered[offset..offset + n].iter().any(|&t| t) {
                    branch_task = Some(grp.task.clone());
                }
                offset += n;
            }

            policy.params = masked_policy_update(&policy, &groups, &advantages, self.config.learning_rate);

            let stats = iteration_stats(it + 1, &groups, triggered.iter().filter(|&&t| t).count());
            if collapse_detected(stats.mean_entropy, &thresholds) {
                report.collapse_warnings += 1;
            }
            report.iterations.push(stats);

            if self.config.adapt_routing {
                for ep in groups.iter().flat_map(|grp| &grp.episodes) {
                    let fb = RoutingFeedback {
                        episode_latency_ms: ep.outcome.total_latency_ms,
                        sla_met: ep.outcome.sla_met,
                    };
                    routing = adapt_weights(&routing, fb, self.config.adapt_step);
                }
            }

            if self.config.checkpoint_every > 0 && (it + 1) % self.config.checkpoint_every == 0 {
                on_checkpoint(it + 1, &policy.params);
            }
        }
        Ok(TrainOutcome {
            report,
            params: policy.params,
            routing,
        })
    }

    pub fn evaluate<P: Policy + ?Sized>(
        &self,
        policy: &P,
        mode: EvalMode,
        episodes: usize,
        seed: u64,
    ) -> EvalSummary {
        evaluate(self, policy, mode, episodes, seed)
    }
}

fn iteration_stats(iteration: usize, groups: &[RolloutGroup], triggers: usize) -> IterationStats {
    let mut n = 0usize;
    let mut reward = 0.0;
    let mut hits = 0.0;
    let mut h_sum = 0.0;
    let mut h_n = 0usize;
    for grp in groups {
        for (ep, (r, v)) in grp.episodes.iter().zip(grp.scalar_rewards.iter().zip(&grp.reward_vectors)) {
            n += 1;
            reward += r;
            hits += v.accuracy;
            for s in &ep.steps {
                h_sum += s.entropy;
                h_n += 1;
            }
        }
    }
    let n = n.max(1) as f64;
    IterationStats {
        iteration,
        mean_reward: reward / n,
        success_rate: hits / n,
        mean_entropy: if h_n == 0 { 0.0 } else { h_sum / h_n as f64 },
        triggers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Argmax action at every decision.
    Greedy,
    /// Sample from the policy distribution.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_latency_ms: f64,
    pub sla_violation_rate: f64,
    pub mean_invocations: f64,
    pub failure_counts: BTreeMap<String, usize>,
}

/// Evaluates `policy` on `episodes` seeded tasks; episode `i` draws its task
/// and dynamics from stream `(seed, i)`.
pub fn evaluate<P: Policy + ?Sized>(
    trainer: &Trainer<'_>,
    policy: &P,
    mode: EvalMode,
    episodes: usize,
    seed: u64,
) -> EvalSummary {
    let orch = trainer.orchestrator(trainer.routing);
    let greedy = Greedy(policy);
    let mut ledger = NoveltyLedger::new();
    let mut hits = 0.0;
    let mut reward = 0.0;
    let mut latency = 0.0;
    let mut violations = 0usize;
    let mut invocations = 0usize;
    let mut failure_counts = BTreeMap::new();
    for i in 0..episodes {
        let mut rng: SimRng = stream_rng(seed, i as u64);
        let task = trainer.scenario.generator.sample(&mut rng);
        let mut env = trainer.scenario.environment();
        let ep = match mode {
            EvalMode::Greedy => orch.execute_episode(&task, &greedy, &mut env, &mut rng),
            EvalMode::Sample => orch.execute_episode(&task, policy, &mut env, &mut rng),
        };
        let v = reward_vector(
            &ep.trajectory,
            &ep.outcome,
            &task,
            &trainer.scenario.vocab,
            trainer.config.max_steps,
            &mut ledger,
        );
        hits += v.accuracy;
        reward += scalarize(&v, &trainer.rewards);
        latency += ep.outcome.total_latency_ms;
        invocations += ep.outcome.invocation_count;
        if !ep.outcome.sla_met {
            violations += 1;
        }
        let kind = match (&ep.outcome.failure, ep.trajectory.terminal()) {
            (Some(f), _) => Some(f.kind.as_str()),
            (None, Terminal::Truncated) => Some("truncated"),
            _ => None,
        };
        if let Some(k) = kind {
            *failure_counts.entry(k.to_string()).or_insert(0) += 1;
        }
    }
    let n = episodes.max(1) as f64;
    EvalSummary {
        episodes,
        success_rate: hits / n,
        mean_reward: reward / n,
        mean_latency_ms: latency / n,
        sla_violation_rate: violations as f64 / n,
        mean_invocations: invocations as f64 / n,
        failure_counts,
    }
}
