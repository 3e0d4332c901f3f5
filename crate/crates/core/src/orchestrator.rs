//! Episode loop: interpret the task, let the policy answer or delegate,
//! route and invoke agents, integrate their answers, finalize.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{entropy_of, ActionSpace, Policy};
use crate::registry::Registry;
use crate::router::{route, RoutingWeights};
use crate::simenv::{AgentResponse, Environment, TaskSpec};
use crate::trajectory::{
    parse_action, FailureKind, FailureReport, Terminal, Trajectory, TrajectoryError, Validation,
};
use crate::vocab::{Token, Vocabulary};

pub const DEFAULT_MAX_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFlag {
    #[default]
    None,
    AgentSuccess,
    AgentFailure,
}

impl OutcomeFlag {
    pub const COUNT: usize = 3;
    pub const ALL: [OutcomeFlag; 3] = [OutcomeFlag::None, OutcomeFlag::AgentSuccess, OutcomeFlag::AgentFailure];

    pub fn index(self) -> usize {
        match self {
            OutcomeFlag::None => 0,
            OutcomeFlag::AgentSuccess => 1,
            OutcomeFlag::AgentFailure => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub step_index: usize,
    pub last_outcome: OutcomeFlag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    DirectAnswer(Token),
    Delegate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub final_answer: Option<Token>,
    pub total_latency_ms: f64,
    pub invocation_count: usize,
    pub sla_met: bool,
    pub failure: Option<FailureReport>,
    /// Action types actually invoked, in order.
    pub delegation_signature: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    pub action_index: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub outcome: EpisodeOutcome,
    pub steps: Vec<StepRecord>,
}

pub fn interpret(task: &TaskSpec) -> Observation {
    Observation {
        features: task.feature_vector.clone(),
        step_index: 0,
        last_outcome: OutcomeFlag::None,
    }
}

/// Samples an action index by inverse CDF over the policy's distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

pub fn decide<P: Policy + ?Sized, R: Rng + ?Sized>(
    obs: &Observation,
    policy: &P,
    actions: &ActionSpace,
    rng: &mut R,
) -> (Decision, usize, f64) {
    let probs = policy.action_distribution(obs);
    let idx = sample_index(&probs, rng);
    let decision = actions.decision(idx).expect("policy covers the action space");
    (decision, idx, probs[idx].ln())
}

/// Inserts the filtered agent answer and a loss-excluded system marker
/// carrying the success flag. Leaves `traj` untouched on error.
pub fn integrate(
    traj: &mut Trajectory,
    response: &AgentResponse,
    card_id: &str,
) -> Result<(), TrajectoryError> {
    traj.insert_agent_response(card_id, &response.raw_tokens)?;
    let marker = if response.succeeded {
        Token::AGENT_OK
    } else {
        Token::AGENT_FAIL
    };
    traj.append_system(vec![marker])
}

/// Shared, read-only context for running episodes.
#[derive(Debug, Clone, Copy)]
pub struct Orchestrator<'a> {
    pub vocab: &'a Vocabulary,
    pub actions: &'a ActionSpace,
    pub registry: &'a Registry,
    pub weights: RoutingWeights,
    pub max_steps: usize,
}

impl<'a> Orchestrator<'a> {
    fn goal_payload(&self, task: &TaskSpec) -> Vec<Token> {
        task.feature_vector
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .filter_map(|(i, _)| self.vocab.payload(i))
            .collect()
    }

    pub fn execute_episode<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        task: &TaskSpec,
        policy: &P,
        env: &mut Environment,
        rng: &mut R,
    ) -> EpisodeResult {
        assert!(self.max_steps >= 1, "max_steps must be at least 1");
        let clock_start = env.clock_ms();
        let mut traj = Trajectory::new();
        let mut steps = Vec::new();
        let mut failure: Option<FailureReport> = None;
        let mut final_answer = None;
        let mut signature = Vec::new();
        let mut grounded: Vec<Token> = Vec::new();
        let mut obs = interpret(task);

        for step in 0..self.max_steps {
            obs.step_index = step;
            let probs = policy.action_distribution(&obs);
            let idx = sample_index(&probs, rng);
            let decision = self.actions.decision(idx).expect("policy covers the action space");
            steps.push(StepRecord {
                obs: obs.clone(),
                action_index: idx,
                log_prob: probs[idx].ln(),
                entropy: entropy_of(&probs),
            });

            match decision {
                Decision::DirectAnswer(answer) => {
                    traj.append_core(vec![answer]).expect("open");
                    traj.close(Terminal::Answered(answer)).expect("open");
                    final_answer = Some(answer);
                    if task.required_action.is_some() && !grounded.contains(&answer) {
                        failure = Some(FailureReport {
                            kind: FailureKind::UngroundedAnswer,
                            position: Some(traj.token_count() - 1),
                            detail: "answer not backed by a successful agent call".into(),
                        });
                    }
                    break;
                }
                Decision::Delegate(action_type) => {
                    let span_start = traj.token_count();
                    let action_token = self.vocab.token(&action_type).expect("action type in vocabulary");
                    let mut span = vec![Token::ACTION_OPEN, action_token];
                    span.extend(self.goal_payload(task));
                    span.push(Token::ACTION_CLOSE);
                    traj.append_core(span).expect("open");
                    let invocation = parse_action(traj.segments().last().expect("just pushed"), self.vocab)
                        .expect("orchestrator emits well-formed spans");

                    let fail = |kind: FailureKind, detail: String| FailureReport {
                        kind,
                        position: Some(span_start),
                        detail,
                    };
                    let card_id = match route(&action_type, self.registry, &self.weights) {
                        Ok(id) => id,
                        Err(e) => {
                            failure = Some(fail(FailureKind::NoAgentForAction, e.to_string()));
                            traj.close(Terminal::Failed(FailureKind::NoAgentForAction)).expect("open");
                            break;
                        }
                    };
                    let response = match env.invoke_agent(&card_id, &invocation, task, rng) {
                        Ok(r) => r,
                        Err(e) => {
                            failure = Some(fail(FailureKind::InvocationError, e.to_string()));
                            traj.close(Terminal::Failed(FailureKind::InvocationError)).expect("open");
                            break;
                        }
                    };
                    if let Err(e) = integrate(&mut traj, &response, &card_id) {
                        failure = Some(fail(FailureKind::MalformedAgentResponse, e.to_string()));
                        traj.close(Terminal::Failed(FailureKind::MalformedAgentResponse)).expect("open");
                        break;
                    }
                    signature.push(action_type);
                    if response.succeeded {
                        grounded.extend(
                            traj.segments()
                                .iter()
                                .rev()
                                .find(|s| s.is_agent())
                                .map(|s| s.tokens().to_vec())
                                .unwrap_or_default(),
                        );
                        obs.last_outcome = OutcomeFlag::AgentSuccess;
                    } else {
                        obs.last_outcome = OutcomeFlag::AgentFailure;
                    }
                }
            }
        }
        if traj.is_open() {
            traj.close(Terminal::Truncated).expect("open");
        }
        if failure.is_none() {
            if let Validation::Failure(report) = traj.validate(self.vocab) {
                failure = Some(report);
            }
        }

        let total_latency_ms = env.clock_ms() - clock_start;
        let outcome = EpisodeOutcome {
            final_answer,
            total_latency_ms,
            invocation_count: signature.len(),
            sla_met: total_latency_ms <= task.sla_deadline_ms,
            failure,
            delegation_signature: signature,
        };
        EpisodeResult {
            trajectory: traj,
            outcome,
            steps,
        }
    }
}
