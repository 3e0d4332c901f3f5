//! Independent oracles shared by the integration tests.
//!
//! The policy-value oracle re-derives episode dynamics from the scenario
//! config alone (no simulator code): it walks the success/failure tree of a
//! deterministic tabular policy and takes the QoS expectation over latency
//! jitter in closed form (Irwin-Hall).

#![allow(dead_code)]

use std::collections::BTreeSet;

use netgpt::orchestrator::{Observation, OutcomeFlag};
use netgpt::policy::Policy;
use netgpt::rewards::RewardWeights;
use netgpt::simenv::ScenarioConfig;

/// `E[(S - x)+]` where `S` is a sum of `k` independent U(0,1).
pub fn irwin_hall_excess(k: usize, x: f64) -> f64 {
    if k == 0 {
        return (-x).max(0.0);
    }
    // E[(x - S)+] is the (k+1)-fold integral of the density: a truncated
    // power sum.
    let mut fact = 1.0;
    for i in 1..=k + 1 {
        fact *= i as f64;
    }
    let mut lower = 0.0;
    let mut binom = 1.0;
    for i in 0..=k {
        let t = (x - i as f64).max(0.0);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        lower += sign * binom * t.powi(k as i32 + 1);
        binom = binom * (k - i) as f64 / (i + 1) as f64;
    }
    lower /= fact;
    k as f64 / 2.0 - x + lower
}

/// `E[(L - a)+]` for `L = c + jitter * S_k`.
fn excess(c: f64, jitter: f64, k: usize, a: f64) -> f64 {
    if k == 0 || jitter == 0.0 {
        return (c - a).max(0.0);
    }
    jitter * irwin_hall_excess(k, (a - c) / jitter)
}

/// Expected QoS reward when latency is `c` plus `k` jitter draws of
/// U(0, jitter), deadline `d`. Uses `q(L) = 1 - (2/d)((L-d)+ - (L-2d)+)`.
pub fn expected_qos(c: f64, jitter: f64, k: usize, d: f64) -> f64 {
    1.0 - 2.0 / d * (excess(c, jitter, k, d) - excess(c, jitter, k, 2.0 * d))
}

#[derive(Debug, Clone)]
pub struct OClass {
    pub probability: f64,
    pub needs_agent: bool,
    pub answer: usize,
    pub deadline: f64,
}

#[derive(Debug, Clone)]
pub struct OAgent {
    pub base: f64,
    pub jitter: f64,
    pub load_per_call: f64,
    pub initial_load: f64,
}

/// Per action type: serving agent index and success probability.
#[derive(Debug, Clone)]
pub struct OAction {
    pub agent: usize,
    pub success: f64,
}

#[derive(Debug, Clone)]
pub struct OracleWorld {
    pub classes: Vec<OClass>,
    pub n_answers: usize,
    pub actions: Vec<OAction>,
    pub agents: Vec<OAgent>,
    pub max_steps: usize,
    /// (acc, fmt, eff, qos); the exploration term is taken at its limit 0.
    pub weights: [f64; 4],
}

pub const LOAD_DECAY: f64 = 0.9;
pub const TIE: f64 = 1e-9;

impl OracleWorld {
    /// Only scenarios where each action type has exactly one serving card
    /// are supported (routing is then trivial).
    pub fn from_config(cfg: &ScenarioConfig, max_steps: usize, w: &RewardWeights) -> Self {
        let mut answers: Vec<String> = Vec::new();
        for c in &cfg.tasks.classes {
            if !answers.contains(&c.ground_truth) {
                answers.push(c.ground_truth.clone());
            }
        }
        for a in &cfg.extra_answers {
            if !answers.contains(a) {
                answers.push(a.clone());
            }
        }
        let action_types: BTreeSet<String> = cfg
            .cards
            .iter()
            .flat_map(|e| e.card.supported_actions.iter().cloned())
            .collect();
        let agents: Vec<OAgent> = cfg
            .cards
            .iter()
            .map(|e| {
                let a = cfg
                    .agents
                    .iter()
                    .find(|a| a.card_id == e.card.card_id)
                    .expect("every card has a simulated agent");
                OAgent {
                    base: a.latency_base_ms,
                    jitter: a.latency_jitter_ms,
                    load_per_call: a.load_per_call,
                    initial_load: e.metrics.load,
                }
            })
            .collect();
        let actions = action_types
            .iter()
            .map(|t| {
                let serving: Vec<usize> = cfg
                    .cards
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.card.supported_actions.contains(t))
                    .map(|(i, _)| i)
                    .collect();
                assert_eq!(serving.len(), 1, "oracle needs a unique card per action");
                let card_id = &cfg.cards[serving[0]].card.card_id;
                let agent_cfg = cfg.agents.iter().find(|a| &a.card_id == card_id).unwrap();
                OAction {
                    agent: serving[0],
                    success: agent_cfg.success_prob[t],
                }
            })
            .collect();
        let classes = cfg
            .tasks
            .classes
            .iter()
            .map(|c| OClass {
                probability: c.probability,
                needs_agent: c.required_action.is_some(),
                answer: answers.iter().position(|a| a == &c.ground_truth).unwrap(),
                deadline: c.sla_deadline_ms,
            })
            .collect();
        let jitters: BTreeSet<u64> = agents.iter().map(|a: &OAgent| a.jitter.to_bits()).collect();
        assert!(jitters.len() <= 1, "oracle needs a common jitter width");
        OracleWorld {
            classes,
            n_answers: answers.len(),
            actions,
            agents,
            max_steps,
            weights: [w.lambda_acc(), w.lambda_fmt(), w.lambda_eff(), w.lambda_qos()],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_answers + self.actions.len()
    }

    /// Observations per class: step 0, then (step, ok|fail) for later steps.
    pub fn n_obs(&self) -> usize {
        1 + 2 * (self.max_steps - 1)
    }

    pub fn obs_index(step: usize, failed: bool) -> usize {
        if step == 0 {
            0
        } else {
            2 * step - 1 + failed as usize
        }
    }

    fn terminal(&self, class: &OClass, correct: bool, invocations: usize, c: f64, k: usize) -> f64 {
        let [acc, fmt, eff, qos] = self.weights;
        let jitter = self.agents.first().map(|a| a.jitter).unwrap_or(0.0);
        acc * correct as u8 as f64
            + fmt
            + eff * (1.0 - invocations as f64 / self.max_steps as f64).clamp(0.0, 1.0)
            + qos * expected_qos(c, jitter, k, class.deadline)
    }

    /// Exact expected scalar reward of tabular policy `table` (indexed by
    /// [`Self::obs_index`]) on class `ci`.
    pub fn value(&self, ci: usize, table: &[usize]) -> f64 {
        let loads: Vec<f64> = self.agents.iter().map(|a| a.initial_load).collect();
        self.walk(ci, table, 0, false, loads, 0, 0.0, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        ci: usize,
        table: &[usize],
        step: usize,
        failed: bool,
        mut loads: Vec<f64>,
        calls: usize,
        c: f64,
        grounded: bool,
    ) -> f64 {
        let class = &self.classes[ci];
        let a = table[Self::obs_index(step, failed)];
        if a < self.n_answers {
            let correct = a == class.answer && (!class.needs_agent || grounded);
            return self.terminal(class, correct, calls, c, calls);
        }
        let act = &self.actions[a - self.n_answers];
        let agent = &self.agents[act.agent];
        if calls > 0 {
            for l in loads.iter_mut() {
                *l *= LOAD_DECAY;
            }
        }
        let c = c + agent.base * (1.0 + loads[act.agent]);
        loads[act.agent] = (loads[act.agent] + agent.load_per_call).clamp(0.0, 1.0);
        let calls = calls + 1;
        if step + 1 == self.max_steps {
            return self.terminal(class, false, calls, c, calls);
        }
        let ok = self.walk(ci, table, step + 1, false, loads.clone(), calls, c, true);
        let fail = self.walk(ci, table, step + 1, true, loads, calls, c, grounded);
        act.success * ok + (1.0 - act.success) * fail
    }

    /// Best value for class `ci` and every tabular policy attaining it.
    pub fn optimal_class(&self, ci: usize) -> (f64, Vec<Vec<usize>>) {
        let n = self.n_actions();
        let m = self.n_obs();
        let mut table = vec![0usize; m];
        let mut best = f64::NEG_INFINITY;
        let mut winners: Vec<Vec<usize>> = Vec::new();
        loop {
            let v = self.value(ci, &table);
            if v > best + TIE {
                best = v;
                winners.clear();
                winners.push(table.clone());
            } else if (v - best).abs() <= TIE {
                winners.push(table.clone());
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == m {
                    return (best, winners);
                }
                table[i] += 1;
                if table[i] < n {
                    break;
                }
                table[i] = 0;
                i += 1;
            }
        }
    }

    /// Expected scalar reward of the best deterministic policy.
    pub fn optimal_value(&self) -> f64 {
        (0..self.classes.len())
            .map(|ci| self.classes[ci].probability * self.optimal_class(ci).0)
            .sum()
    }
}

/// Deterministic tabular policy over (class, step, last outcome). The class
/// is read off the one-hot prefix of the feature vector.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    pub n_actions: usize,
    pub tables: Vec<Vec<usize>>,
}

impl Policy for TablePolicy {
    fn num_actions(&self) -> usize {
        self.n_actions
    }

    fn action_distribution(&self, obs: &Observation) -> Vec<f64> {
        let ci = obs.features[..self.tables.len()]
            .iter()
            .position(|&f| f > 0.5)
            .expect("one-hot class prefix");
        let failed = obs.last_outcome == OutcomeFlag::AgentFailure;
        let a = self.tables[ci][OracleWorld::obs_index(obs.step_index, failed)];
        let mut p = vec![0.0; self.n_actions];
        p[a] = 1.0;
        p
    }
}

/// Observation for class `ci` in the case-study feature layout.
pub fn class_obs(n_classes: usize, ci: usize, needs_agent: bool, step: usize, flag: OutcomeFlag) -> Observation {
    let mut features = vec![0.0; n_classes + 1];
    features[ci] = 1.0;
    if needs_agent {
        features[n_classes] = 1.0;
    }
    Observation {
        features,
        step_index: step,
        last_outcome: flag,
    }
}
