//! Multi-objective terminal reward: accuracy, format, efficiency, QoS and
//! exploration, scalarized with validated weights.

use std::collections::BTreeMap;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::orchestrator::EpisodeOutcome;
use crate::simenv::TaskSpec;
use crate::trajectory::Trajectory;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector {
    pub accuracy: f64,
    pub format: f64,
    pub efficiency: f64,
    pub qos: f64,
    pub exploration: f64,
}

impl RewardVector {
    pub fn new(accuracy: f64, format: f64, efficiency: f64, qos: f64, exploration: f64) -> Self {
        RewardVector {
            accuracy,
            format,
            efficiency,
            qos,
            exploration,
        }
    }

    pub fn in_range(&self) -> bool {
        let binary = |v: f64| v == 0.0 || v == 1.0;
        binary(self.accuracy)
            && binary(self.format)
            && (0.0..=1.0).contains(&self.efficiency)
            && (-1.0..=1.0).contains(&self.qos)
            && (0.0..=1.0).contains(&self.exploration)
    }
}

impl Add for RewardVector {
    type Output = RewardVector;

    fn add(self, o: RewardVector) -> RewardVector {
        RewardVector {
            accuracy: self.accuracy + o.accuracy,
            format: self.format + o.format,
            efficiency: self.efficiency + o.efficiency,
            qos: self.qos + o.qos,
            exploration: self.exploration + o.exploration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("reward weights must be finite and nonnegative")]
    Negative,
    #[error("lambda_acc must be positive")]
    AccuracyNotPositive,
    #[error("lambda_fmt must be less than lambda_acc")]
    FormatNotBelowAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct RewardWeights {
    acc: f64,
    fmt: f64,
    eff: f64,
    qos: f64,
    exp: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawWeights {
    lambda_acc: f64,
    lambda_fmt: f64,
    lambda_eff: f64,
    lambda_qos: f64,
    lambda_exp: f64,
}

impl TryFrom<RawWeights> for RewardWeights {
    type Error = RewardError;

    fn try_from(r: RawWeights) -> Result<Self, Self::Error> {
        RewardWeights::new(r.lambda_acc, r.lambda_fmt, r.lambda_eff, r.lambda_qos, r.lambda_exp)
    }
}

impl From<RewardWeights> for RawWeights {
    fn from(w: RewardWeights) -> Self {
        RawWeights {
            lambda_acc: w.acc,
            lambda_fmt: w.fmt,
            lambda_eff: w.eff,
            lambda_qos: w.qos,
            lambda_exp: w.exp,
        }
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights::new(1.0, 0.2, 0.2, 0.2, 0.1).expect("defaults are valid")
    }
}

impl RewardWeights {
    /// Format reward must stay strictly below accuracy so a well-formatted
    /// wrong answer never beats a correct one.
    pub fn new(acc: f64, fmt: f64, eff: f64, qos: f64, exp: f64) -> Result<Self, RewardError> {
        if [acc, fmt, eff, qos, exp]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(RewardError::Negative);
        }
        if acc <= 0.0 {
            return Err(RewardError::AccuracyNotPositive);
        }
        if fmt >= acc {
            return Err(RewardError::FormatNotBelowAccuracy);
        }
        Ok(RewardWeights { acc, fmt, eff, qos, exp })
    }

    pub fn lambda_acc(&self) -> f64 {
        self.acc
    }
    pub fn lambda_fmt(&self) -> f64 {
        self.fmt
    }
    pub fn lambda_eff(&self) -> f64 {
        self.eff
    }
    pub fn lambda_qos(&self) -> f64 {
        self.qos
    }
    pub fn lambda_exp(&self) -> f64 {
        self.exp
    }
}

pub fn accuracy_reward(outcome: &EpisodeOutcome, task: &TaskSpec) -> f64 {
    if outcome.failure.is_none() && outcome.final_answer == Some(task.ground_truth) {
        1.0
    } else {
        0.0
    }
}

pub fn format_reward(traj: &Trajectory, vocab: &Vocabulary) -> f64 {
    if traj.validate(vocab).is_well_formed() {
        1.0
    } else {
        0.0
    }
}

pub fn efficiency_reward(outcome: &EpisodeOutcome, max_steps: usize) -> f64 {
    let max_steps = max_steps.max(1) as f64;
    (1.0 - outcome.invocation_count as f64 / max_steps).clamp(0.0, 1.0)
}

/// 1 inside the deadline, then a linear penalty reaching -1 at twice the
/// deadline.
pub fn qos_reward(latency_ms: f64, deadline_ms: f64) -> f64 {
    if latency_ms <= deadline_ms {
        1.0
    } else {
        (1.0 - 2.0 * (latency_ms - deadline_ms) / deadline_ms).max(-1.0)
    }
}

/// Visit counts per delegation signature.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoveltyLedger {
    counts: BTreeMap<Vec<String>, u64>,
}

impl NoveltyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, signature: &[String]) -> u64 {
        self.counts.get(signature).copied().unwrap_or(0)
    }

    /// `1/sqrt(1 + prior visits)`, then records the visit.
    pub fn exploration_reward(&mut self, signature: &[String]) -> f64 {
        let c = self.counts.entry(signature.to_vec()).or_insert(0);
        let r = 1.0 / (1.0 + *c as f64).sqrt();
        *c += 1;
        r
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn scalarize(v: &RewardVector, w: &RewardWeights) -> f64 {
    w.acc * v.accuracy + w.fmt * v.format + w.eff * v.efficiency + w.qos * v.qos + w.exp * v.exploration
}

/// Computes the full reward vector for a finished episode; updates the
/// ledger.
pub fn reward_vector(
    traj: &Trajectory,
    outcome: &EpisodeOutcome,
    task: &TaskSpec,
    vocab: &Vocabulary,
    max_steps: usize,
    ledger: &mut NoveltyLedger,
) -> RewardVector {
    RewardVector {
        accuracy: accuracy_reward(outcome, task),
        format: format_reward(traj, vocab),
        efficiency: efficiency_reward(outcome, max_steps),
        qos: qos_reward(outcome.total_latency_ms, task.sla_deadline_ms),
        exploration: ledger.exploration_reward(&outcome.delegation_signature),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{FailureKind, FailureReport};
    use crate::vocab::Token;

    fn outcome(answer: Option<Token>, invocations: usize) -> EpisodeOutcome {
        EpisodeOutcome {
            final_answer: answer,
            total_latency_ms: 0.0,
            invocation_count: invocations,
            sla_met: true,
            failure: None,
            delegation_signature: vec![],
        }
    }

    fn task(gt: Token) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            class_index: 0,
            feature_vector: vec![1.0],
            required_action: None,
            ground_truth: gt,
            sla_deadline_ms: 100.0,
        }
    }

    #[test]
    fn accuracy_cases() {
        let gt = Token(9);
        assert_eq!(accuracy_reward(&outcome(Some(gt), 0), &task(gt)), 1.0);
        assert_eq!(accuracy_reward(&outcome(None, 4), &task(gt)), 0.0);
        let mut failed = outcome(Some(gt), 0);
        failed.failure = Some(FailureReport {
            kind: FailureKind::IndicatorDisorder,
            position: Some(0),
            detail: String::new(),
        });
        assert_eq!(accuracy_reward(&failed, &task(gt)), 0.0);
    }

    #[test]
    fn efficiency_cases() {
        assert_eq!(efficiency_reward(&outcome(None, 0), 4), 1.0);
        assert_eq!(efficiency_reward(&outcome(None, 4), 4), 0.0);
        assert_eq!(efficiency_reward(&outcome(None, 1), 4), 0.75);
        assert_eq!(efficiency_reward(&outcome(None, 9), 4), 0.0);
    }

    #[test]
    fn qos_cases() {
        assert_eq!(qos_reward(100.0, 100.0), 1.0);
        assert_eq!(qos_reward(150.0, 100.0), 0.0);
        assert_eq!(qos_reward(200.0, 100.0), -1.0);
        assert_eq!(qos_reward(500.0, 100.0), -1.0);
    }

    #[test]
    fn exploration_cases() {
        let mut l = NoveltyLedger::new();
        let sig = vec!["network_analysis".to_string()];
        assert_eq!(l.exploration_reward(&sig), 1.0);
        l.exploration_reward(&sig);
        l.exploration_reward(&sig);
        assert_eq!(l.count(&sig), 3);
        assert_eq!(l.exploration_reward(&sig), 0.5);
        assert_eq!(l.count(&sig), 4);
        assert_eq!(l.exploration_reward(&[]), 1.0);
    }

    #[test]
    fn scalarize_cases() {
        let w = RewardWeights::default();
        let v = RewardVector::new(1.0, 1.0, 1.0, 1.0, 0.0);
        assert!((scalarize(&v, &w) - 1.6).abs() < 1e-12);
        assert_eq!(scalarize(&RewardVector::default(), &w), 0.0);
    }

    #[test]
    fn weight_constraints() {
        assert_eq!(
            RewardWeights::new(1.0, 1.0, 0.2, 0.2, 0.1),
            Err(RewardError::FormatNotBelowAccuracy)
        );
        assert_eq!(
            RewardWeights::new(0.0, 0.0, 0.2, 0.2, 0.1),
            Err(RewardError::AccuracyNotPositive)
        );
        assert_eq!(RewardWeights::new(1.0, -0.1, 0.2, 0.2, 0.1), Err(RewardError::Negative));
        let json = r#"{"lambda_acc":1.0,"lambda_fmt":1.0,"lambda_eff":0.2,"lambda_qos":0.2,"lambda_exp":0.1}"#;
        let err = serde_json::from_str::<RewardWeights>(json).unwrap_err();
        assert!(err.to_string().contains("lambda_fmt must be less than lambda_acc"));
    }
}
