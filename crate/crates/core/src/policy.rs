//! Linear-softmax decision policy with analytic log-prob gradients.
//!
//! The action space is every direct-answer token followed by every
//! delegation action type. Observations are encoded as task features,
//! a one-hot step index and a one-hot last-outcome flag.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::orchestrator::{Decision, Observation, OutcomeFlag};
use crate::simenv::TaskGenerator;
use crate::vocab::{Token, Vocabulary};

/// Maps action indices to decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    answers: Vec<Token>,
    action_types: Vec<String>,
}

impl ActionSpace {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        ActionSpace {
            answers: vocab.answers().to_vec(),
            action_types: vocab
                .action_types()
                .iter()
                .map(|&t| vocab.name(t).expect("own token").to_string())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.answers.len() + self.action_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decision(&self, index: usize) -> Option<Decision> {
        if index < self.answers.len() {
            Some(Decision::DirectAnswer(self.answers[index]))
        } else {
            self.action_types
                .get(index - self.answers.len())
                .map(|a| Decision::Delegate(a.clone()))
        }
    }

    pub fn index_of(&self, decision: &Decision) -> Option<usize> {
        match decision {
            Decision::DirectAnswer(t) => self.answers.iter().position(|a| a == t),
            Decision::Delegate(a) => self
                .action_types
                .iter()
                .position(|x| x == a)
                .map(|i| i + self.answers.len()),
        }
    }

    pub fn answer_index(&self, token: Token) -> Option<usize> {
        self.answers.iter().position(|&a| a == token)
    }

    pub fn delegate_index(&self, action_type: &str) -> Option<usize> {
        self.index_of(&Decision::Delegate(action_type.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsEncoder {
    pub feature_dim: usize,
    pub max_steps: usize,
}

impl ObsEncoder {
    pub fn new(feature_dim: usize, max_steps: usize) -> Self {
        ObsEncoder {
            feature_dim,
            max_steps,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_dim + self.max_steps + OutcomeFlag::COUNT
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let n = obs.features.len().min(self.feature_dim);
        x[..n].copy_from_slice(&obs.features[..n]);
        if obs.step_index < self.max_steps {
            x[self.feature_dim + obs.step_index] = 1.0;
        }
        x[self.feature_dim + self.max_steps + obs.last_outcome.index()] = 1.0;
        x
    }
}

/// Row-major `num_actions x dim` matrix. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    rows: usize,
    cols: usize,
    theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: [usize; 2], found: [usize; 2] },
    #[error("checkpoint has {found} values for shape {shape:?}")]
    Length { shape: [usize; 2], found: usize },
    #[error("checkpoint contains non-finite values")]
    NonFinite,
    #[error("checkpoint json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PolicyParams {
            rows,
            cols,
            theta: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        PolicyParams {
            rows: r,
            cols: c,
            theta: rows.into_iter().flatten().collect(),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.theta
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.theta[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.theta[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.theta[row * self.cols..(row + 1) * self.cols]
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, k: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += k * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.shape(),
            values: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, expected: [usize; 2]) -> Result<Self, CheckpointError> {
        if ckpt.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                expected,
                found: ckpt.shape,
            });
        }
        if ckpt.values.len() != expected[0] * expected[1] {
            return Err(CheckpointError::Length {
                shape: ckpt.shape,
                found: ckpt.values.len(),
            });
        }
        if ckpt.values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        Ok(PolicyParams {
            rows: expected[0],
            cols: expected[1],
            theta: ckpt.values,
        })
    }

    pub fn checkpoint_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn parse_checkpoint(json: &str, expected: [usize; 2]) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| CheckpointError::Json(e.to_string()))?;
        Self::from_checkpoint(ckpt, expected)
    }
}

/// Anything that can produce a distribution over the action space.
pub trait Policy {
    fn num_actions(&self) -> usize;
    fn action_distribution(&self, obs: &Observation) -> Vec<f64>;
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats.
pub fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    pub params: PolicyParams,
    pub encoder: ObsEncoder,
}

impl LinearSoftmax {
    pub fn zeros(num_actions: usize, encoder: ObsEncoder) -> Self {
        LinearSoftmax {
            params: PolicyParams::zeros(num_actions, encoder.dim()),
            encoder,
        }
    }

    pub fn new(params: PolicyParams, encoder: ObsEncoder) -> Self {
        assert_eq!(params.shape()[1], encoder.dim(), "parameter width must match encoding");
        LinearSoftmax { params, encoder }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.params.shape()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.params.rows)
            .map(|a| self.params.row(a).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn probs_encoded(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn log_prob(&self, obs: &Observation, action: usize) -> f64 {
        let logits = self.logits(&self.encoder.encode(obs));
        logits[action] - log_sum_exp(&logits)
    }

    /// `(log pi(a|o), (onehot(a) - p) ⊗ x)`.
    pub fn log_prob_and_grad(&self, obs: &Observation, action: usize) -> (f64, PolicyParams) {
        let x = self.encoder.encode(obs);
        let mut grad = PolicyParams::zeros(self.params.rows, self.params.cols);
        let lp = self.accumulate_grad(&x, action, 1.0, &mut grad);
        (lp, grad)
    }

    /// Adds `scale * ∇ log pi(action | x)` into `grad`; returns the log-prob.
    pub(crate) fn accumulate_grad(&self, x: &[f64], action: usize, scale: f64, grad: &mut PolicyParams) -> f64 {
        let logits = self.logits(x);
        let lse = log_sum_exp(&logits);
        for (a, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let coeff = if a == action { 1.0 - p } else { -p };
            let c = scale * coeff;
            for (g, v) in grad.row_mut(a).iter_mut().zip(x) {
                *g += c * v;
            }
        }
        logits[action] - lse
    }

    pub fn entropy(&self, obs: &Observation) -> f64 {
        entropy_of(&self.action_distribution(obs))
    }

    /// One ascent step on the mean log-likelihood of the demonstrated
    /// actions.
    pub fn sft_update(&mut self, batch: &[SftSample], learning_rate: f64) {
        if batch.is_empty() {
            return;
        }
        let mut grad = PolicyParams::zeros(self.params.rows, self.params.cols);
        let w = 1.0 / batch.len() as f64;
        for s in batch {
            let x = self.encoder.encode(&s.obs);
            self.accumulate_grad(&x, s.demo_action, w, &mut grad);
        }
        self.params.add_scaled(&grad, learning_rate);
    }

    /// Negative mean log-likelihood of the demonstrated actions.
    pub fn sft_loss(&self, batch: &[SftSample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let total: f64 = batch.iter().map(|s| self.log_prob(&s.obs, s.demo_action)).sum();
        -total / batch.len() as f64
    }

    pub fn mean_demo_prob(&self, batch: &[SftSample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        batch
            .iter()
            .map(|s| self.log_prob(&s.obs, s.demo_action).exp())
            .sum::<f64>()
            / batch.len() as f64
    }

    pub fn greedy_action(&self, obs: &Observation) -> usize {
        argmax(&self.action_distribution(obs))
    }
}

impl Policy for LinearSoftmax {
    fn num_actions(&self) -> usize {
        self.params.rows
    }

    fn action_distribution(&self, obs: &Observation) -> Vec<f64> {
        self.probs_encoded(&self.encoder.encode(obs))
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Puts all mass on the inner policy's most likely action.
#[derive(Debug, Clone)]
pub struct Greedy<P>(pub P);

impl<P: Policy> Policy for Greedy<P> {
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    fn action_distribution(&self, obs: &Observation) -> Vec<f64> {
        let probs = self.0.action_distribution(obs);
        let mut out = vec![0.0; probs.len()];
        out[argmax(&probs)] = 1.0;
        out
    }
}

/// Same distribution for every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPolicy(pub Vec<f64>);

impl FixedPolicy {
    pub fn uniform(n: usize) -> Self {
        FixedPolicy(vec![1.0 / n as f64; n])
    }

    pub fn always(n: usize, action: usize) -> Self {
        let mut p = vec![0.0; n];
        p[action] = 1.0;
        FixedPolicy(p)
    }
}

impl Policy for FixedPolicy {
    fn num_actions(&self) -> usize {
        self.0.len()
    }

    fn action_distribution(&self, _obs: &Observation) -> Vec<f64> {
        self.0.clone()
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn action_distribution(&self, obs: &Observation) -> Vec<f64> {
        (**self).action_distribution(obs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub obs: Observation,
    pub demo_action: usize,
}

/// One line of the SFT dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub features: Vec<f64>,
    pub step: usize,
    pub last_outcome: OutcomeFlag,
    pub demo_action: usize,
}

impl From<&SftSample> for SftRecord {
    fn from(s: &SftSample) -> Self {
        SftRecord {
            features: s.obs.features.clone(),
            step: s.obs.step_index,
            last_outcome: s.obs.last_outcome,
            demo_action: s.demo_action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("bad dataset line {line}: {reason}")]
pub struct BadDataset {
    pub line: usize,
    pub reason: String,
}

/// Parses JSON-lines SFT records. Blank lines are skipped; line numbers are
/// 1-based.
pub fn parse_sft_dataset(
    text: &str,
    encoder: &ObsEncoder,
    num_actions: usize,
) -> Result<Vec<SftSample>, BadDataset> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| BadDataset { line: line_no, reason };
        let rec: SftRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.features.len() != encoder.feature_dim {
            return Err(bad(format!(
                "expected {} features, found {}",
                encoder.feature_dim,
                rec.features.len()
            )));
        }
        if rec.step >= encoder.max_steps {
            return Err(bad(format!("step {} exceeds max_steps", rec.step)));
        }
        if rec.demo_action >= num_actions {
            return Err(bad(format!("demo_action {} out of range", rec.demo_action)));
        }
        out.push(SftSample {
            obs: Observation {
                features: rec.features,
                step_index: rec.step,
                last_outcome: rec.last_outcome,
            },
            demo_action: rec.demo_action,
        });
    }
    Ok(out)
}

/// Happy-path demonstrations: direct tasks are answered at once; delegation
/// tasks delegate the required action and then answer after the agent
/// succeeds. Produces exactly `n` samples.
pub fn demonstrations<R: Rng + ?Sized>(
    generator: &TaskGenerator,
    actions: &ActionSpace,
    n: usize,
    rng: &mut R,
) -> Vec<SftSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let task = generator.sample(rng);
        let answer = actions
            .answer_index(task.ground_truth)
            .expect("ground truth is an answer token");
        let obs = |step, flag| Observation {
            features: task.feature_vector.clone(),
            step_index: step,
            last_outcome: flag,
        };
        match &task.required_action {
            None => out.push(SftSample {
                obs: obs(0, OutcomeFlag::None),
                demo_action: answer,
            }),
            Some(action) => {
                let delegate = actions.delegate_index(action).expect("action in space");
                out.push(SftSample {
                    obs: obs(0, OutcomeFlag::None),
                    demo_action: delegate,
                });
                if out.len() < n {
                    out.push(SftSample {
                        obs: obs(1, OutcomeFlag::AgentSuccess),
                        demo_action: answer,
                    });
                }
            }
        }
    }
    out
}
