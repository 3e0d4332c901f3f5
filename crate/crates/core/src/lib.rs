//! Collaborative-reasoning core: a protocol-agnostic agent registry,
//! rule-based action routing, an episode orchestrator over masked
//! trajectories, a multi-objective reward engine and a group-relative
//! policy-gradient trainer for a small analytic decision policy.

pub mod cli;
pub mod orchestrator;
pub mod policy;
pub mod registry;
pub mod rewards;
pub mod router;
pub mod simenv;
pub mod trainer;
pub mod trajectory;
pub mod vocab;

pub use orchestrator::{Decision, EpisodeOutcome, EpisodeResult, Observation, Orchestrator, OutcomeFlag, StepRecord};
pub use policy::{ActionSpace, LinearSoftmax, ObsEncoder, Policy, PolicyParams};
pub use registry::{AgentCard, AgentMetrics, Registry};
pub use rewards::{RewardVector, RewardWeights};
pub use router::RoutingWeights;
pub use simenv::{Scenario, ScenarioConfig, TaskSpec};
pub use trainer::{Trainer, TrainerConfig, TrainingReport};
pub use trajectory::{FailureKind, Trajectory};
pub use vocab::{Token, Vocabulary};
