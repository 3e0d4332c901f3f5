//! Rule-based routing: deterministic weighted scoring over registry metrics.

use serde::{Deserialize, Serialize};

use crate::registry::{AgentCard, AgentMetrics, Registry};

/// Scores within this relative distance of each other count as tied, so
/// uniform rescaling of the weights cannot flip a selection through rounding.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    pub w_load: f64,
    pub w_accuracy: f64,
    pub w_latency: f64,
    pub latency_ref_ms: f64,
    /// Optional penalty on declared invocation cost. Zero disables it.
    #[serde(default)]
    pub w_cost: f64,
}

impl Default for RoutingWeights {
    fn default() -> Self {
        RoutingWeights {
            w_load: 1.0,
            w_accuracy: 1.0,
            w_latency: 1.0,
            latency_ref_ms: 100.0,
            w_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouterError {
    #[error("no agent supports action `{0}`")]
    NoAgentForAction(String),
    #[error("routing weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("latency_ref_ms must be positive")]
    BadLatencyRef,
}

impl RoutingWeights {
    pub fn new(w_load: f64, w_accuracy: f64, w_latency: f64, latency_ref_ms: f64) -> Result<Self, RouterError> {
        let w = RoutingWeights {
            w_load,
            w_accuracy,
            w_latency,
            latency_ref_ms,
            w_cost: 0.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        let ws = [self.w_load, self.w_accuracy, self.w_latency, self.w_cost];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.l1() <= 0.0 {
            return Err(RouterError::BadWeights);
        }
        if !(self.latency_ref_ms > 0.0 && self.latency_ref_ms.is_finite()) {
            return Err(RouterError::BadLatencyRef);
        }
        Ok(())
    }

    fn l1(&self) -> f64 {
        self.w_load + self.w_accuracy + self.w_latency
    }

    /// Multiplies the three metric weights (and the cost weight) by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        RoutingWeights {
            w_load: self.w_load * k,
            w_accuracy: self.w_accuracy * k,
            w_latency: self.w_latency * k,
            w_cost: self.w_cost * k,
            latency_ref_ms: self.latency_ref_ms,
        }
    }
}

pub fn score(metrics: &AgentMetrics, weights: &RoutingWeights) -> f64 {
    let latency = weights.latency_ref_ms / (weights.latency_ref_ms + metrics.avg_latency_ms);
    weights.w_load * (1.0 - metrics.load)
        + weights.w_accuracy * metrics.historical_accuracy
        + weights.w_latency * latency
}

fn card_score(card: &AgentCard, metrics: &AgentMetrics, weights: &RoutingWeights) -> f64 {
    score(metrics, weights) - weights.w_cost * card.cost
}

fn strictly_better(candidate: f64, best: f64) -> bool {
    candidate - best > TIE_TOLERANCE * candidate.abs().max(best.abs()).max(1.0)
}

/// Picks the candidate with the highest score. Candidates are visited in
/// ascending id order, so ties go to the smallest id.
pub fn select<'a, I>(candidates: I, weights: &RoutingWeights) -> Option<&'a AgentCard>
where
    I: IntoIterator<Item = &'a (AgentCard, AgentMetrics)>,
{
    let mut best: Option<(&AgentCard, f64)> = None;
    for (card, metrics) in candidates {
        let s = card_score(card, metrics, weights);
        match best {
            Some((_, b)) if !strictly_better(s, b) => {}
            _ => best = Some((card, s)),
        }
    }
    best.map(|(c, _)| c)
}

pub fn route(action_type: &str, registry: &Registry, weights: &RoutingWeights) -> Result<String, RouterError> {
    let candidates = registry.discover(action_type);
    select(&candidates, weights)
        .map(|c| c.card_id.clone())
        .ok_or_else(|| RouterError::NoAgentForAction(action_type.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingFeedback {
    pub episode_latency_ms: f64,
    pub sla_met: bool,
}

/// Boosts the latency weight after an SLA violation, keeping the L1 sum of
/// the three metric weights fixed.
pub fn adapt_weights(weights: &RoutingWeights, feedback: RoutingFeedback, step_size: f64) -> RoutingWeights {
    if feedback.sla_met || !(step_size > 0.0 && step_size < 1.0) {
        return *weights;
    }
    let before = weights.l1();
    let mut next = *weights;
    next.w_latency *= 1.0 + step_size;
    let k = before / next.l1();
    next.w_load *= k;
    next.w_accuracy *= k;
    next.w_latency *= k;
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(load: f64, acc: f64, lat: f64) -> AgentMetrics {
        AgentMetrics {
            load,
            historical_accuracy: acc,
            avg_latency_ms: lat,
            ..AgentMetrics::default()
        }
    }

    #[test]
    fn score_formula() {
        let w = |a, b, c| RoutingWeights::new(a, b, c, 100.0).unwrap();
        assert!((score(&m(0.2, 0.0, 0.0), &w(1.0, 0.0, 0.0)) - 0.8).abs() < 1e-15);
        assert_eq!(score(&m(0.0, 0.9, 0.0), &w(0.0, 1.0, 0.0)), 0.9);
        assert_eq!(score(&m(0.0, 0.0, 100.0), &w(0.0, 0.0, 1.0)), 0.5);
    }

    #[test]
    fn route_cases() {
        let reg = Registry::new();
        let w = RoutingWeights::default();
        assert_eq!(
            route("slicing", &reg, &w),
            Err(RouterError::NoAgentForAction("slicing".into()))
        );
        reg.register_card(AgentCard::new("b", ["na"]), m(0.1, 0.9, 20.0)).unwrap();
        assert_eq!(route("na", &reg, &w).unwrap(), "b");
        reg.register_card(AgentCard::new("a", ["na"]), m(0.1, 0.9, 20.0)).unwrap();
        assert_eq!(route("na", &reg, &w).unwrap(), "a");
        reg.register_card(AgentCard::new("c", ["na"]), m(0.0, 0.95, 10.0)).unwrap();
        assert_eq!(route("na", &reg, &w).unwrap(), "c");
    }

    #[test]
    fn cost_term_is_opt_in() {
        let reg = Registry::new();
        let mut pricey = AgentCard::new("a", ["na"]);
        pricey.cost = 5.0;
        reg.register_card(pricey, m(0.0, 1.0, 0.0)).unwrap();
        reg.register_card(AgentCard::new("b", ["na"]), m(0.0, 0.9, 0.0)).unwrap();
        let mut w = RoutingWeights::default();
        assert_eq!(route("na", &reg, &w).unwrap(), "a");
        w.w_cost = 0.1;
        assert_eq!(route("na", &reg, &w).unwrap(), "b");
    }

    #[test]
    fn adapt_weights_cases() {
        let w = RoutingWeights::new(1.0, 1.0, 1.0, 100.0).unwrap();
        let met = RoutingFeedback { episode_latency_ms: 10.0, sla_met: true };
        assert_eq!(adapt_weights(&w, met, 0.5), w);

        let miss = RoutingFeedback { episode_latency_ms: 500.0, sla_met: false };
        let a = adapt_weights(&w, miss, 0.5);
        assert!((a.w_load - 6.0 / 7.0).abs() < 1e-12);
        assert!((a.w_accuracy - 6.0 / 7.0).abs() < 1e-12);
        assert!((a.w_latency - 9.0 / 7.0).abs() < 1e-12);
        assert!((a.w_load + a.w_accuracy + a.w_latency - 3.0).abs() < 1e-12);

        let b = adapt_weights(&a, miss, 0.5);
        assert!(b.w_latency / 3.0 > a.w_latency / 3.0);
        assert!(b.validate().is_ok());
    }

    #[test]
    fn weight_validation() {
        assert_eq!(RoutingWeights::new(0.0, 0.0, 0.0, 100.0), Err(RouterError::BadWeights));
        assert_eq!(RoutingWeights::new(-1.0, 1.0, 0.0, 100.0), Err(RouterError::BadWeights));
        assert_eq!(RoutingWeights::new(1.0, 0.0, 0.0, 0.0), Err(RouterError::BadLatencyRef));
    }
}
