//! Protocol-agnostic agent registry.
//!
//! Agents from any interoperability protocol are mapped onto a single
//! [`AgentCard`] shape by a per-protocol [`Adapter`], then discovered by the
//! action types they declare rather than by identity.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

pub const DEFAULT_SMOOTHING: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCard {
    pub card_id: String,
    pub protocol_tag: String,
    pub supported_actions: BTreeSet<String>,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub cost: f64,
}

impl AgentCard {
    pub fn new<I, S>(card_id: impl Into<String>, actions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AgentCard {
            card_id: card_id.into(),
            protocol_tag: "native".into(),
            supported_actions: actions.into_iter().map(Into::into).collect(),
            endpoint: String::new(),
            cost: 0.0,
        }
    }

    pub fn supports(&self, action_type: &str) -> bool {
        self.supported_actions.contains(action_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub load: f64,
    pub historical_accuracy: f64,
    pub avg_latency_ms: f64,
    pub throughput_rps: f64,
    #[serde(default)]
    pub sample_count: u64,
}

impl Default for AgentMetrics {
    fn default() -> Self {
        AgentMetrics {
            load: 0.0,
            historical_accuracy: 1.0,
            avg_latency_ms: 0.0,
            throughput_rps: 0.0,
            sample_count: 0,
        }
    }
}

impl AgentMetrics {
    pub fn is_valid(&self) -> bool {
        let unit = 0.0..=1.0;
        unit.contains(&self.load)
            && unit.contains(&self.historical_accuracy)
            && self.avg_latency_ms >= 0.0
            && self.avg_latency_ms.is_finite()
            && self.throughput_rps >= 0.0
            && self.throughput_rps.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub latency_ms: f64,
    pub success: bool,
    pub load_now: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("agent card `{0}` is already registered")]
    DuplicateId(String),
    #[error("agent card `{0}` declares no supported actions")]
    EmptyActions(String),
    #[error("unknown agent card `{0}`")]
    UnknownCard(String),
    #[error("invalid agent card `{0}`: {1}")]
    InvalidCard(String, &'static str),
    #[error("no adapter registered for protocol `{0}`")]
    UnknownProtocol(String),
    #[error("descriptor is missing attribute `{0}`")]
    MissingAttribute(String),
    #[error("descriptor attribute `{0}` is malformed")]
    BadAttribute(String),
    #[error("smoothing factor must lie in (0, 1]")]
    BadSmoothing,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    card: AgentCard,
    metrics: AgentMetrics,
}

/// Agent registry. Reads run concurrently; mutations are serialized behind a
/// write lock so readers see whole updates only.
#[derive(Debug)]
pub struct Registry {
    entries: RwLock<BTreeMap<String, Entry>>,
    smoothing: f64,
}

impl Default for Registry {
    fn default() -> Self {
        Registry {
            entries: RwLock::new(BTreeMap::new()),
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl Clone for Registry {
    fn clone(&self) -> Self {
        Registry {
            entries: RwLock::new(self.read().clone()),
            smoothing: self.smoothing,
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_smoothing(alpha: f64) -> Result<Self, RegistryError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(RegistryError::BadSmoothing);
        }
        Ok(Registry {
            smoothing: alpha,
            ..Self::default()
        })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<String, Entry>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, BTreeMap<String, Entry>> {
        self.entries.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_card(
        &self,
        card: AgentCard,
        initial_metrics: AgentMetrics,
    ) -> Result<String, RegistryError> {
        if card.card_id.is_empty() {
            return Err(RegistryError::InvalidCard(card.card_id, "empty card_id"));
        }
        if card.supported_actions.is_empty() {
            return Err(RegistryError::EmptyActions(card.card_id));
        }
        if !(card.cost >= 0.0 && card.cost.is_finite()) {
            return Err(RegistryError::InvalidCard(card.card_id, "cost must be nonnegative"));
        }
        if !initial_metrics.is_valid() {
            return Err(RegistryError::InvalidCard(card.card_id, "metrics out of range"));
        }
        let mut entries = self.write();
        if entries.contains_key(&card.card_id) {
            return Err(RegistryError::DuplicateId(card.card_id));
        }
        let id = card.card_id.clone();
        entries.insert(
            id.clone(),
            Entry {
                card,
                metrics: initial_metrics,
            },
        );
        Ok(id)
    }

    /// Cards supporting `action_type`, ascending by card id.
    pub fn discover(&self, action_type: &str) -> Vec<(AgentCard, AgentMetrics)> {
        self.read()
            .values()
            .filter(|e| e.card.supports(action_type))
            .map(|e| (e.card.clone(), e.metrics))
            .collect()
    }

    pub fn get(&self, card_id: &str) -> Option<(AgentCard, AgentMetrics)> {
        self.read()
            .get(card_id)
            .map(|e| (e.card.clone(), e.metrics))
    }

    pub fn card_ids(&self) -> Vec<String> {
        self.read().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read().is_empty()
    }

    /// EWMA update of latency and accuracy. The first observation replaces
    /// the configured prior outright.
    pub fn update_metrics(
        &self,
        card_id: &str,
        obs: Observation,
    ) -> Result<AgentMetrics, RegistryError> {
        let alpha = self.smoothing;
        let mut entries = self.write();
        let entry = entries
            .get_mut(card_id)
            .ok_or_else(|| RegistryError::UnknownCard(card_id.to_string()))?;
        let m = &mut entry.metrics;
        let hit = if obs.success { 1.0 } else { 0.0 };
        if m.sample_count == 0 {
            m.avg_latency_ms = obs.latency_ms.max(0.0);
            m.historical_accuracy = hit;
        } else {
            m.avg_latency_ms += alpha * (obs.latency_ms.max(0.0) - m.avg_latency_ms);
            m.historical_accuracy += alpha * (hit - m.historical_accuracy);
        }
        m.historical_accuracy = m.historical_accuracy.clamp(0.0, 1.0);
        m.load = obs.load_now.clamp(0.0, 1.0);
        m.sample_count += 1;
        Ok(*m)
    }

    pub fn deregister(&self, card_id: &str) -> Result<AgentCard, RegistryError> {
        self.write()
            .remove(card_id)
            .map(|e| e.card)
            .ok_or_else(|| RegistryError::UnknownCard(card_id.to_string()))
    }
}

/// Protocol-specific descriptor before adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDescriptor {
    pub protocol_tag: String,
    pub attributes: BTreeMap<String, String>,
}

impl RawDescriptor {
    pub fn new<I, K, V>(protocol_tag: impl Into<String>, attrs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        RawDescriptor {
            protocol_tag: protocol_tag.into(),
            attributes: attrs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }
}

/// Key-renaming table from a protocol's field names to card fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adapter {
    pub id_key: &'static str,
    pub actions_key: &'static str,
    pub endpoint_key: &'static str,
    pub cost_key: &'static str,
}

impl Adapter {
    pub const NATIVE: Adapter = Adapter {
        id_key: "id",
        actions_key: "actions",
        endpoint_key: "endpoint",
        cost_key: "cost",
    };
    pub const A2A: Adapter = Adapter {
        id_key: "name",
        actions_key: "skills",
        endpoint_key: "url",
        cost_key: "cost",
    };
    pub const ACP: Adapter = Adapter {
        id_key: "agent_name",
        actions_key: "operations",
        endpoint_key: "endpoint_uri",
        cost_key: "cost",
    };
    pub const ANP: Adapter = Adapter {
        id_key: "did",
        actions_key: "capabilities",
        endpoint_key: "service_endpoint",
        cost_key: "cost",
    };

    fn adapt(&self, raw: &RawDescriptor) -> Result<AgentCard, RegistryError> {
        let get = |key: &str| raw.attributes.get(key).map(|v| v.trim());
        let require = |key: &str| get(key).ok_or_else(|| RegistryError::MissingAttribute(key.into()));

        let card_id = require(self.id_key)?.to_string();
        let supported_actions: BTreeSet<String> = require(self.actions_key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let endpoint = get(self.endpoint_key).unwrap_or_default().to_string();
        let cost = match get(self.cost_key) {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| RegistryError::BadAttribute(self.cost_key.into()))?,
            None => 0.0,
        };
        Ok(AgentCard {
            card_id,
            protocol_tag: raw.protocol_tag.clone(),
            supported_actions,
            endpoint,
            cost,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AdapterSet {
    adapters: BTreeMap<String, Adapter>,
}

impl Default for AdapterSet {
    fn default() -> Self {
        let mut adapters = BTreeMap::new();
        adapters.insert("native".to_string(), Adapter::NATIVE);
        adapters.insert("a2a".to_string(), Adapter::A2A);
        adapters.insert("acp".to_string(), Adapter::ACP);
        adapters.insert("anp".to_string(), Adapter::ANP);
        AdapterSet { adapters }
    }
}

impl AdapterSet {
    pub fn register(&mut self, protocol_tag: impl Into<String>, adapter: Adapter) {
        self.adapters.insert(protocol_tag.into(), adapter);
    }

    pub fn adapt_descriptor(&self, raw: &RawDescriptor) -> Result<AgentCard, RegistryError> {
        self.adapters
            .get(&raw.protocol_tag)
            .ok_or_else(|| RegistryError::UnknownProtocol(raw.protocol_tag.clone()))?
            .adapt(raw)
    }
}

/// One entry of the agent-card JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardFileEntry {
    #[serde(flatten)]
    pub card: AgentCard,
    #[serde(default)]
    pub metrics: AgentMetrics,
}

pub fn load_card_file(json: &str, registry: &Registry) -> Result<Vec<String>, CardFileError> {
    let entries: Vec<CardFileEntry> = serde_json::from_str(json)?;
    let mut ids = Vec::with_capacity(entries.len());
    for e in entries {
        ids.push(registry.register_card(e.card, e.metrics)?);
    }
    Ok(ids)
}

#[derive(Debug, thiserror::Error)]
pub enum CardFileError {
    #[error("agent card file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics() -> AgentMetrics {
        AgentMetrics::default()
    }

    #[test]
    fn register_and_discover() {
        let reg = Registry::new();
        let id = reg
            .register_card(AgentCard::new("na-1", ["network_analysis"]), metrics())
            .unwrap();
        assert_eq!(id, "na-1");
        assert_eq!(reg.discover("network_analysis").len(), 1);
        assert!(matches!(
            reg.register_card(AgentCard::new("na-1", ["network_analysis"]), metrics()),
            Err(RegistryError::DuplicateId(_))
        ));
        assert!(matches!(
            reg.register_card(AgentCard::new("e", Vec::<String>::new()), metrics()),
            Err(RegistryError::EmptyActions(_))
        ));
    }

    #[test]
    fn discover_sorted_and_filtered() {
        let reg = Registry::new();
        assert!(reg.discover("x").is_empty());
        reg.register_card(AgentCard::new("b", ["network_analysis"]), metrics()).unwrap();
        reg.register_card(AgentCard::new("a", ["network_analysis"]), metrics()).unwrap();
        reg.register_card(AgentCard::new("c", ["protocol_query"]), metrics()).unwrap();
        let ids: Vec<_> = reg
            .discover("network_analysis")
            .into_iter()
            .map(|(c, _)| c.card_id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn ewma_updates() {
        let reg = Registry::with_smoothing(0.5).unwrap();
        reg.register_card(AgentCard::new("na-1", ["x"]), metrics()).unwrap();
        let first = reg
            .update_metrics("na-1", Observation { latency_ms: 100.0, success: true, load_now: 0.3 })
            .unwrap();
        assert_eq!(first.avg_latency_ms, 100.0);
        assert_eq!(first.historical_accuracy, 1.0);
        assert_eq!(first.sample_count, 1);
        let second = reg
            .update_metrics("na-1", Observation { latency_ms: 200.0, success: false, load_now: 0.7 })
            .unwrap();
        assert_eq!(second.avg_latency_ms, 150.0);
        assert_eq!(second.historical_accuracy, 0.5);
        assert_eq!(second.load, 0.7);
        assert_eq!(second.sample_count, 2);
        assert!(matches!(
            reg.update_metrics("nope", Observation { latency_ms: 1.0, success: true, load_now: 0.0 }),
            Err(RegistryError::UnknownCard(_))
        ));
    }

    #[test]
    fn first_observation_overrides_prior() {
        let reg = Registry::new();
        let prior = AgentMetrics { historical_accuracy: 0.2, avg_latency_ms: 900.0, ..metrics() };
        reg.register_card(AgentCard::new("a", ["x"]), prior).unwrap();
        let m = reg
            .update_metrics("a", Observation { latency_ms: 40.0, success: true, load_now: 0.0 })
            .unwrap();
        assert_eq!((m.avg_latency_ms, m.historical_accuracy), (40.0, 1.0));
    }

    #[test]
    fn deregister_cases() {
        let reg = Registry::new();
        reg.register_card(AgentCard::new("na-1", ["network_analysis"]), metrics()).unwrap();
        reg.register_card(AgentCard::new("na-2", ["network_analysis"]), metrics()).unwrap();
        assert_eq!(reg.deregister("na-1").unwrap().card_id, "na-1");
        assert!(matches!(reg.deregister("na-1"), Err(RegistryError::UnknownCard(_))));
        let left: Vec<_> = reg.discover("network_analysis").into_iter().map(|(c, _)| c.card_id).collect();
        assert_eq!(left, ["na-2"]);
        reg.deregister("na-2").unwrap();
        assert!(reg.discover("network_analysis").is_empty());
    }

    #[test]
    fn adapters() {
        let set = AdapterSet::default();
        let card = set
            .adapt_descriptor(&RawDescriptor::new("native", [("id", "pq-1"), ("actions", "protocol_query")]))
            .unwrap();
        assert_eq!(card.card_id, "pq-1");
        assert_eq!(card.supported_actions, BTreeSet::from(["protocol_query".to_string()]));

        let a2a = set
            .adapt_descriptor(&RawDescriptor::new(
                "a2a",
                [("name", "na-7"), ("skills", "network_analysis, protocol_query"), ("url", "https://x"), ("cost", "2.5")],
            ))
            .unwrap();
        assert_eq!(a2a.protocol_tag, "a2a");
        assert_eq!(a2a.supported_actions.len(), 2);
        assert_eq!(a2a.endpoint, "https://x");
        assert_eq!(a2a.cost, 2.5);

        assert!(matches!(
            set.adapt_descriptor(&RawDescriptor::new("unknown-x", [("id", "z")])),
            Err(RegistryError::UnknownProtocol(_))
        ));
        assert_eq!(
            set.adapt_descriptor(&RawDescriptor::new("a2a", [("name", "z"), ("url", "u")])),
            Err(RegistryError::MissingAttribute("skills".into()))
        );
    }

    #[test]
    fn card_file_roundtrip() {
        let json = r#"[
            {"card_id":"na-1","protocol_tag":"a2a","supported_actions":["network_analysis"],
             "endpoint":"e","cost":1.0,
             "metrics":{"load":0.1,"historical_accuracy":0.9,"avg_latency_ms":50.0,"throughput_rps":3.0}}
        ]"#;
        let reg = Registry::new();
        assert_eq!(load_card_file(json, &reg).unwrap(), ["na-1"]);
        let (card, m) = reg.get("na-1").unwrap();
        assert_eq!(card.cost, 1.0);
        assert_eq!(m.historical_accuracy, 0.9);
        assert_eq!(m.sample_count, 0);
    }
}
