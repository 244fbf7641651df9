//! Scenario files: topic, cycle count, perturbation schedule and reflection plan.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::EngineError;
use crate::profiles::{AgentId, Roster};

pub const DEFAULT_CYCLES: u32 = 3;
pub const DEFAULT_CONTEXT_WINDOW: usize = 12;

pub const DEFAULT_REFLECTION_QUESTIONS: [&str; 3] = [
    "What did you do during committee?",
    "What senator did you agree most with, and which did you disagree most with?",
    "What progress was made today, and what held you back the most?",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledPerturbation {
    pub after_cycle: u32,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ReflectAgents {
    #[default]
    All,
    Listed(Vec<AgentId>),
}

impl Serialize for ReflectAgents {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ReflectAgents::All => s.serialize_str("all"),
            ReflectAgents::Listed(ids) => ids.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ReflectAgents {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Keyword(String),
            List(Vec<AgentId>),
        }
        match Raw::deserialize(d)? {
            Raw::Keyword(k) if k == "all" => Ok(ReflectAgents::All),
            Raw::Keyword(k) => Err(serde::de::Error::custom(format!(
                "reflect_agents must be \"all\" or a list of agent ids, got {k:?}"
            ))),
            Raw::List(ids) => Ok(ReflectAgents::Listed(ids)),
        }
    }
}

/// Per-phase decoding defaults. The run seed is supplied separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingDefaults {
    pub debate_temperature: f64,
    pub interpretation_temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingDefaults {
    fn default() -> Self {
        DecodingDefaults {
            debate_temperature: 0.7,
            interpretation_temperature: 0.0,
            max_tokens: 512,
        }
    }
}

fn default_cycles() -> u32 {
    DEFAULT_CYCLES
}

fn default_questions() -> Vec<String> {
    DEFAULT_REFLECTION_QUESTIONS
        .iter()
        .map(|q| q.to_string())
        .collect()
}

fn default_window() -> usize {
    DEFAULT_CONTEXT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub topic_prompt: String,
    #[serde(default = "default_cycles")]
    pub cycles: u32,
    #[serde(default)]
    pub perturbations: Vec<ScheduledPerturbation>,
    #[serde(default = "default_questions")]
    pub reflection_questions: Vec<String>,
    #[serde(default)]
    pub reflect_agents: ReflectAgents,
    #[serde(default = "default_window")]
    pub context_window_k: usize,
    #[serde(default)]
    pub decoding: DecodingDefaults,
}

impl Scenario {
    pub fn new(scenario_id: impl Into<String>, topic_prompt: impl Into<String>) -> Self {
        Scenario {
            scenario_id: scenario_id.into(),
            topic_prompt: topic_prompt.into(),
            cycles: DEFAULT_CYCLES,
            perturbations: Vec::new(),
            reflection_questions: default_questions(),
            reflect_agents: ReflectAgents::All,
            context_window_k: DEFAULT_CONTEXT_WINDOW,
            decoding: DecodingDefaults::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let sc: Scenario =
            serde_json::from_str(text).map_err(|e| EngineError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks the roster-independent invariants.
    pub fn validate(&self) -> Result<(), EngineError> {
        let mut problems = Vec::new();
        if self.scenario_id.trim().is_empty() {
            problems.push("scenario_id: empty".to_string());
        }
        if self.topic_prompt.trim().is_empty() {
            problems.push("topic_prompt: empty".to_string());
        }
        if self.cycles < 1 {
            problems.push("cycles: must be at least 1".to_string());
        }
        let mut prev = 0;
        for p in &self.perturbations {
            if p.after_cycle > self.cycles {
                problems.push(format!(
                    "perturbations: after_cycle {} exceeds cycles {}",
                    p.after_cycle, self.cycles
                ));
            }
            if p.after_cycle < prev {
                problems.push("perturbations: not sorted by after_cycle".to_string());
            }
            prev = p.after_cycle;
            if p.content.trim().is_empty() {
                problems.push("perturbations: empty content".to_string());
            }
        }
        if self.reflection_questions.is_empty() {
            problems.push("reflection_questions: empty".to_string());
        }
        if self.reflection_questions.iter().any(|q| q.trim().is_empty()) {
            problems.push("reflection_questions: blank question".to_string());
        }
        if self.decoding.debate_temperature < 0.0 || self.decoding.interpretation_temperature < 0.0
        {
            problems.push("decoding: negative temperature".to_string());
        }
        if self.decoding.max_tokens == 0 {
            problems.push("decoding: max_tokens must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Validation(problems.join("; ")))
        }
    }

    /// Checks the scenario invariants plus every roster cross-reference.
    pub fn validate_against(&self, roster: &Roster) -> Result<(), EngineError> {
        self.validate()?;
        if roster.len() < 2 {
            return Err(EngineError::Validation(format!(
                "roster: needs at least 2 members, found {}",
                roster.len()
            )));
        }
        if let ReflectAgents::Listed(ids) = &self.reflect_agents {
            let mut seen = HashSet::new();
            for id in ids {
                if roster.get(id).is_none() {
                    return Err(EngineError::UnknownAgent(id.clone()));
                }
                if !seen.insert(id) {
                    return Err(EngineError::Validation(format!(
                        "reflect_agents: duplicate id {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Agents answering the scheduled reflection questions, in roster order.
    pub fn reflecting_agents(&self, roster: &Roster) -> Vec<AgentId> {
        match &self.reflect_agents {
            ReflectAgents::All => roster.members().iter().map(|m| m.agent_id.clone()).collect(),
            ReflectAgents::Listed(ids) => roster
                .members()
                .iter()
                .filter(|m| ids.contains(&m.agent_id))
                .map(|m| m.agent_id.clone())
                .collect(),
        }
    }

    /// Scheduled perturbation contents for the boundary after `cycle`.
    pub fn perturbations_after(&self, cycle: u32) -> impl Iterator<Item = &ScheduledPerturbation> {
        self.perturbations
            .iter()
            .filter(move |p| p.after_cycle == cycle)
    }
}
