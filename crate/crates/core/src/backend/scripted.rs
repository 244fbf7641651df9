use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendErrorKind, CompletionRequest, CompletionResult, ModelBackend, Source};
use crate::profiles::AgentId;
use crate::prompting::Phase;

/// Canned completions keyed by agent and phase.
///
/// On disk: `{"agents": {"<agent_id>": {"opening": [...], "turn": [...], ...}}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub agents: BTreeMap<AgentId, BTreeMap<Phase, Vec<String>>>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| {
            BackendError::new(BackendErrorKind::MalformedReply, format!("bad script: {e}"))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            BackendError::new(BackendErrorKind::Io, format!("{}: {e}", path.display()))
        })?;
        Script::from_json(&text)
    }

    pub fn push(&mut self, agent: &AgentId, phase: Phase, text: impl Into<String>) {
        self.agents
            .entry(agent.clone())
            .or_default()
            .entry(phase)
            .or_default()
            .push(text.into());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

pub struct ScriptedBackend {
    queues: Mutex<BTreeMap<(AgentId, Phase), VecDeque<String>>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut queues = BTreeMap::new();
        for (agent, phases) in script.agents {
            for (phase, texts) in phases {
                queues.insert((agent.clone(), phase), texts.into_iter().collect());
            }
        }
        ScriptedBackend {
            queues: Mutex::new(queues),
        }
    }

    /// Completions still queued across all agents and phases.
    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("script lock")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let route = req.route.as_ref().ok_or_else(|| {
            BackendError::new(
                BackendErrorKind::MalformedReply,
                "request carries no routing metadata",
            )
        })?;
        let mut queues = self.queues.lock().expect("script lock");
        let text = queues
            .get_mut(&(route.agent_id.clone(), route.phase))
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| {
                BackendError::new(
                    BackendErrorKind::MalformedReply,
                    format!(
                        "script exhausted for agent {} phase {}",
                        route.agent_id, route.phase
                    ),
                )
            })?;
        Ok(CompletionResult {
            text,
            usage: None,
            source: Source::Scripted,
        })
    }
}
