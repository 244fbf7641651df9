//! Append-only per-agent memory streams.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::AgentId;

pub type Timestep = u64;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("timestep order error: entry at t{got} does not follow last entry at t{last}")]
    TimestepOrder { last: Timestep, got: Timestep },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    ScenarioPrompt,
    Observation,
    Interpretation,
    Perturbation,
    Reflection,
}

impl MemoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKind::ScenarioPrompt => "scenario_prompt",
            MemoryKind::Observation => "observation",
            MemoryKind::Interpretation => "interpretation",
            MemoryKind::Perturbation => "perturbation",
            MemoryKind::Reflection => "reflection",
        }
    }

    /// Kinds that mirror a shared transcript event into every stream.
    pub fn is_mirrored(self) -> bool {
        matches!(
            self,
            MemoryKind::ScenarioPrompt | MemoryKind::Observation | MemoryKind::Perturbation
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub timestep: Timestep,
    pub kind: MemoryKind,
    pub speaker: Option<AgentId>,
    pub content: String,
    pub scenario_id: String,
}

impl MemoryEntry {
    pub fn new(
        timestep: Timestep,
        kind: MemoryKind,
        speaker: Option<AgentId>,
        content: impl Into<String>,
        scenario_id: impl Into<String>,
    ) -> Self {
        MemoryEntry {
            timestep,
            kind,
            speaker,
            content: content.into(),
            scenario_id: scenario_id.into(),
        }
    }

    /// Label used when rendering the entry into a prompt.
    pub fn label(&self) -> &str {
        match &self.speaker {
            Some(s) => s.as_str(),
            None => self.kind.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryStream {
    owner: AgentId,
    entries: Vec<MemoryEntry>,
}

#[derive(Deserialize)]
struct StreamDocument {
    owner: AgentId,
    entries: Vec<MemoryEntry>,
}

impl MemoryStream {
    pub fn new(owner: AgentId) -> Self {
        MemoryStream {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn owner(&self) -> &AgentId {
        &self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_timestep(&self) -> Option<Timestep> {
        self.entries.last().map(|e| e.timestep)
    }

    fn check(&self, e: &MemoryEntry) -> Result<(), MemoryError> {
        if e.content.trim().is_empty() {
            return Err(MemoryError::Validation(format!(
                "entry at t{} has empty content",
                e.timestep
            )));
        }
        if e.kind == MemoryKind::Interpretation && e.speaker.as_ref() != Some(&self.owner) {
            return Err(MemoryError::Validation(format!(
                "interpretation at t{} must be spoken by stream owner {}",
                e.timestep, self.owner
            )));
        }
        if let Some(last) = self.last_timestep() {
            if e.timestep <= last {
                return Err(MemoryError::TimestepOrder {
                    last,
                    got: e.timestep,
                });
            }
        }
        Ok(())
    }

    pub fn append(&mut self, e: MemoryEntry) -> Result<(), MemoryError> {
        self.check(&e)?;
        self.entries.push(e);
        Ok(())
    }

    /// Value-style append: consumes the stream and returns the extended one.
    pub fn appended(mut self, e: MemoryEntry) -> Result<Self, MemoryError> {
        self.append(e)?;
        Ok(self)
    }

    /// The most recent `k` entries strictly before `now`, oldest first.
    pub fn context_window(&self, k: usize, now: Timestep) -> &[MemoryEntry] {
        let end = self.entries.partition_point(|e| e.timestep < now);
        &self.entries[end.saturating_sub(k)..end]
    }

    pub fn full_history(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory stream serializes")
    }

    /// Parses a dump, replaying every entry through the append contract.
    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let doc: StreamDocument =
            serde_json::from_str(text).map_err(|e| MemoryError::Parse(e.to_string()))?;
        let mut stream = MemoryStream::new(doc.owner);
        for e in doc.entries {
            stream.append(e).map_err(|err| match err {
                MemoryError::TimestepOrder { last, got } => MemoryError::Validation(format!(
                    "timesteps out of order: t{got} after t{last}"
                )),
                other => other,
            })?;
        }
        Ok(stream)
    }
}

pub fn save_stream(s: &MemoryStream, path: impl AsRef<Path>) -> Result<(), MemoryError> {
    let path = path.as_ref();
    fs::write(path, s.to_json() + "\n").map_err(|source| MemoryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<MemoryStream, MemoryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    MemoryStream::from_json(&text)
}
