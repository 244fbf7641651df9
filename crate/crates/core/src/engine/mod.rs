//! The deliberation state machine and its observable record.
//!
//! A run walks a fixed event grammar:
//!
//! ```text
//! scenario_prompt · opening^A · B_0 · (turn^A · B_c)^C · reflection_answer^(Q×R)
//! ```
//!
//! where every boundary slot `B_c` holds the perturbations scheduled after
//! cycle `c` (plus, in stepped mode, whatever the operator injects there).

mod controller;
mod grammar;
mod hub;
mod sim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::memory::{MemoryError, Timestep};
use crate::profiles::{AgentId, AgentProfile, ProfileError};
use crate::prompting::{Phase, TurnAction};

pub use controller::{Controller, RunState};
pub use grammar::{check_memory_consistency, check_transcript, GrammarSpec, GrammarViolation};
pub use hub::{EventHub, Subscription};
pub use sim::{run_id_for, run_scenario, RunFailure, Simulation};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("unknown agent: {0}")]
    UnknownAgent(AgentId),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("run finished")]
    Finished,
    #[error("backend error for agent {agent} phase {phase}: {source}")]
    Backend {
        agent: AgentId,
        phase: Phase,
        #[source]
        source: BackendError,
    },
    #[error("empty response from agent {agent} in phase {phase}")]
    EmptyResponse { agent: AgentId, phase: Phase },
    #[error("run aborted earlier: {0}")]
    Aborted(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ScenarioPrompt,
    OpeningStatement,
    Turn,
    Perturbation,
    ReflectionAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub index: u64,
    /// Memory timestep of the event. Interpretations also consume timesteps,
    /// so this is not always equal to `index`.
    pub timestep: Timestep,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<TurnAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Batch,
    Stepped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: i64,
    pub model: String,
}

impl RunConfig {
    pub fn batch(seed: i64) -> Self {
        RunConfig {
            mode: RunMode::Batch,
            seed,
            model: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn stepped(seed: i64) -> Self {
        RunConfig {
            mode: RunMode::Stepped,
            ..RunConfig::batch(seed)
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }
}

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationOrigin {
    Scheduled,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationProvenance {
    pub index: u64,
    pub origin: PerturbationOrigin,
}

/// First line of `transcript.jsonl`. Holds only run-determined fields so that
/// replays of the same run are byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub record: String,
    pub run_id: String,
    pub scenario_id: String,
    pub model: String,
    pub seed: i64,
    pub complete: bool,
    pub roster: Vec<AgentProfile>,
}

/// Wall-clock and provenance details, written to `run.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub scenario_id: String,
    pub model: String,
    pub seed: i64,
    pub mode: RunMode,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub complete: bool,
    pub error: Option<String>,
    pub event_count: usize,
    pub backend_sources: BTreeMap<String, u64>,
    pub perturbations: Vec<PerturbationProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub events: Vec<TranscriptEvent>,
    pub metadata: RunMetadata,
}

impl Transcript {
    pub fn run_id(&self) -> &str {
        &self.header.run_id
    }

    pub fn is_complete(&self) -> bool {
        self.header.complete
    }

    pub fn to_jsonl(&self) -> String {
        write_jsonl(&self.header, &self.events)
    }

    /// Human-readable rendering.
    pub fn to_text(&self) -> String {
        let names: BTreeMap<&AgentId, &AgentProfile> =
            self.header.roster.iter().map(|p| (&p.agent_id, p)).collect();
        let who = |id: &Option<AgentId>| match id.as_ref().and_then(|i| names.get(i)) {
            Some(p) => format!("{} ({}-{})", p.name, p.party, p.state),
            None => id.as_ref().map(|i| i.to_string()).unwrap_or_default(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Run {} | scenario {} | model {} | seed {}{}",
            self.header.run_id,
            self.header.scenario_id,
            self.header.model,
            self.header.seed,
            if self.header.complete { "" } else { " | INCOMPLETE" }
        );
        let mut last_cycle = None;
        for e in &self.events {
            match e.kind {
                EventKind::ScenarioPrompt => {
                    let _ = writeln!(out, "\n== Matter before the committee ==\n{}", e.content);
                }
                EventKind::OpeningStatement => {
                    if last_cycle.is_none() {
                        let _ = writeln!(out, "\n== Opening statements ==");
                        last_cycle = Some(0);
                    }
                    let _ = writeln!(out, "[{}] {}: {}", e.index, who(&e.agent), e.content);
                }
                EventKind::Turn => {
                    if last_cycle != e.cycle {
                        let _ = writeln!(out, "\n== Cycle {} ==", e.cycle.unwrap_or_default());
                        last_cycle = e.cycle;
                    }
                    let text = match &e.action {
                        Some(a) if a.is_pass() => "(passes)".to_string(),
                        _ => e.content.clone(),
                    };
                    let _ = writeln!(out, "[{}] {}: {}", e.index, who(&e.agent), text);
                }
                EventKind::Perturbation => {
                    let _ = writeln!(out, "\n** Perturbation [{}]: {} **", e.index, e.content);
                }
                EventKind::ReflectionAnswer => {
                    let _ = writeln!(
                        out,
                        "\n[{}] {} was asked: {}\n{}",
                        e.index,
                        who(&e.agent),
                        e.question.as_deref().unwrap_or_default(),
                        e.content
                    );
                }
            }
        }
        out
    }
}

pub fn write_jsonl(header: &TranscriptHeader, events: &[TranscriptEvent]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<(TranscriptHeader, Vec<TranscriptEvent>), EngineError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| EngineError::Parse("empty transcript".into()))?;
    let header: TranscriptHeader = serde_json::from_str(header_line)
        .map_err(|e| EngineError::Parse(format!("header: {e}")))?;
    if header.record != "header" {
        return Err(EngineError::Parse("first line is not a header record".into()));
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let e: TranscriptEvent = serde_json::from_str(line)
            .map_err(|err| EngineError::Parse(format!("event line {}: {err}", n + 2)))?;
        events.push(e);
    }
    Ok((header, events))
}

pub fn load_transcript(
    path: impl AsRef<Path>,
) -> Result<(TranscriptHeader, Vec<TranscriptEvent>), EngineError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
    read_jsonl(&text)
}
