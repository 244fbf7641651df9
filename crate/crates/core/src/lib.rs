//! Deterministic simulator of committee deliberation among persona-conditioned
//! language-model agents.
//!
//! A run takes a [`Roster`] of agent profiles and a [`Scenario`], then walks
//! opening statements, round-robin conversation cycles, scheduled or
//! operator-injected perturbations, and reflection questions. Every prompt is
//! built from the speaking agent's own memory stream, and every completion
//! goes through a pluggable [`ModelBackend`] (live HTTP, scripted, or a
//! record/replay cache). The [`eval`] module computes inter-rater agreement
//! over believability scores collected for repeated runs.

pub mod backend;
pub mod engine;
pub mod eval;
pub mod memory;
pub mod profiles;
pub mod prompting;
pub mod scenario;

pub use backend::{
    cache_key, BackendError, BackendErrorKind, CacheKey, CacheStore, CompletionRequest,
    CompletionResult, ModelBackend, OpenAiBackend, OpenAiConfig, ReplayBackend, Script,
    ScriptedBackend,
};
pub use engine::{
    check_memory_consistency, check_transcript, run_scenario, Controller, EngineError,
    EventKind, GrammarSpec, RunConfig, RunMode, Simulation, Transcript, TranscriptEvent,
};
pub use eval::{EvalError, Scalar, Tail};
pub use memory::{MemoryEntry, MemoryError, MemoryKind, MemoryStream};
pub use profiles::{AgentId, AgentProfile, Party, ProfileError, Roster};
pub use prompting::{Phase, PromptBundle, PromptTemplates, TurnAction};
pub use scenario::Scenario;

/// Default scalar for score statistics.
pub type Real = f64;

pub type ScoreRecord = eval::ScoreRecord<Real>;
pub type ScoreDataset = eval::ScoreDataset<Real>;
pub type CorrelationResult = eval::CorrelationResult<Real>;
pub type TableReport = eval::TableReport<Real>;

pub type ScoreDatasetF32 = eval::ScoreDataset<f32>;
pub type CorrelationResultF32 = eval::CorrelationResult<f32>;
