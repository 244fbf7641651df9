//! Prompt assembly and reply parsing.
//!
//! Every builder is a pure function of its arguments: templates are plain
//! text with `{{placeholder}}` slots and rendering never consults a clock,
//! an RNG or the filesystem.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryEntry;
use crate::profiles::{AgentId, AgentProfile, ProfileSeed, Roster};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty response")]
    EmptyResponse,
    #[error("template error in {template}: {message}")]
    Template { template: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ProfileGen,
    Opening,
    Turn,
    Interpretation,
    Reflection,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ProfileGen => "profile_gen",
            Phase::Opening => "opening",
            Phase::Turn => "turn",
            Phase::Interpretation => "interpretation",
            Phase::Reflection => "reflection",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub seed: i64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub phase: Phase,
    pub params: DecodingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Speak,
    Pass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnAction {
    pub action: TurnKind,
    pub content: String,
    pub addressed_to: Option<AgentId>,
}

impl TurnAction {
    pub fn pass() -> Self {
        TurnAction {
            action: TurnKind::Pass,
            content: String::new(),
            addressed_to: None,
        }
    }

    pub fn speak(content: impl Into<String>, addressed_to: Option<AgentId>) -> Self {
        TurnAction {
            action: TurnKind::Speak,
            content: content.into(),
            addressed_to,
        }
    }

    pub fn is_pass(&self) -> bool {
        self.action == TurnKind::Pass
    }
}

pub const PASS_SENTINEL: &str = "PASS";

/// Parses a debate-turn completion. `@<Name>:` addressing is honoured only
/// when the name belongs to a roster member.
pub fn parse_turn_response(raw: &str, roster: &Roster) -> Result<TurnAction, PromptError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(PromptError::EmptyResponse);
    }
    if trimmed.eq_ignore_ascii_case(PASS_SENTINEL) {
        return Ok(TurnAction::pass());
    }
    if let Some(rest) = trimmed.strip_prefix('@') {
        if let Some((name, body)) = rest.split_once(':') {
            let body = body.trim();
            if let (Some(member), false) = (roster.find_by_name(name), body.is_empty()) {
                return Ok(TurnAction::speak(body, Some(member.agent_id.clone())));
            }
        }
    }
    Ok(TurnAction::speak(trimmed, None))
}

/// Renders an action in the reply format the turn prompt asks for.
pub fn render_turn_action(action: &TurnAction, roster: &Roster) -> String {
    match action.action {
        TurnKind::Pass => PASS_SENTINEL.to_string(),
        TurnKind::Speak => match action.addressed_to.as_ref().and_then(|id| roster.get(id)) {
            Some(p) => format!("@{}: {}", p.name, action.content),
            None => action.content.clone(),
        },
    }
}

/// Renders context entries one per line as `t<timestep> <speaker-or-kind>: <content>`.
pub fn render_context(entries: &[MemoryEntry]) -> String {
    if entries.is_empty() {
        return "(nothing yet)".to_string();
    }
    let mut out = String::new();
    for (i, e) in entries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "t{} {}: {}", e.timestep, e.label(), e.content);
    }
    out
}

const PERSONA_KEYS: &[&str] = &[
    "name",
    "party",
    "party_name",
    "state",
    "years_of_service",
    "traits",
    "policies",
];

#[derive(Debug, Clone, Copy)]
enum Slot {
    Persona,
    Opening,
    Turn,
    Interpretation,
    Reflection,
    ProfileSystem,
    ProfileGen,
}

impl Slot {
    const ALL: [Slot; 7] = [
        Slot::Persona,
        Slot::Opening,
        Slot::Turn,
        Slot::Interpretation,
        Slot::Reflection,
        Slot::ProfileSystem,
        Slot::ProfileGen,
    ];

    fn file_name(self) -> &'static str {
        match self {
            Slot::Persona => "persona.txt",
            Slot::Opening => "opening.txt",
            Slot::Turn => "turn.txt",
            Slot::Interpretation => "interpretation.txt",
            Slot::Reflection => "reflection.txt",
            Slot::ProfileSystem => "profile_system.txt",
            Slot::ProfileGen => "profile_gen.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            Slot::Persona => include_str!("../templates/persona.txt"),
            Slot::Opening => include_str!("../templates/opening.txt"),
            Slot::Turn => include_str!("../templates/turn.txt"),
            Slot::Interpretation => include_str!("../templates/interpretation.txt"),
            Slot::Reflection => include_str!("../templates/reflection.txt"),
            Slot::ProfileSystem => include_str!("../templates/profile_system.txt"),
            Slot::ProfileGen => include_str!("../templates/profile_gen.txt"),
        }
    }

    fn allowed(self) -> Vec<&'static str> {
        let mut keys = PERSONA_KEYS.to_vec();
        match self {
            Slot::Persona | Slot::ProfileSystem => {}
            Slot::Opening => keys.push("topic"),
            Slot::Turn => keys.extend(["topic", "context", "cycle", "cycles"]),
            Slot::Interpretation => keys.extend(["topic", "context"]),
            Slot::Reflection => keys.extend(["topic", "context", "question"]),
            Slot::ProfileGen => {
                keys = vec!["name", "party", "party_name", "state"];
            }
        }
        keys
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    text: String,
}

impl Template {
    fn parse(slot: Slot, text: &str) -> Result<Self, PromptError> {
        let allowed = slot.allowed();
        for name in placeholders(text).map_err(|message| PromptError::Template {
            template: slot.file_name().to_string(),
            message,
        })? {
            if !allowed.contains(&name) {
                return Err(PromptError::Template {
                    template: slot.file_name().to_string(),
                    message: format!("unknown placeholder {{{{{name}}}}}"),
                });
            }
        }
        Ok(Template {
            text: text.trim_end().to_string(),
        })
    }

    fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            // Placeholders were validated at parse time.
            let end = after.find("}}").expect("validated template");
            let key = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .unwrap_or_default();
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        out
    }
}

fn placeholders(text: &str) -> Result<Vec<&str>, String> {
    let mut names = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| "unterminated placeholder".to_string())?;
        names.push(after[..end].trim());
        rest = &after[end + 2..];
    }
    Ok(names)
}

/// The full set of prompt templates used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    persona: Template,
    opening: Template,
    turn: Template,
    interpretation: Template,
    reflection: Template,
    profile_system: Template,
    profile_gen: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::assemble(|slot| Ok(slot.builtin().to_string())).expect("builtin templates are valid")
    }

    /// Loads templates from `dir`; files that are absent fall back to the builtin text.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        Self::assemble(|slot| {
            let path = dir.join(slot.file_name());
            if path.exists() {
                fs::read_to_string(&path).map_err(|e| PromptError::Template {
                    template: path.display().to_string(),
                    message: e.to_string(),
                })
            } else {
                Ok(slot.builtin().to_string())
            }
        })
    }

    fn assemble(
        mut source: impl FnMut(Slot) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let mut parsed = Vec::with_capacity(Slot::ALL.len());
        for slot in Slot::ALL {
            parsed.push(Template::parse(slot, &source(slot)?)?);
        }
        let mut it = parsed.into_iter();
        let mut next = || it.next().expect("one template per slot");
        Ok(PromptTemplates {
            persona: next(),
            opening: next(),
            turn: next(),
            interpretation: next(),
            reflection: next(),
            profile_system: next(),
            profile_gen: next(),
        })
    }

    pub fn persona_preamble(&self, p: &AgentProfile) -> String {
        let vars = PersonaVars::new(p);
        self.persona.render(&vars.as_pairs())
    }

    pub fn build_opening_prompt(&self, p: &AgentProfile, sc: &Scenario, seed: i64) -> PromptBundle {
        let vars = PersonaVars::new(p);
        let mut pairs = vars.as_pairs();
        pairs.push(("topic", &sc.topic_prompt));
        PromptBundle {
            system_text: self.persona.render(&vars.as_pairs()),
            user_text: self.opening.render(&pairs),
            phase: Phase::Opening,
            params: debate_params(sc, seed),
        }
    }

    pub fn build_turn_prompt(
        &self,
        p: &AgentProfile,
        sc: &Scenario,
        ctx: &[MemoryEntry],
        cycle: u32,
        seed: i64,
    ) -> PromptBundle {
        let vars = PersonaVars::new(p);
        let context = render_context(ctx);
        let cycle = cycle.to_string();
        let cycles = sc.cycles.to_string();
        let mut pairs = vars.as_pairs();
        pairs.extend([
            ("topic", sc.topic_prompt.as_str()),
            ("context", context.as_str()),
            ("cycle", cycle.as_str()),
            ("cycles", cycles.as_str()),
        ]);
        PromptBundle {
            system_text: self.persona.render(&vars.as_pairs()),
            user_text: self.turn.render(&pairs),
            phase: Phase::Turn,
            params: debate_params(sc, seed),
        }
    }

    pub fn build_interpretation_prompt(
        &self,
        p: &AgentProfile,
        sc: &Scenario,
        recent: &[MemoryEntry],
        seed: i64,
    ) -> PromptBundle {
        let vars = PersonaVars::new(p);
        let context = render_context(recent);
        let mut pairs = vars.as_pairs();
        pairs.extend([
            ("topic", sc.topic_prompt.as_str()),
            ("context", context.as_str()),
        ]);
        PromptBundle {
            system_text: self.persona.render(&vars.as_pairs()),
            user_text: self.interpretation.render(&pairs),
            phase: Phase::Interpretation,
            params: DecodingParams {
                temperature: sc.decoding.interpretation_temperature,
                seed,
                max_tokens: sc.decoding.max_tokens,
            },
        }
    }

    /// Reflection prompt over an agent's whole history, ending with `question` verbatim.
    pub fn build_reflection_prompt(
        &self,
        p: &AgentProfile,
        sc: &Scenario,
        history: &[MemoryEntry],
        question: &str,
        seed: i64,
    ) -> PromptBundle {
        let vars = PersonaVars::new(p);
        let context = render_context(history);
        let mut pairs = vars.as_pairs();
        pairs.extend([
            ("topic", sc.topic_prompt.as_str()),
            ("context", context.as_str()),
            ("question", question),
        ]);
        PromptBundle {
            system_text: self.persona.render(&vars.as_pairs()),
            user_text: self.reflection.render(&pairs),
            phase: Phase::Reflection,
            params: debate_params(sc, seed),
        }
    }

    pub fn build_profile_prompt(&self, seed: &ProfileSeed, params: DecodingParams) -> PromptBundle {
        let party = seed.party.to_string();
        let pairs = [
            ("name", seed.name.as_str()),
            ("party", party.as_str()),
            ("party_name", seed.party.long_name()),
            ("state", seed.state.as_str()),
        ];
        PromptBundle {
            system_text: self.profile_system.render(&pairs),
            user_text: self.profile_gen.render(&pairs),
            phase: Phase::ProfileGen,
            params,
        }
    }
}

fn debate_params(sc: &Scenario, seed: i64) -> DecodingParams {
    DecodingParams {
        temperature: sc.decoding.debate_temperature,
        seed,
        max_tokens: sc.decoding.max_tokens,
    }
}

struct PersonaVars<'a> {
    p: &'a AgentProfile,
    party: String,
    years: String,
    traits: String,
}

impl<'a> PersonaVars<'a> {
    fn new(p: &'a AgentProfile) -> Self {
        PersonaVars {
            p,
            party: p.party.to_string(),
            years: p.years_of_service.to_string(),
            traits: p.traits.join(", "),
        }
    }

    fn as_pairs(&self) -> Vec<(&str, &str)> {
        vec![
            ("name", self.p.name.as_str()),
            ("party", self.party.as_str()),
            ("party_name", self.p.party.long_name()),
            ("state", self.p.state.as_str()),
            ("years_of_service", self.years.as_str()),
            ("traits", self.traits.as_str()),
            ("policies", self.p.policies.as_str()),
        ]
    }
}
