//! Agent persona records and rosters.
//!
//! A roster document is a JSON object with a single `members` array; member
//! order fixes turn order for every scenario run against the roster.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionRequest, ModelBackend, Route};
use crate::prompting::{DecodingParams, Phase, PromptTemplates};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("extraction error: {0}")]
    Extraction(String),
}

impl ProfileError {
    /// Violated field names (or roster-level messages) carried by a validation error.
    pub fn violations(&self) -> &[String] {
        match self {
            ProfileError::Validation(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    D,
    R,
    I,
}

impl Party {
    pub fn long_name(self) -> &'static str {
        match self {
            Party::D => "Democrat",
            Party::R => "Republican",
            Party::I => "Independent",
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Party::D => "D",
            Party::R => "R",
            Party::I => "I",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Party {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D" | "DEMOCRAT" => Ok(Party::D),
            "R" | "REPUBLICAN" => Ok(Party::R),
            "I" | "INDEPENDENT" => Ok(Party::I),
            other => Err(format!("unknown party {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    /// Lowercase, underscore-separated slug of a display name.
    pub fn from_name(name: &str) -> Self {
        let mut out = String::new();
        for c in name.chars() {
            if c.is_ascii_alphanumeric() {
                out.push(c.to_ascii_lowercase());
            } else if !out.ends_with('_') && !out.is_empty() {
                out.push('_');
            }
        }
        while out.ends_with('_') {
            out.pop();
        }
        AgentId(out)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

/// Persona record conditioning every prompt an agent receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub name: String,
    pub party: Party,
    pub state: String,
    pub years_of_service: i64,
    pub traits: Vec<String>,
    pub policies: String,
}

/// Returns the names of every violated field; empty means the profile is valid.
pub fn validate_profile(p: &AgentProfile) -> Vec<String> {
    let mut violations = Vec::new();
    if p.agent_id.0.trim().is_empty() {
        violations.push("agent_id".to_string());
    }
    if p.name.trim().is_empty() {
        violations.push("name".to_string());
    }
    if p.state.len() != 2 || !p.state.chars().all(|c| c.is_ascii_alphabetic()) {
        violations.push("state".to_string());
    }
    if p.years_of_service < 0 {
        violations.push("years_of_service".to_string());
    }
    if p.traits.is_empty() || p.traits.iter().any(|t| t.trim().is_empty()) {
        violations.push("traits".to_string());
    }
    if p.policies.trim().is_empty() {
        violations.push("policies".to_string());
    }
    violations
}

/// Ordered, validated list of participating agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Roster {
    members: Vec<AgentProfile>,
}

#[derive(Deserialize)]
struct RosterDocument {
    members: Vec<AgentProfile>,
}

impl Roster {
    pub fn new(members: Vec<AgentProfile>) -> Result<Self, ProfileError> {
        let mut violations = Vec::new();
        if members.len() < 2 {
            violations.push(format!(
                "members: roster needs at least 2 members, found {}",
                members.len()
            ));
        }
        let mut seen = HashSet::new();
        for m in &members {
            for field in validate_profile(m) {
                violations.push(format!("{}: {field}", m.agent_id));
            }
            if !seen.insert(m.agent_id.clone()) {
                violations.push(format!("agent_id: duplicate id {}", m.agent_id));
            }
        }
        if violations.is_empty() {
            Ok(Roster { members })
        } else {
            Err(ProfileError::Validation(violations))
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let doc: RosterDocument =
            serde_json::from_str(text).map_err(|e| ProfileError::Parse(e.to_string()))?;
        Roster::new(doc.members)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("roster serializes")
    }

    pub fn members(&self) -> &[AgentProfile] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: &AgentId) -> Option<&AgentProfile> {
        self.members.iter().find(|m| &m.agent_id == id)
    }

    pub fn position(&self, id: &AgentId) -> Option<usize> {
        self.members.iter().position(|m| &m.agent_id == id)
    }

    pub fn find_by_name(&self, name: &str) -> Option<&AgentProfile> {
        let name = name.trim();
        self.members
            .iter()
            .find(|m| m.name.eq_ignore_ascii_case(name))
    }
}

pub fn load_roster(path: impl AsRef<Path>) -> Result<Roster, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Roster::from_json(&text)
}

pub fn save_roster(roster: &Roster, path: impl AsRef<Path>) -> Result<(), ProfileError> {
    let path = path.as_ref();
    fs::write(path, roster.to_json() + "\n").map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Structural inputs to profile generation. Only policies and traits come
/// from the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSeed {
    pub name: String,
    pub party: Party,
    pub state: String,
    #[serde(default)]
    pub agent_id: Option<AgentId>,
    #[serde(default)]
    pub years_of_service: Option<i64>,
}

impl ProfileSeed {
    pub fn new(name: impl Into<String>, party: Party, state: impl Into<String>) -> Self {
        ProfileSeed {
            name: name.into(),
            party,
            state: state.into(),
            agent_id: None,
            years_of_service: None,
        }
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
            .clone()
            .unwrap_or_else(|| AgentId::from_name(&self.name))
    }
}

/// Extracts `(policies, traits)` from a completion in the
/// `POLICIES:` paragraph / `TRAITS:` comma-list format.
pub fn extract_profile_sections(text: &str) -> Result<(String, Vec<String>), ProfileError> {
    if text.trim().is_empty() {
        return Err(ProfileError::Extraction("empty completion".into()));
    }
    let mut policies: Option<Vec<&str>> = None;
    let mut traits: Option<&str> = None;
    let mut in_policies = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = strip_label(trimmed, "POLICIES:") {
            policies = Some(vec![rest]);
            in_policies = true;
        } else if let Some(rest) = strip_label(trimmed, "TRAITS:") {
            traits = Some(rest);
            in_policies = false;
        } else if in_policies {
            if let Some(p) = policies.as_mut() {
                p.push(trimmed);
            }
        }
    }
    let policies = policies
        .map(|parts| {
            parts
                .into_iter()
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|p| !p.is_empty())
        .ok_or_else(|| ProfileError::Extraction("missing POLICIES section".into()))?;
    let traits: Vec<String> = traits
        .ok_or_else(|| ProfileError::Extraction("missing TRAITS line".into()))?
        .split(',')
        .map(|t| t.trim().trim_end_matches('.').trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if traits.is_empty() {
        return Err(ProfileError::Extraction("TRAITS line lists no traits".into()));
    }
    Ok((policies, traits))
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    if line.len() >= label.len() && line[..label.len()].eq_ignore_ascii_case(label) {
        Some(line[label.len()..].trim())
    } else {
        None
    }
}

pub fn generate_profile(
    seed: &ProfileSeed,
    backend: &dyn ModelBackend,
    templates: &PromptTemplates,
    model: &str,
    params: DecodingParams,
) -> Result<AgentProfile, ProfileError> {
    let bundle = templates.build_profile_prompt(seed, params);
    let agent_id = seed.agent_id();
    let req = CompletionRequest::from_bundle(
        &bundle,
        model,
        Some(Route::new(agent_id.clone(), Phase::ProfileGen)),
    );
    let result = backend.complete(&req)?;
    let (policies, traits) = extract_profile_sections(&result.text)?;
    let profile = AgentProfile {
        agent_id,
        name: seed.name.clone(),
        party: seed.party,
        state: seed.state.clone(),
        years_of_service: seed.years_of_service.unwrap_or(0),
        traits,
        policies,
    };
    let violations = validate_profile(&profile);
    if violations.is_empty() {
        Ok(profile)
    } else {
        Err(ProfileError::Validation(violations))
    }
}
