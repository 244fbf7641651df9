//! Reference checkers for the transcript grammar and for memory/transcript
//! consistency. They read only the produced artifacts, never engine state.

use std::fmt;

use super::{EventKind, TranscriptEvent};
use crate::memory::{MemoryKind, MemoryStream, Timestep};
use crate::profiles::{AgentId, Roster};
use crate::prompting::TurnKind;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarViolation {
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for GrammarViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "event {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for GrammarViolation {}

/// What a transcript must look like.
///
/// Strict mode admits exactly the scheduled events. Permissive mode also
/// admits operator perturbations and questions at cycle boundaries and after
/// the debate, as long as every scheduled event is still present in order.
#[derive(Debug, Clone)]
pub struct GrammarSpec {
    pub agents: Vec<AgentId>,
    pub cycles: u32,
    pub scheduled: Vec<(u32, String)>,
    pub reflect: Vec<AgentId>,
    pub questions: Vec<String>,
    pub strict: bool,
    pub require_complete: bool,
}

impl GrammarSpec {
    pub fn new(scenario: &Scenario, roster: &Roster) -> Self {
        GrammarSpec {
            agents: roster.members().iter().map(|m| m.agent_id.clone()).collect(),
            cycles: scenario.cycles,
            scheduled: scenario
                .perturbations
                .iter()
                .map(|p| (p.after_cycle, p.content.clone()))
                .collect(),
            reflect: scenario.reflecting_agents(roster),
            questions: scenario.reflection_questions.clone(),
            strict: true,
            require_complete: true,
        }
    }

    pub fn permissive(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn allow_incomplete(mut self) -> Self {
        self.require_complete = false;
        self
    }

    fn scheduled_after(&self, c: u32) -> Vec<&str> {
        self.scheduled
            .iter()
            .filter(|(a, _)| *a == c)
            .map(|(_, s)| s.as_str())
            .collect()
    }
}

struct Reader<'a> {
    events: &'a [TranscriptEvent],
    pos: usize,
    require_complete: bool,
}

fn violation(index: usize, message: impl Into<String>) -> GrammarViolation {
    GrammarViolation {
        index: Some(index),
        message: message.into(),
    }
}

impl<'a> Reader<'a> {
    /// `Ok(None)` means the transcript ended early and that is acceptable.
    fn expect(&mut self, what: &str) -> Result<Option<&'a TranscriptEvent>, GrammarViolation> {
        match self.events.get(self.pos) {
            Some(e) => {
                self.pos += 1;
                Ok(Some(e))
            }
            None if self.require_complete => Err(GrammarViolation {
                index: None,
                message: format!("transcript ended early; expected {what}"),
            }),
            None => Ok(None),
        }
    }

    fn peek(&self) -> Option<&'a TranscriptEvent> {
        self.events.get(self.pos)
    }
}

fn check_fields(i: usize, e: &TranscriptEvent) -> Result<(), GrammarViolation> {
    let needs_agent = !matches!(e.kind, EventKind::ScenarioPrompt | EventKind::Perturbation);
    if needs_agent != e.agent.is_some() {
        return Err(violation(i, format!("{:?} has wrong agent presence", e.kind)));
    }
    let needs_cycle = matches!(e.kind, EventKind::Turn | EventKind::Perturbation);
    if needs_cycle != e.cycle.is_some() {
        return Err(violation(i, format!("{:?} has wrong cycle presence", e.kind)));
    }
    if (e.kind == EventKind::Turn) != e.action.is_some() {
        return Err(violation(i, "action present exactly on turns"));
    }
    if (e.kind == EventKind::ReflectionAnswer) != e.question.is_some() {
        return Err(violation(i, "question present exactly on reflection answers"));
    }
    if e.content.trim().is_empty() {
        return Err(violation(i, "empty content"));
    }
    if let Some(a) = &e.action {
        let ok = match a.action {
            TurnKind::Pass => a.content.is_empty() && a.addressed_to.is_none(),
            TurnKind::Speak => !a.content.is_empty(),
        };
        if !ok {
            return Err(violation(i, "turn action violates pass/speak content rule"));
        }
    }
    Ok(())
}

fn is_subsequence<T: PartialEq>(needle: &[T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

pub fn check_transcript(
    events: &[TranscriptEvent],
    spec: &GrammarSpec,
) -> Result<(), GrammarViolation> {
    let mut last_t: Option<Timestep> = None;
    for (i, e) in events.iter().enumerate() {
        if e.index != i as u64 {
            return Err(violation(i, format!("index {} breaks the 0..n sequence", e.index)));
        }
        if last_t.is_some_and(|t| e.timestep <= t) {
            return Err(violation(i, "timesteps not strictly increasing"));
        }
        last_t = Some(e.timestep);
        check_fields(i, e)?;
    }

    let mut r = Reader {
        events,
        pos: 0,
        require_complete: spec.require_complete,
    };
    macro_rules! next {
        ($what:expr) => {
            match r.expect($what)? {
                Some(e) => (r.pos - 1, e),
                None => return Ok(()),
            }
        };
    }

    let (i, e) = next!("scenario_prompt");
    if e.kind != EventKind::ScenarioPrompt {
        return Err(violation(i, "transcript must open with the scenario prompt"));
    }
    for agent in &spec.agents {
        let (i, e) = next!("opening_statement");
        if e.kind != EventKind::OpeningStatement || e.agent.as_ref() != Some(agent) {
            return Err(violation(i, format!("expected opening statement by {agent}")));
        }
    }
    for c in 0..=spec.cycles {
        if c > 0 {
            for agent in &spec.agents {
                let (i, e) = next!("turn");
                if e.kind != EventKind::Turn
                    || e.agent.as_ref() != Some(agent)
                    || e.cycle != Some(c)
                {
                    return Err(violation(i, format!("expected cycle {c} turn by {agent}")));
                }
            }
        }
        if c == spec.cycles {
            break;
        }
        let start = r.pos;
        while let Some(e) = r.peek() {
            let allowed = e.kind == EventKind::Perturbation
                || (!spec.strict && e.kind == EventKind::ReflectionAnswer);
            if !allowed {
                break;
            }
            if e.kind == EventKind::Perturbation && e.cycle != Some(c) {
                return Err(violation(r.pos, format!("perturbation not tagged with cycle {c}")));
            }
            r.pos += 1;
        }
        check_boundary(spec, c, &events[start..r.pos], start, r.peek().is_none())?;
    }

    let tail = &events[r.pos..];
    let base = r.pos;
    let final_perturbations: Vec<&str> = tail
        .iter()
        .take_while(|e| e.kind == EventKind::Perturbation)
        .map(|e| e.content.as_str())
        .collect();
    let expected_reflections: Vec<(&AgentId, &str)> = spec
        .reflect
        .iter()
        .flat_map(|a| spec.questions.iter().map(move |q| (a, q.as_str())))
        .collect();

    if spec.strict {
        let scheduled = spec.scheduled_after(spec.cycles);
        let n = final_perturbations.len();
        let ok = if spec.require_complete || n < tail.len() {
            final_perturbations == scheduled
        } else {
            scheduled.starts_with(&final_perturbations)
        };
        if !ok {
            return Err(violation(base, "perturbations after the last cycle do not match the schedule"));
        }
        if let Some(k) = tail[..n].iter().position(|e| e.cycle != Some(spec.cycles)) {
            return Err(violation(base + k, "perturbation tagged with the wrong cycle"));
        }
        for (k, e) in tail[n..].iter().enumerate() {
            let i = base + n + k;
            let Some((agent, q)) = expected_reflections.get(k) else {
                return Err(violation(i, "unexpected event after the scheduled reflections"));
            };
            if e.kind != EventKind::ReflectionAnswer
                || e.agent.as_ref() != Some(*agent)
                || e.question.as_deref() != Some(*q)
            {
                return Err(violation(i, format!("expected reflection answer by {agent} to {q:?}")));
            }
        }
        if spec.require_complete && tail.len() - n != expected_reflections.len() {
            return Err(GrammarViolation {
                index: None,
                message: format!(
                    "expected {} reflection answers, found {}",
                    expected_reflections.len(),
                    tail.len() - n
                ),
            });
        }
    } else {
        for (k, e) in tail.iter().enumerate() {
            match e.kind {
                EventKind::Perturbation if e.cycle == Some(spec.cycles) => {}
                EventKind::ReflectionAnswer => {}
                _ => return Err(violation(base + k, "only perturbations and reflection answers may follow the last cycle")),
            }
        }
        let perturbations: Vec<&str> = tail
            .iter()
            .filter(|e| e.kind == EventKind::Perturbation)
            .map(|e| e.content.as_str())
            .collect();
        let answers: Vec<(&AgentId, &str)> = tail
            .iter()
            .filter(|e| e.kind == EventKind::ReflectionAnswer)
            .map(|e| (e.agent.as_ref().expect("checked"), e.question.as_deref().expect("checked")))
            .collect();
        if spec.require_complete {
            if !is_subsequence(&spec.scheduled_after(spec.cycles), &perturbations) {
                return Err(violation(base, "scheduled final perturbations missing"));
            }
            if !is_subsequence(&expected_reflections, &answers) {
                return Err(violation(base, "scheduled reflection answers missing or out of order"));
            }
        }
    }
    Ok(())
}

fn check_boundary(
    spec: &GrammarSpec,
    c: u32,
    slot: &[TranscriptEvent],
    start: usize,
    at_end: bool,
) -> Result<(), GrammarViolation> {
    let scheduled = spec.scheduled_after(c);
    let seen: Vec<&str> = slot
        .iter()
        .filter(|e| e.kind == EventKind::Perturbation)
        .map(|e| e.content.as_str())
        .collect();
    let truncated = at_end && !spec.require_complete;
    let ok = match (spec.strict, truncated) {
        (true, false) => seen == scheduled,
        (true, true) => scheduled.starts_with(&seen),
        (false, false) => is_subsequence(&scheduled, &seen),
        (false, true) => true,
    };
    if ok {
        Ok(())
    } else {
        Err(violation(
            start,
            format!("perturbations after cycle {c} do not match the schedule"),
        ))
    }
}

/// Verifies that every agent's stream mirrors the transcript: shared events
/// appear in every stream, each reflection answer only in its author's, and
/// each turn is followed by exactly one interpretation from its speaker.
pub fn check_memory_consistency(
    events: &[TranscriptEvent],
    streams: &[MemoryStream],
) -> Result<(), GrammarViolation> {
    type Projection<'a> = (Timestep, MemoryKind, Option<&'a AgentId>, &'a str);
    let shared: Vec<Projection> = events
        .iter()
        .filter_map(|e| {
            let kind = match e.kind {
                EventKind::ScenarioPrompt => MemoryKind::ScenarioPrompt,
                EventKind::OpeningStatement | EventKind::Turn => MemoryKind::Observation,
                EventKind::Perturbation => MemoryKind::Perturbation,
                EventKind::ReflectionAnswer => return None,
            };
            Some((e.timestep, kind, e.agent.as_ref(), e.content.as_str()))
        })
        .collect();
    let fail = |owner: &AgentId, msg: String| GrammarViolation {
        index: None,
        message: format!("memory of {owner}: {msg}"),
    };
    for s in streams {
        let owner = s.owner();
        let entries = s.full_history();
        let mirrored: Vec<Projection> = entries
            .iter()
            .filter(|m| m.kind.is_mirrored())
            .map(|m| (m.timestep, m.kind, m.speaker.as_ref(), m.content.as_str()))
            .collect();
        if mirrored != shared {
            let at = mirrored
                .iter()
                .zip(&shared)
                .position(|(a, b)| a != b)
                .unwrap_or(mirrored.len().min(shared.len()));
            return Err(fail(
                owner,
                format!(
                    "observed events diverge from transcript at position {at} ({} entries vs {} events)",
                    mirrored.len(),
                    shared.len()
                ),
            ));
        }
        let own_reflections: Vec<(Timestep, &str)> = entries
            .iter()
            .filter(|m| m.kind == MemoryKind::Reflection)
            .map(|m| (m.timestep, m.content.as_str()))
            .collect();
        let answered: Vec<(Timestep, &str)> = events
            .iter()
            .filter(|e| e.kind == EventKind::ReflectionAnswer && e.agent.as_ref() == Some(owner))
            .map(|e| (e.timestep, e.content.as_str()))
            .collect();
        if own_reflections != answered {
            return Err(fail(owner, "reflection entries differ from reflection answers".into()));
        }
        let turns: Vec<Timestep> = events
            .iter()
            .filter(|e| e.kind == EventKind::Turn && e.agent.as_ref() == Some(owner))
            .map(|e| e.timestep)
            .collect();
        let interpretations: Vec<Timestep> = entries
            .iter()
            .filter(|m| m.kind == MemoryKind::Interpretation)
            .map(|m| m.timestep - 1)
            .collect();
        if interpretations != turns {
            return Err(fail(
                owner,
                format!(
                    "{} interpretations for {} turns, or not immediately after them",
                    interpretations.len(),
                    turns.len()
                ),
            ));
        }
    }
    Ok(())
}
