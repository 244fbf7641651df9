use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use sha2::{Digest, Sha256};

use super::{
    write_jsonl, EngineError, EventHub, EventKind, PerturbationOrigin, PerturbationProvenance,
    RunConfig, RunMetadata, RunMode, Subscription, Transcript, TranscriptEvent, TranscriptHeader,
};
use crate::backend::{CompletionRequest, ModelBackend, Route, Source};
use crate::memory::{save_stream, MemoryEntry, MemoryKind, MemoryStream, Timestep};
use crate::profiles::{AgentId, Roster};
use crate::prompting::{parse_turn_response, Phase, PromptBundle, PromptTemplates, TurnAction};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    Start,
    Opening(usize),
    /// Scheduled perturbations for the boundary after this cycle are pending.
    Boundary(u32),
    Turn { cycle: u32, agent: usize },
    Reflection { agent: usize, question: usize },
    Finished,
}

/// One scenario run. Each [`Simulation::step`] emits exactly one transcript event.
pub struct Simulation {
    scenario: Scenario,
    roster: Roster,
    templates: PromptTemplates,
    config: RunConfig,
    backend: Arc<dyn ModelBackend>,
    run_id: String,
    events: Vec<TranscriptEvent>,
    streams: Vec<MemoryStream>,
    clock: Timestep,
    cursor: Cursor,
    next_scheduled: usize,
    reflectors: Vec<usize>,
    provenance: Vec<PerturbationProvenance>,
    sources: BTreeMap<Source, u64>,
    hub: EventHub,
    started_at: String,
    finished_at: Option<String>,
    failure: Option<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn run_id_for(scenario: &Scenario, roster: &Roster, config: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(scenario.to_json().as_bytes());
    h.update(b"\0");
    h.update(roster.to_json().as_bytes());
    h.update(b"\0");
    h.update(config.seed.to_string().as_bytes());
    h.update(b"\0");
    h.update(config.model.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

impl Simulation {
    pub fn new(
        scenario: Scenario,
        roster: Roster,
        backend: Arc<dyn ModelBackend>,
        templates: PromptTemplates,
        config: RunConfig,
    ) -> Result<Self, EngineError> {
        scenario.validate_against(&roster)?;
        let reflectors = scenario
            .reflecting_agents(&roster)
            .iter()
            .map(|id| roster.position(id).expect("validated against roster"))
            .collect();
        let streams = roster
            .members()
            .iter()
            .map(|m| MemoryStream::new(m.agent_id.clone()))
            .collect();
        Ok(Simulation {
            run_id: run_id_for(&scenario, &roster, &config),
            scenario,
            roster,
            templates,
            config,
            backend,
            events: Vec::new(),
            streams,
            clock: 0,
            cursor: Cursor::Start,
            next_scheduled: 0,
            reflectors,
            provenance: Vec::new(),
            sources: BTreeMap::new(),
            hub: EventHub::new(),
            started_at: now(),
            finished_at: None,
            failure: None,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn mode(&self) -> RunMode {
        self.config.mode
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn streams(&self) -> &[MemoryStream] {
        &self.streams
    }

    pub fn stream(&self, id: &AgentId) -> Option<&MemoryStream> {
        self.roster.position(id).map(|i| &self.streams[i])
    }

    pub fn subscribe(&self) -> Subscription {
        self.hub.subscribe()
    }

    pub fn hub(&self) -> &EventHub {
        &self.hub
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == Cursor::Finished || self.failure.is_some()
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// The cycle whose end the run is currently sitting at, if any.
    pub fn boundary(&self) -> Option<u32> {
        if self.failure.is_some() {
            return None;
        }
        match self.cursor {
            Cursor::Boundary(c) => Some(c),
            Cursor::Turn { cycle, agent: 0 } => Some(cycle - 1),
            Cursor::Reflection {
                agent: 0,
                question: 0,
            } => Some(self.scenario.cycles),
            _ => None,
        }
    }

    pub fn debate_complete(&self) -> bool {
        matches!(
            self.cursor,
            Cursor::Reflection { .. } | Cursor::Finished
        )
    }

    pub fn can_perturb(&self) -> bool {
        self.config.mode == RunMode::Stepped && self.boundary().is_some()
    }

    pub fn can_ask(&self) -> bool {
        self.failure.is_none() && (self.debate_complete() || self.can_perturb())
    }

    /// Short description of what the next step will emit.
    pub fn next_event(&self) -> String {
        let id = |i: usize| self.roster.members()[i].agent_id.to_string();
        match self.cursor {
            Cursor::Start => "scenario_prompt".into(),
            Cursor::Opening(i) => format!("opening_statement by {}", id(i)),
            Cursor::Boundary(c) => format!("scheduled perturbation after cycle {c}"),
            Cursor::Turn { cycle, agent } => format!("turn by {} in cycle {cycle}", id(agent)),
            Cursor::Reflection { agent, question } => format!(
                "reflection_answer by {} to question {}",
                id(self.reflectors[agent]),
                question + 1
            ),
            Cursor::Finished => "none (finished)".into(),
        }
    }

    fn settle(&mut self) {
        let agents = self.roster.len();
        let questions = self.scenario.reflection_questions.len();
        loop {
            self.cursor = match self.cursor {
                Cursor::Opening(i) if i == agents => Cursor::Boundary(0),
                Cursor::Turn { cycle, agent } if agent == agents => Cursor::Boundary(cycle),
                Cursor::Boundary(c) => {
                    let pending = self
                        .scenario
                        .perturbations
                        .get(self.next_scheduled)
                        .is_some_and(|p| p.after_cycle == c);
                    if pending {
                        return;
                    }
                    if c < self.scenario.cycles {
                        Cursor::Turn {
                            cycle: c + 1,
                            agent: 0,
                        }
                    } else {
                        Cursor::Reflection {
                            agent: 0,
                            question: 0,
                        }
                    }
                }
                Cursor::Reflection { agent, question } if question == questions => {
                    Cursor::Reflection {
                        agent: agent + 1,
                        question: 0,
                    }
                }
                Cursor::Reflection { agent, .. } if agent == self.reflectors.len() => {
                    Cursor::Finished
                }
                _ => break,
            };
        }
        if self.cursor == Cursor::Finished && self.finished_at.is_none() {
            self.finished_at = Some(now());
            self.hub.close();
        }
    }

    fn abort(&mut self, e: &EngineError) {
        if self.failure.is_none() {
            self.failure = Some(e.to_string());
            self.finished_at = Some(now());
            self.hub.close();
        }
    }

    fn guard<T>(&mut self, r: Result<T, EngineError>) -> Result<T, EngineError> {
        if let Err(
            e @ (EngineError::Backend { .. }
            | EngineError::EmptyResponse { .. }
            | EngineError::Memory(_)),
        ) = &r
        {
            self.abort(e);
        }
        r
    }

    fn request(&self, agent: usize, bundle: &PromptBundle) -> CompletionRequest {
        let id = self.roster.members()[agent].agent_id.clone();
        CompletionRequest::from_bundle(bundle, &self.config.model, Some(Route::new(id, bundle.phase)))
    }

    fn call(&mut self, agent: usize, bundle: PromptBundle) -> Result<String, EngineError> {
        let req = self.request(agent, &bundle);
        let (text, source) = complete(self.backend.as_ref(), &req)?;
        *self.sources.entry(source).or_default() += 1;
        Ok(text)
    }

    fn emit(
        &mut self,
        kind: EventKind,
        cycle: Option<u32>,
        agent: Option<usize>,
        content: String,
        action: Option<TurnAction>,
        question: Option<String>,
    ) -> Result<TranscriptEvent, EngineError> {
        let t = self.clock;
        self.clock += 1;
        let agent_id = agent.map(|i| self.roster.members()[i].agent_id.clone());
        let sid = self.scenario.scenario_id.clone();
        let shared = match kind {
            EventKind::ScenarioPrompt => Some((MemoryKind::ScenarioPrompt, None)),
            EventKind::OpeningStatement | EventKind::Turn => {
                Some((MemoryKind::Observation, agent_id.clone()))
            }
            EventKind::Perturbation => Some((MemoryKind::Perturbation, None)),
            EventKind::ReflectionAnswer => None,
        };
        match shared {
            Some((mk, speaker)) => {
                for s in &mut self.streams {
                    s.append(MemoryEntry::new(t, mk, speaker.clone(), content.clone(), sid.clone()))?;
                }
            }
            None => {
                let i = agent.expect("reflection has an agent");
                self.streams[i].append(MemoryEntry::new(
                    t,
                    MemoryKind::Reflection,
                    agent_id.clone(),
                    content.clone(),
                    sid,
                ))?;
            }
        }
        let event = TranscriptEvent {
            index: self.events.len() as u64,
            timestep: t,
            kind,
            cycle,
            agent: agent_id,
            content,
            action,
            question,
        };
        self.events.push(event.clone());
        self.hub.publish(&event);
        Ok(event)
    }

    /// Advances exactly one event.
    pub fn step(&mut self) -> Result<Vec<TranscriptEvent>, EngineError> {
        if let Some(f) = &self.failure {
            return Err(EngineError::Aborted(f.clone()));
        }
        let r = self.step_inner();
        let r = self.guard(r);
        if r.is_ok() {
            self.settle();
        }
        r.map(|e| vec![e])
    }

    fn step_inner(&mut self) -> Result<TranscriptEvent, EngineError> {
        match self.cursor {
            Cursor::Finished => Err(EngineError::Finished),
            Cursor::Start => {
                self.cursor = Cursor::Opening(0);
                let topic = self.scenario.topic_prompt.clone();
                self.emit(EventKind::ScenarioPrompt, None, None, topic, None, None)
            }
            Cursor::Opening(i) => {
                let bundle = self.templates.build_opening_prompt(
                    &self.roster.members()[i],
                    &self.scenario,
                    self.config.seed,
                );
                let text = self.call(i, bundle)?;
                self.cursor = Cursor::Opening(i + 1);
                self.emit(EventKind::OpeningStatement, None, Some(i), text, None, None)
            }
            Cursor::Boundary(c) => {
                let content = self.scenario.perturbations[self.next_scheduled].content.clone();
                self.next_scheduled += 1;
                let e = self.emit(EventKind::Perturbation, Some(c), None, content, None, None)?;
                self.provenance.push(PerturbationProvenance {
                    index: e.index,
                    origin: PerturbationOrigin::Scheduled,
                });
                Ok(e)
            }
            Cursor::Turn { cycle, agent } => self.take_turn(cycle, agent),
            Cursor::Reflection { agent, question } => {
                let who = self.reflectors[agent];
                let q = self.scenario.reflection_questions[question].clone();
                let e = self.reflect(who, &q)?;
                self.cursor = Cursor::Reflection {
                    agent,
                    question: question + 1,
                };
                Ok(e)
            }
        }
    }

    fn take_turn(&mut self, cycle: u32, agent: usize) -> Result<TranscriptEvent, EngineError> {
        let k = self.scenario.context_window_k;
        let ctx = self.streams[agent].context_window(k, self.clock).to_vec();
        let bundle = self.templates.build_turn_prompt(
            &self.roster.members()[agent],
            &self.scenario,
            &ctx,
            cycle,
            self.config.seed,
        );
        let raw = self.call(agent, bundle)?;
        let action = parse_turn_response(&raw, &self.roster).map_err(|_| EngineError::EmptyResponse {
            agent: self.roster.members()[agent].agent_id.clone(),
            phase: Phase::Turn,
        })?;
        self.cursor = Cursor::Turn {
            cycle,
            agent: agent + 1,
        };
        let event = self.emit(EventKind::Turn, Some(cycle), Some(agent), raw, Some(action), None)?;
        self.interpret(agent)?;
        Ok(event)
    }

    fn interpret(&mut self, agent: usize) -> Result<(), EngineError> {
        let k = self.scenario.context_window_k;
        let recent = self.streams[agent].context_window(k, self.clock).to_vec();
        let bundle = self.templates.build_interpretation_prompt(
            &self.roster.members()[agent],
            &self.scenario,
            &recent,
            self.config.seed,
        );
        let text = self.call(agent, bundle)?;
        let t = self.clock;
        self.clock += 1;
        let id = self.roster.members()[agent].agent_id.clone();
        self.streams[agent].append(MemoryEntry::new(
            t,
            MemoryKind::Interpretation,
            Some(id),
            text,
            self.scenario.scenario_id.clone(),
        ))?;
        Ok(())
    }

    fn reflect(&mut self, agent: usize, question: &str) -> Result<TranscriptEvent, EngineError> {
        let bundle = self.templates.build_reflection_prompt(
            &self.roster.members()[agent],
            &self.scenario,
            self.streams[agent].full_history(),
            question,
            self.config.seed,
        );
        let text = self.call(agent, bundle)?;
        self.emit(
            EventKind::ReflectionAnswer,
            None,
            Some(agent),
            text,
            None,
            Some(question.to_string()),
        )
    }

    /// Operator perturbation; only legal in stepped mode at a cycle boundary.
    pub fn inject_perturbation(&mut self, content: &str) -> Result<TranscriptEvent, EngineError> {
        if let Some(f) = &self.failure {
            return Err(EngineError::Aborted(f.clone()));
        }
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        let content = content.trim();
        if content.is_empty() {
            return Err(EngineError::Validation("perturbation content is empty".into()));
        }
        if self.config.mode != RunMode::Stepped {
            return Err(EngineError::Phase(
                "operator perturbations require stepped mode".into(),
            ));
        }
        let cycle = self.boundary().ok_or_else(|| {
            EngineError::Phase(format!(
                "perturbations are accepted only at a cycle boundary; next event is {}",
                self.next_event()
            ))
        })?;
        let r = self.emit(EventKind::Perturbation, Some(cycle), None, content.to_string(), None, None);
        let e = self.guard(r)?;
        self.provenance.push(PerturbationProvenance {
            index: e.index,
            origin: PerturbationOrigin::Operator,
        });
        Ok(e)
    }

    /// Operator question. Legal once the debate is over, or in stepped mode at a boundary.
    pub fn ask_reflection(
        &mut self,
        agent: &AgentId,
        question: &str,
    ) -> Result<TranscriptEvent, EngineError> {
        if let Some(f) = &self.failure {
            return Err(EngineError::Aborted(f.clone()));
        }
        let idx = self
            .roster
            .position(agent)
            .ok_or_else(|| EngineError::UnknownAgent(agent.clone()))?;
        if question.trim().is_empty() {
            return Err(EngineError::Validation("question is empty".into()));
        }
        if !self.can_ask() {
            return Err(EngineError::Phase(format!(
                "questions are accepted only at a cycle boundary or after the debate; next event is {}",
                self.next_event()
            )));
        }
        let r = self.reflect(idx, question);
        self.guard(r)
    }

    /// Runs every remaining event. Scheduled reflection answers for distinct
    /// agents are computed concurrently and committed in roster × question order.
    pub fn run_to_completion(&mut self) -> Result<(), EngineError> {
        while !self.is_finished() && !matches!(self.cursor, Cursor::Reflection { .. }) {
            self.step()?;
        }
        if self.is_finished() {
            return match &self.failure {
                Some(f) => Err(EngineError::Aborted(f.clone())),
                None => Ok(()),
            };
        }
        let Cursor::Reflection { agent: a0, question: q0 } = self.cursor else {
            unreachable!()
        };
        let questions = self.scenario.reflection_questions.clone();
        let mut plan: Vec<(usize, Vec<usize>, Timestep)> = Vec::new();
        let mut t = self.clock;
        for (slot, &agent) in self.reflectors.iter().enumerate().skip(a0) {
            let qs: Vec<usize> = (if slot == a0 { q0 } else { 0 }..questions.len()).collect();
            plan.push((agent, qs.clone(), t));
            t += qs.len() as Timestep;
        }

        let answers: Vec<Vec<Result<(String, Source), EngineError>>> = thread::scope(|scope| {
            let handles: Vec<_> = plan
                .iter()
                .map(|(agent, qs, base)| {
                    let this = &*self;
                    let questions = &questions;
                    scope.spawn(move || this.reflect_offline(*agent, qs, *base, questions))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("reflection worker panicked"))
                .collect()
        });

        for ((agent, qs, _), results) in plan.iter().zip(answers) {
            for (&q, result) in qs.iter().zip(results) {
                let r = result.and_then(|(text, source)| {
                    *self.sources.entry(source).or_default() += 1;
                    self.emit(
                        EventKind::ReflectionAnswer,
                        None,
                        Some(*agent),
                        text,
                        None,
                        Some(questions[q].clone()),
                    )
                });
                self.guard(r)?;
                if let Cursor::Reflection { agent: a, .. } = self.cursor {
                    self.cursor = Cursor::Reflection {
                        agent: a,
                        question: q + 1,
                    };
                }
                self.settle();
            }
        }
        Ok(())
    }

    /// Answers `qs` for one agent against a private copy of its stream,
    /// assigning the timesteps the committed events will receive.
    fn reflect_offline(
        &self,
        agent: usize,
        qs: &[usize],
        base: Timestep,
        questions: &[String],
    ) -> Vec<Result<(String, Source), EngineError>> {
        let mut stream = self.streams[agent].clone();
        let profile = &self.roster.members()[agent];
        let mut out = Vec::with_capacity(qs.len());
        for (offset, &q) in qs.iter().enumerate() {
            let bundle = self.templates.build_reflection_prompt(
                profile,
                &self.scenario,
                stream.full_history(),
                &questions[q],
                self.config.seed,
            );
            let req = self.request(agent, &bundle);
            match complete(self.backend.as_ref(), &req) {
                Ok((text, source)) => {
                    let entry = MemoryEntry::new(
                        base + offset as Timestep,
                        MemoryKind::Reflection,
                        Some(profile.agent_id.clone()),
                        text.clone(),
                        self.scenario.scenario_id.clone(),
                    );
                    if let Err(e) = stream.append(entry) {
                        out.push(Err(e.into()));
                        break;
                    }
                    out.push(Ok((text, source)));
                }
                Err(e) => {
                    out.push(Err(e));
                    break;
                }
            }
        }
        out
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader {
            record: "header".into(),
            run_id: self.run_id.clone(),
            scenario_id: self.scenario.scenario_id.clone(),
            model: self.config.model.clone(),
            seed: self.config.seed,
            complete: self.cursor == Cursor::Finished && self.failure.is_none(),
            roster: self.roster.members().to_vec(),
        }
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            run_id: self.run_id.clone(),
            scenario_id: self.scenario.scenario_id.clone(),
            model: self.config.model.clone(),
            seed: self.config.seed,
            mode: self.config.mode,
            started_at: self.started_at.clone(),
            finished_at: self.finished_at.clone(),
            complete: self.cursor == Cursor::Finished && self.failure.is_none(),
            error: self.failure.clone(),
            event_count: self.events.len(),
            backend_sources: self
                .sources
                .iter()
                .map(|(s, n)| (format!("{s:?}").to_lowercase(), *n))
                .collect(),
            perturbations: self.provenance.clone(),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            header: self.header(),
            events: self.events.clone(),
            metadata: self.metadata(),
        }
    }

    /// Writes `transcript.jsonl`, `transcript.txt`, `run.json` and one
    /// `memory/<agent_id>.json` per agent under `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), EngineError> {
        let io = |p: &Path, e: std::io::Error| EngineError::Io(format!("{}: {e}", p.display()));
        let mem_dir = dir.join("memory");
        fs::create_dir_all(&mem_dir).map_err(|e| io(&mem_dir, e))?;
        let t = self.transcript();
        let p = dir.join("transcript.jsonl");
        fs::write(&p, write_jsonl(&t.header, &t.events)).map_err(|e| io(&p, e))?;
        let p = dir.join("transcript.txt");
        fs::write(&p, t.to_text()).map_err(|e| io(&p, e))?;
        let p = dir.join("run.json");
        let meta = serde_json::to_string_pretty(&t.metadata).expect("metadata serializes") + "\n";
        fs::write(&p, meta).map_err(|e| io(&p, e))?;
        for s in &self.streams {
            save_stream(s, mem_dir.join(format!("{}.json", s.owner())))?;
        }
        Ok(())
    }
}

fn complete(
    backend: &dyn ModelBackend,
    req: &CompletionRequest,
) -> Result<(String, Source), EngineError> {
    let route = req.route.clone().expect("engine requests are routed");
    let res = backend.complete(req).map_err(|source| EngineError::Backend {
        agent: route.agent_id.clone(),
        phase: route.phase,
        source,
    })?;
    let text = res.text.trim().to_string();
    if text.is_empty() {
        return Err(EngineError::EmptyResponse {
            agent: route.agent_id,
            phase: route.phase,
        });
    }
    Ok((text, res.source))
}

/// Failure of a batch run. `partial` holds whatever was produced before an
/// abort; it is `None` when the inputs were rejected up front.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: EngineError,
    pub partial: Option<Box<Transcript>>,
}

/// Batch run: validates, runs every event, and writes outputs to `out` if given.
pub fn run_scenario(
    scenario: &Scenario,
    roster: &Roster,
    backend: Arc<dyn ModelBackend>,
    templates: &PromptTemplates,
    config: &RunConfig,
    out: Option<&Path>,
) -> Result<Transcript, RunFailure> {
    let mut config = config.clone();
    config.mode = RunMode::Batch;
    let mut sim = Simulation::new(
        scenario.clone(),
        roster.clone(),
        backend,
        templates.clone(),
        config,
    )
    .map_err(|error| RunFailure {
        error,
        partial: None,
    })?;
    let result = sim.run_to_completion();
    if let Some(dir) = out {
        sim.write_outputs(dir).map_err(|error| RunFailure {
            error,
            partial: Some(Box::new(sim.transcript())),
        })?;
    }
    match result {
        Ok(()) => Ok(sim.transcript()),
        Err(error) => Err(RunFailure {
            error,
            partial: Some(Box::new(sim.transcript())),
        }),
    }
}
