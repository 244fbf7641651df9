//! Stepped-mode driver: one engine thread owns the [`Simulation`] and
//! serializes every operator command through a single queue, so at most one
//! backend call is in flight per run.

use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::error;
use serde::Serialize;

use super::{EngineError, EventHub, Simulation, Subscription, Transcript, TranscriptEvent};
use crate::memory::MemoryStream;
use crate::profiles::AgentId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunState {
    pub run_id: String,
    pub scenario_id: String,
    pub status: String,
    pub next_event: String,
    pub boundary: Option<u32>,
    pub can_step: bool,
    pub can_perturb: bool,
    pub can_ask: bool,
    pub auto: bool,
    pub event_count: usize,
    pub error: Option<String>,
    pub agents: Vec<AgentId>,
}

type Reply<T> = Sender<Result<T, EngineError>>;

enum Command {
    Step(Reply<Vec<TranscriptEvent>>),
    Perturb(String, Reply<Vec<TranscriptEvent>>),
    Ask(AgentId, String, Reply<Vec<TranscriptEvent>>),
    SetAuto(bool, Reply<RunState>),
    State(Reply<RunState>),
    Memory(AgentId, Reply<MemoryStream>),
    Transcript(Reply<Transcript>),
    Shutdown,
}

pub struct Controller {
    tx: Sender<Command>,
    hub: EventHub,
    join: Option<JoinHandle<()>>,
}

fn state_of(sim: &Simulation, auto: bool) -> RunState {
    let status = if sim.failure().is_some() {
        "aborted"
    } else if sim.is_finished() {
        "finished"
    } else {
        "running"
    };
    RunState {
        run_id: sim.run_id().to_string(),
        scenario_id: sim.scenario().scenario_id.clone(),
        status: status.to_string(),
        next_event: sim.next_event(),
        boundary: sim.boundary(),
        can_step: !sim.is_finished(),
        can_perturb: sim.can_perturb(),
        can_ask: sim.can_ask(),
        auto,
        event_count: sim.events().len(),
        error: sim.failure().map(str::to_string),
        agents: sim
            .roster()
            .members()
            .iter()
            .map(|m| m.agent_id.clone())
            .collect(),
    }
}

impl Controller {
    /// Takes ownership of a stepped-mode simulation. Outputs are written to
    /// `out` whenever the run is finished after a command.
    pub fn spawn(mut sim: Simulation, out: Option<PathBuf>, auto_interval: Duration) -> Self {
        let hub = sim.hub().clone();
        let (tx, rx) = mpsc::channel::<Command>();
        let join = thread::spawn(move || {
            let mut auto = false;
            let persist = |sim: &Simulation| {
                if let (Some(dir), true) = (&out, sim.is_finished()) {
                    if let Err(e) = sim.write_outputs(dir) {
                        error!("writing run outputs failed: {e}");
                    }
                }
            };
            loop {
                let cmd = if auto && !sim.is_finished() {
                    match rx.recv_timeout(auto_interval) {
                        Ok(c) => c,
                        Err(RecvTimeoutError::Timeout) => {
                            if let Err(e) = sim.step() {
                                error!("auto-step failed: {e}");
                                auto = false;
                            }
                            persist(&sim);
                            continue;
                        }
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                } else {
                    match rx.recv() {
                        Ok(c) => c,
                        Err(_) => break,
                    }
                };
                match cmd {
                    Command::Step(reply) => {
                        let _ = reply.send(sim.step());
                    }
                    Command::Perturb(content, reply) => {
                        let _ = reply.send(sim.inject_perturbation(&content).map(|e| vec![e]));
                    }
                    Command::Ask(agent, q, reply) => {
                        let _ = reply.send(sim.ask_reflection(&agent, &q).map(|e| vec![e]));
                    }
                    Command::SetAuto(on, reply) => {
                        auto = on;
                        let _ = reply.send(Ok(state_of(&sim, auto)));
                    }
                    Command::State(reply) => {
                        let _ = reply.send(Ok(state_of(&sim, auto)));
                    }
                    Command::Memory(agent, reply) => {
                        let r = sim
                            .stream(&agent)
                            .cloned()
                            .ok_or(EngineError::UnknownAgent(agent));
                        let _ = reply.send(r);
                    }
                    Command::Transcript(reply) => {
                        let _ = reply.send(Ok(sim.transcript()));
                    }
                    Command::Shutdown => break,
                }
                persist(&sim);
            }
        });
        Controller {
            tx,
            hub,
            join: Some(join),
        }
    }

    fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, EngineError> {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(make(tx))
            .map_err(|_| EngineError::Io("engine thread has stopped".into()))?;
        rx.recv()
            .map_err(|_| EngineError::Io("engine thread has stopped".into()))?
    }

    pub fn step(&self) -> Result<Vec<TranscriptEvent>, EngineError> {
        self.call(Command::Step)
    }

    pub fn perturb(&self, content: &str) -> Result<Vec<TranscriptEvent>, EngineError> {
        self.call(|r| Command::Perturb(content.to_string(), r))
    }

    pub fn ask(&self, agent: &AgentId, question: &str) -> Result<Vec<TranscriptEvent>, EngineError> {
        self.call(|r| Command::Ask(agent.clone(), question.to_string(), r))
    }

    pub fn set_auto(&self, on: bool) -> Result<RunState, EngineError> {
        self.call(|r| Command::SetAuto(on, r))
    }

    pub fn state(&self) -> Result<RunState, EngineError> {
        self.call(Command::State)
    }

    pub fn memory(&self, agent: &AgentId) -> Result<MemoryStream, EngineError> {
        self.call(|r| Command::Memory(agent.clone(), r))
    }

    pub fn transcript(&self) -> Result<Transcript, EngineError> {
        self.call(Command::Transcript)
    }

    pub fn subscribe(&self) -> Subscription {
        self.hub.subscribe()
    }

    pub fn events(&self) -> Vec<TranscriptEvent> {
        self.hub.snapshot()
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}
