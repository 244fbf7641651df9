#![allow(dead_code)]

pub mod mock;

use std::path::PathBuf;
use std::sync::Arc;

use delib_core::backend::{Script, ScriptedBackend};
use delib_core::profiles::{load_roster, AgentId, AgentProfile, Party, Roster};
use delib_core::prompting::Phase;
use delib_core::scenario::{ReflectAgents, ScheduledPerturbation};
use delib_core::Scenario;
use rand::Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub fn roster() -> Roster {
    load_roster(fixture("roster_intel_committee.json")).unwrap()
}

pub fn ukraine() -> Scenario {
    Scenario::load(fixture("ukraine_funding.json")).unwrap()
}

pub fn ukraine_script() -> Script {
    Script::load(fixture("ukraine_script.json")).unwrap()
}

pub fn scripted(script: Script) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(script))
}

pub fn id(s: &str) -> AgentId {
    AgentId::new(s)
}

pub fn profile(i: usize) -> AgentProfile {
    let party = [Party::D, Party::R, Party::I][i % 3];
    AgentProfile {
        agent_id: AgentId::new(format!("agent_{i}")),
        name: format!("Agent Number{i}"),
        party,
        state: "CA".into(),
        years_of_service: i as i64,
        traits: vec!["steady".into()],
        policies: format!("My policies are number {i}."),
    }
}

pub fn synthetic_roster(n: usize) -> Roster {
    Roster::new((0..n).map(profile).collect()).unwrap()
}

/// Enough canned text for every call a scenario can make, with a sprinkling
/// of passes and addressed turns.
pub fn synthetic_script(roster: &Roster, sc: &Scenario, extra_reflections: usize) -> Script {
    let mut s = Script::default();
    let n = roster.len();
    let reflectors = sc.reflecting_agents(roster);
    for (i, m) in roster.members().iter().enumerate() {
        let a = &m.agent_id;
        s.push(a, Phase::Opening, format!("{} opens.", m.name));
        for c in 1..=sc.cycles {
            let text = match (i + c as usize) % 3 {
                0 => "PASS".to_string(),
                1 => {
                    let other = &roster.members()[(i + 1) % n];
                    format!("@{}: reply in cycle {c}", other.name)
                }
                _ => format!("{} speaks in cycle {c}.", m.name),
            };
            s.push(a, Phase::Turn, text);
            s.push(a, Phase::Interpretation, format!("{} reads cycle {c}.", m.name));
        }
        let q = if reflectors.contains(a) {
            sc.reflection_questions.len()
        } else {
            0
        };
        for k in 0..q + extra_reflections {
            s.push(a, Phase::Reflection, format!("{} reflects {k}.", m.name));
        }
    }
    s
}

pub fn random_scenario(rng: &mut impl Rng, roster: &Roster) -> Scenario {
    let cycles = rng.random_range(1..=5u32);
    let mut sc = Scenario::new(format!("random_{}", rng.random::<u32>()), "Random topic.");
    sc.cycles = cycles;
    let np = rng.random_range(0..=3usize);
    sc.perturbations = (0..np)
        .map(|k| ScheduledPerturbation {
            after_cycle: rng.random_range(0..=cycles),
            content: format!("Perturbation {k}"),
        })
        .collect();
    sc.perturbations.sort_by_key(|p| p.after_cycle);
    sc.reflection_questions.truncate(rng.random_range(1..=3usize));
    sc.reflect_agents = if rng.random_bool(0.3) {
        ReflectAgents::All
    } else {
        let ids: Vec<AgentId> = roster
            .members()
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .map(|m| m.agent_id.clone())
            .collect();
        ReflectAgents::Listed(ids)
    };
    sc.context_window_k = rng.random_range(1..=20usize);
    sc
}
