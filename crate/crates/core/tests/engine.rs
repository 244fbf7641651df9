mod common;

use std::sync::Arc;
use std::thread;

use common::*;
use delib_core::backend::{CacheStore, ModelBackend, ReplayBackend};
use delib_core::engine::{load_transcript, read_jsonl, run_scenario, EventKind, RunConfig, Simulation};
use delib_core::memory::{load_stream, MemoryKind};
use delib_core::prompting::Phase;
use delib_core::scenario::ReflectAgents;
use delib_core::{
    check_memory_consistency, check_transcript, EngineError, GrammarSpec, PromptTemplates,
    Scenario,
};

fn ukraine_sim(mode: RunConfig) -> Simulation {
    Simulation::new(
        ukraine(),
        roster(),
        scripted(ukraine_script()),
        PromptTemplates::builtin(),
        mode,
    )
    .unwrap()
}

fn kinds(events: &[delib_core::TranscriptEvent]) -> Vec<EventKind> {
    events.iter().map(|e| e.kind).collect()
}

#[test]
fn ukraine_fixture_has_32_events_in_grammar_order() {
    let t = run_scenario(
        &ukraine(),
        &roster(),
        scripted(ukraine_script()),
        &PromptTemplates::builtin(),
        &RunConfig::batch(7),
        None,
    )
    .unwrap();
    assert_eq!(t.events.len(), 32);
    let k = kinds(&t.events);
    assert_eq!(k[0], EventKind::ScenarioPrompt);
    assert!(k[1..7].iter().all(|&x| x == EventKind::OpeningStatement));
    assert!(k[7..19].iter().all(|&x| x == EventKind::Turn));
    assert_eq!(k[19], EventKind::Perturbation);
    assert!(k[20..26].iter().all(|&x| x == EventKind::Turn));
    assert!(k[26..32].iter().all(|&x| x == EventKind::ReflectionAnswer));
    assert_eq!(t.events[19].content, "New intelligence indicates Russia is about to overrun Ukraine");
    let order: Vec<_> = t.events[26..]
        .iter()
        .map(|e| e.agent.as_ref().unwrap().as_str().to_string())
        .collect();
    assert_eq!(
        order,
        ["marco_rubio", "marco_rubio", "marco_rubio", "ron_wyden", "ron_wyden", "ron_wyden"]
    );
    check_transcript(&t.events, &GrammarSpec::new(&ukraine(), &roster())).unwrap();
    assert!(t.is_complete());
}

#[test]
fn ukraine_streams_hold_29_debate_entries() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    sim.run_to_completion().unwrap();
    for s in sim.streams() {
        let debate = s
            .full_history()
            .iter()
            .filter(|e| e.kind != MemoryKind::Reflection)
            .count();
        assert_eq!(debate, 29, "{}", s.owner());
        let reflections = s.len() - debate;
        let expect = if ["marco_rubio", "ron_wyden"].contains(&s.owner().as_str()) { 3 } else { 0 };
        assert_eq!(reflections, expect);
    }
    check_memory_consistency(sim.events(), sim.streams()).unwrap();
}

#[test]
fn smallest_case_has_six_events() {
    let roster = synthetic_roster(2);
    let mut sc = Scenario::new("tiny", "A tiny topic.");
    sc.cycles = 1;
    sc.reflection_questions.truncate(1);
    sc.reflect_agents = ReflectAgents::Listed(vec![id("agent_0")]);
    let script = synthetic_script(&roster, &sc, 0);
    let t = run_scenario(
        &sc,
        &roster,
        scripted(script),
        &PromptTemplates::builtin(),
        &RunConfig::batch(1),
        None,
    )
    .unwrap();
    assert_eq!(t.events.len(), 6);
}

#[test]
fn first_step_emits_only_the_scenario_prompt() {
    let mut sim = ukraine_sim(RunConfig::stepped(7));
    let ev = sim.step().unwrap();
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].kind, EventKind::ScenarioPrompt);
    assert_eq!(ev[0].index, 0);
}

#[test]
fn stepping_to_the_end_matches_batch_and_then_reports_finished() {
    let mut batch = ukraine_sim(RunConfig::batch(7));
    batch.run_to_completion().unwrap();
    let mut stepped = ukraine_sim(RunConfig::stepped(7));
    let mut collected = Vec::new();
    loop {
        match stepped.step() {
            Ok(ev) => collected.extend(ev),
            Err(EngineError::Finished) => break,
            Err(e) => panic!("{e}"),
        }
    }
    assert_eq!(collected, batch.events());
    assert_eq!(stepped.transcript().to_jsonl(), batch.transcript().to_jsonl());
}

#[test]
fn perturbation_mid_cycle_is_a_phase_error() {
    let mut sim = ukraine_sim(RunConfig::stepped(7));
    for _ in 0..10 {
        sim.step().unwrap();
    }
    assert!(matches!(
        sim.inject_perturbation("Something happens"),
        Err(EngineError::Phase(_))
    ));
    assert!(matches!(
        sim.ask_reflection(&id("ron_wyden"), "Anything?"),
        Err(EngineError::Phase(_))
    ));
}

#[test]
fn operator_perturbation_at_boundary_is_recorded_everywhere() {
    let mut sim = ukraine_sim(RunConfig::stepped(7));
    // prompt + 6 openings + 6 turns reaches the boundary after cycle 1
    for _ in 0..13 {
        sim.step().unwrap();
    }
    assert_eq!(sim.boundary(), Some(1));
    let e = sim.inject_perturbation("A ceasefire proposal arrives").unwrap();
    assert_eq!(e.kind, EventKind::Perturbation);
    for s in sim.streams() {
        let last = s.full_history().last().unwrap();
        assert_eq!(last.kind, MemoryKind::Perturbation);
        assert_eq!(last.content, "A ceasefire proposal arrives");
    }
    let meta = sim.metadata();
    assert_eq!(meta.perturbations.len(), 1);
}

#[test]
fn batch_mode_rejects_operator_perturbation() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    assert!(matches!(sim.inject_perturbation("x"), Err(EngineError::Phase(_))));
    assert!(matches!(sim.inject_perturbation("  "), Err(EngineError::Validation(_))));
}

#[test]
fn perturbation_after_finish_is_finished_error() {
    let mut sim = ukraine_sim(RunConfig::stepped(7));
    while !sim.is_finished() {
        sim.step().unwrap();
    }
    assert!(matches!(sim.inject_perturbation("late"), Err(EngineError::Finished)));
    assert!(matches!(sim.step(), Err(EngineError::Finished)));
}

#[test]
fn reflection_for_unknown_agent() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    sim.run_to_completion().unwrap();
    assert!(matches!(
        sim.ask_reflection(&id("tom_cotton"), "What did you do during committee?"),
        Err(EngineError::UnknownAgent(_))
    ));
}

#[test]
fn schedule_past_last_cycle_fails_before_any_call() {
    let sc = Scenario::load(fixture("malformed/scenario_schedule_past_end.json"));
    // Scenario::load validates, so the error surfaces at load time.
    assert!(matches!(sc, Err(EngineError::Validation(_))));
    let mut sc = ukraine();
    sc.perturbations[0].after_cycle = 4;
    let backend = scripted(ukraine_script());
    let before = backend.remaining();
    let err = run_scenario(
        &sc,
        &roster(),
        backend.clone(),
        &PromptTemplates::builtin(),
        &RunConfig::batch(7),
        None,
    )
    .unwrap_err();
    assert!(matches!(err.error, EngineError::Validation(_)));
    assert!(err.partial.is_none());
    assert_eq!(backend.remaining(), before);
}

#[test]
fn exhausted_script_aborts_with_partial_transcript() {
    let script = delib_core::Script::load(fixture("malformed/script_exhausted.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_scenario(
        &ukraine(),
        &roster(),
        scripted(script),
        &PromptTemplates::builtin(),
        &RunConfig::batch(7),
        Some(dir.path()),
    )
    .unwrap_err();
    match &err.error {
        EngineError::Backend { agent, phase, source } => {
            assert_eq!(agent.as_str(), "john_cornyn");
            assert_eq!(*phase, Phase::Turn);
            assert!(source.to_string().contains("script exhausted"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let partial = err.partial.unwrap();
    assert!(!partial.is_complete());
    assert!(!partial.events.is_empty());
    check_transcript(
        &partial.events,
        &GrammarSpec::new(&ukraine(), &roster()).allow_incomplete(),
    )
    .unwrap();
    let (header, events) = load_transcript(dir.path().join("transcript.jsonl")).unwrap();
    assert!(!header.complete);
    assert_eq!(events, partial.events);
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let t = run_scenario(
        &ukraine(),
        &roster(),
        scripted(ukraine_script()),
        &PromptTemplates::builtin(),
        &RunConfig::batch(7),
        Some(dir.path()),
    )
    .unwrap();
    let text = std::fs::read_to_string(dir.path().join("transcript.jsonl")).unwrap();
    assert_eq!(text, t.to_jsonl());
    let (_, events) = read_jsonl(&text).unwrap();
    assert_eq!(events, t.events);
    assert!(dir.path().join("transcript.txt").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["event_count"], 32);
    assert_eq!(meta["backend_sources"]["scripted"], 18 + 18 + 6 + 6);
    for m in roster().members() {
        let s = load_stream(dir.path().join(format!("memory/{}.json", m.agent_id))).unwrap();
        assert_eq!(s.owner(), &m.agent_id);
    }
}

#[test]
fn subscribers_see_every_event_in_order() {
    let mut sim = ukraine_sim(RunConfig::stepped(7));
    let early = sim.subscribe();
    let reader = thread::spawn(move || early.collect::<Vec<_>>());
    for _ in 0..5 {
        sim.step().unwrap();
    }
    let late = sim.subscribe();
    let late_reader = thread::spawn(move || late.collect::<Vec<_>>());
    while !sim.is_finished() {
        sim.step().unwrap();
    }
    let all = sim.events().to_vec();
    drop(sim);
    assert_eq!(reader.join().unwrap(), all);
    assert_eq!(late_reader.join().unwrap(), all);
    assert_eq!(all.len(), 32);
}

#[test]
fn replay_of_recorded_run_is_byte_identical_across_modes() {
    let dir = tempfile::tempdir().unwrap();
    let record: Arc<dyn ModelBackend> = Arc::new(ReplayBackend::recording(
        CacheStore::open(dir.path()).unwrap(),
        Box::new(delib_core::ScriptedBackend::new(ukraine_script())),
    ));
    let first = run_scenario(
        &ukraine(),
        &roster(),
        record,
        &PromptTemplates::builtin(),
        &RunConfig::batch(3),
        None,
    )
    .unwrap();
    let replay = || -> Arc<dyn ModelBackend> {
        Arc::new(ReplayBackend::replay_only(CacheStore::open(dir.path()).unwrap()))
    };
    let batch = run_scenario(
        &ukraine(),
        &roster(),
        replay(),
        &PromptTemplates::builtin(),
        &RunConfig::batch(3),
        None,
    )
    .unwrap();
    let mut stepped = Simulation::new(
        ukraine(),
        roster(),
        replay(),
        PromptTemplates::builtin(),
        RunConfig::stepped(3),
    )
    .unwrap();
    while !stepped.is_finished() {
        stepped.step().unwrap();
    }
    assert_eq!(first.to_jsonl(), batch.to_jsonl());
    assert_eq!(batch.to_jsonl(), stepped.transcript().to_jsonl());
    assert_eq!(batch.metadata.backend_sources.get("cache"), Some(&48));
}

#[test]
fn different_seed_misses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let record: Arc<dyn ModelBackend> = Arc::new(ReplayBackend::recording(
        CacheStore::open(dir.path()).unwrap(),
        Box::new(delib_core::ScriptedBackend::new(ukraine_script())),
    ));
    run_scenario(&ukraine(), &roster(), record, &PromptTemplates::builtin(), &RunConfig::batch(3), None)
        .unwrap();
    let replay: Arc<dyn ModelBackend> =
        Arc::new(ReplayBackend::replay_only(CacheStore::open(dir.path()).unwrap()));
    let err = run_scenario(&ukraine(), &roster(), replay, &PromptTemplates::builtin(), &RunConfig::batch(4), None)
        .unwrap_err();
    match err.error {
        EngineError::Backend { source, .. } => {
            assert_eq!(source.kind, delib_core::BackendErrorKind::CacheMiss)
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn pass_turns_are_recorded_and_interpreted() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    sim.run_to_completion().unwrap();
    let passes: Vec<_> = sim
        .events()
        .iter()
        .filter(|e| e.action.as_ref().is_some_and(|a| a.is_pass()))
        .collect();
    assert_eq!(passes.len(), 3);
    for p in passes {
        let s = sim.stream(p.agent.as_ref().unwrap()).unwrap();
        assert!(s
            .full_history()
            .iter()
            .any(|e| e.kind == MemoryKind::Interpretation && e.timestep == p.timestep + 1));
    }
}

#[test]
fn addressed_turns_resolve_to_roster_ids() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    sim.run_to_completion().unwrap();
    let first_turn = sim.events().iter().find(|e| e.kind == EventKind::Turn).unwrap();
    let action = first_turn.action.as_ref().unwrap();
    assert_eq!(action.addressed_to.as_ref().unwrap().as_str(), "ron_wyden");
    assert!(action.content.starts_with("I share your concern"));
}

#[test]
fn grammar_checker_rejects_tampered_transcripts() {
    let mut sim = ukraine_sim(RunConfig::batch(7));
    sim.run_to_completion().unwrap();
    let spec = GrammarSpec::new(&ukraine(), &roster());
    let good = sim.events().to_vec();
    check_transcript(&good, &spec).unwrap();

    let mut dropped = good.clone();
    dropped.remove(10);
    for (i, e) in dropped.iter_mut().enumerate() {
        e.index = i as u64;
    }
    assert!(check_transcript(&dropped, &spec).is_err());

    let mut swapped = good.clone();
    let (a, b) = (swapped[8].agent.clone(), swapped[9].agent.clone());
    swapped[8].agent = b;
    swapped[9].agent = a;
    assert!(check_transcript(&swapped, &spec).is_err());

    let mut moved = good.clone();
    moved.swap(19, 13);
    for (i, e) in moved.iter_mut().enumerate() {
        e.index = i as u64;
    }
    assert!(check_transcript(&moved, &spec).is_err());

    let mut streams = sim.streams().to_vec();
    let mut s0 = delib_core::MemoryStream::new(streams[0].owner().clone());
    for e in streams[0].full_history().iter().skip(1) {
        s0.append(e.clone()).unwrap();
    }
    streams[0] = s0;
    assert!(check_memory_consistency(&good, &streams).is_err());
}
