use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use delib_core::backend::{CacheStore, OpenAiBackend, OpenAiConfig, ReplayBackend};
use delib_core::engine::{load_transcript, run_scenario, RunConfig};
use delib_core::eval::{ingest_scores, table_report};
use delib_core::memory::load_stream;
use delib_core::profiles::{generate_profile, load_roster, save_roster, ProfileSeed};
use delib_core::prompting::DecodingParams;
use delib_core::{
    check_transcript, GrammarSpec, ModelBackend, PromptTemplates, Real, Roster, Scenario, Script,
    ScriptedBackend, Tail,
};
use log::info;

use crate::error::CliError;
use crate::options::{BackendArgs, BackendKind, Cli, Command, InputArgs};
use crate::server::{self, ServerConfig};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            input,
            backend,
            out,
        } => run(&input, &backend, &out),
        Command::Serve {
            input,
            backend,
            out,
            port,
            host,
            scores,
            auto_interval_ms,
        } => {
            let (scenario, roster) = load_inputs(&input)?;
            let spec = BackendSpec::from_args(&backend)?;
            spec.build()?;
            let scores = scores.unwrap_or_else(|| out.join("scores.csv"));
            server::serve(ServerConfig {
                scenario,
                roster,
                templates: load_templates(backend.templates.as_deref())?,
                backend: spec,
                model: backend.model.clone(),
                seed: backend.seed,
                out,
                scores,
                auto_interval: Duration::from_millis(auto_interval_ms),
                addr: format!("{host}:{port}"),
            })
        }
        Command::Replay {
            input,
            cache,
            model,
            seed,
            templates,
            out,
        } => {
            let args = BackendArgs {
                backend: BackendKind::Replay,
                script: None,
                base_url: String::new(),
                model,
                cache: Some(cache),
                record: false,
                seed,
                templates,
            };
            run(&input, &args, &out)
        }
        Command::GenProfiles {
            seeds,
            backend,
            out,
        } => gen_profiles(&seeds, &backend, &out),
        Command::Eval {
            scores,
            one_tailed,
            json,
            out,
        } => eval(&scores, one_tailed, json, out.as_deref()),
        Command::Validate {
            scenario,
            roster,
            script,
            scores,
            memory,
            transcript,
            templates,
        } => validate(ValidateArgs {
            scenario,
            roster,
            script,
            scores,
            memory,
            transcript,
            templates,
        }),
    }
}

/// Everything needed to build a fresh backend for each run.
#[derive(Debug, Clone)]
pub struct BackendSpec {
    kind: BackendKind,
    script: Option<Script>,
    base_url: String,
    cache: Option<PathBuf>,
    record: bool,
}

impl BackendSpec {
    pub fn from_args(a: &BackendArgs) -> Result<Self, CliError> {
        match a.backend {
            BackendKind::Scripted if a.script.is_none() => {
                return Err(CliError::usage("--backend scripted requires --script"))
            }
            BackendKind::Openai | BackendKind::Replay if a.script.is_some() => {
                return Err(CliError::usage("--script is only valid with --backend scripted"))
            }
            BackendKind::Replay if a.cache.is_none() => {
                return Err(CliError::usage("--backend replay requires --cache"))
            }
            BackendKind::Replay if a.record => {
                return Err(CliError::usage("--record cannot be combined with --backend replay"))
            }
            _ => {}
        }
        if a.record && a.cache.is_none() {
            return Err(CliError::usage("--record requires --cache"));
        }
        let script = match &a.script {
            Some(p) => Some(Script::load(p)?),
            None => None,
        };
        Ok(BackendSpec {
            kind: a.backend,
            script,
            base_url: a.base_url.clone(),
            cache: a.cache.clone(),
            record: a.record,
        })
    }

    pub fn build(&self) -> Result<Arc<dyn ModelBackend>, CliError> {
        let inner: Option<Box<dyn ModelBackend>> = match self.kind {
            BackendKind::Scripted => Some(Box::new(ScriptedBackend::new(
                self.script.clone().expect("checked in from_args"),
            ))),
            BackendKind::Openai => Some(Box::new(OpenAiBackend::new(
                OpenAiConfig::new(self.base_url.clone()).with_env_key(),
            )?)),
            BackendKind::Replay => None,
        };
        let backend: Arc<dyn ModelBackend> = match (&self.cache, inner) {
            (Some(dir), None) => Arc::new(ReplayBackend::replay_only(CacheStore::open(dir)?)),
            (Some(dir), Some(inner)) if self.record => {
                Arc::new(ReplayBackend::recording(CacheStore::open(dir)?, inner))
            }
            (Some(dir), Some(inner)) => {
                Arc::new(ReplayBackend::read_through(CacheStore::open(dir)?, inner))
            }
            (None, Some(inner)) => Arc::from(inner),
            (None, None) => unreachable!("replay requires a cache"),
        };
        Ok(backend)
    }
}

fn load_inputs(input: &InputArgs) -> Result<(Scenario, Roster), CliError> {
    let scenario = Scenario::load(&input.scenario)?;
    let roster = load_roster(&input.roster)?;
    scenario.validate_against(&roster)?;
    Ok((scenario, roster))
}

fn load_templates(dir: Option<&Path>) -> Result<PromptTemplates, CliError> {
    Ok(match dir {
        Some(d) => PromptTemplates::from_dir(d)?,
        None => PromptTemplates::builtin(),
    })
}

fn run(input: &InputArgs, args: &BackendArgs, out: &Path) -> Result<(), CliError> {
    let spec = BackendSpec::from_args(args)?;
    let (scenario, roster) = load_inputs(input)?;
    let templates = load_templates(args.templates.as_deref())?;
    let backend = spec.build()?;
    let config = RunConfig::batch(args.seed).with_model(args.model.clone());
    let t = run_scenario(&scenario, &roster, backend, &templates, &config, Some(out))?;
    info!("run {} finished with {} events", t.run_id(), t.events.len());
    println!(
        "run {} complete: {} events written to {}",
        t.run_id(),
        t.events.len(),
        out.display()
    );
    Ok(())
}

fn gen_profiles(seeds: &Path, args: &BackendArgs, out: &Path) -> Result<(), CliError> {
    let spec = BackendSpec::from_args(args)?;
    let text = fs::read_to_string(seeds).map_err(|e| CliError::io(format!("{}: {e}", seeds.display())))?;
    let seeds: Vec<ProfileSeed> =
        serde_json::from_str(&text).map_err(|e| CliError::new("parse", format!("seeds: {e}")))?;
    let backend = spec.build()?;
    let templates = load_templates(args.templates.as_deref())?;
    let params = DecodingParams {
        temperature: 0.0,
        seed: args.seed,
        max_tokens: 512,
    };
    let profiles = seeds
        .iter()
        .map(|s| generate_profile(s, backend.as_ref(), &templates, &args.model, params))
        .collect::<Result<Vec<_>, _>>()?;
    let roster = Roster::new(profiles)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let path = out.join("roster.json");
    save_roster(&roster, &path)?;
    println!("wrote {} profiles to {}", roster.len(), path.display());
    Ok(())
}

fn eval(scores: &Path, one_tailed: bool, json: bool, out: Option<&Path>) -> Result<(), CliError> {
    let datasets = ingest_scores::<Real>(scores)?;
    let tail = if one_tailed { Tail::OneGreater } else { Tail::Two };
    let report = table_report(&datasets, tail)?;
    let (text, json_text) = (report.to_text(), report.to_json());
    if json {
        println!("{json_text}");
    } else {
        print!("{text}");
    }
    if let Some(dir) = out {
        let io = |e: std::io::Error| CliError::io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.txt"), &text).map_err(io)?;
        fs::write(dir.join("report.json"), json_text + "\n").map_err(io)?;
    }
    Ok(())
}

struct ValidateArgs {
    scenario: Option<PathBuf>,
    roster: Option<PathBuf>,
    script: Option<PathBuf>,
    scores: Option<PathBuf>,
    memory: Option<PathBuf>,
    transcript: Option<PathBuf>,
    templates: Option<PathBuf>,
}

fn validate(a: ValidateArgs) -> Result<(), CliError> {
    let mut checked = Vec::new();
    let scenario = match &a.scenario {
        Some(p) => {
            checked.push(format!("scenario {}", p.display()));
            Some(Scenario::load(p)?)
        }
        None => None,
    };
    let roster = match &a.roster {
        Some(p) => {
            checked.push(format!("roster {}", p.display()));
            Some(load_roster(p)?)
        }
        None => None,
    };
    if let (Some(sc), Some(r)) = (&scenario, &roster) {
        sc.validate_against(r)?;
    }
    if let Some(p) = &a.script {
        let script = Script::load(p)?;
        if let (Some(sc), Some(r)) = (&scenario, &roster) {
            check_script_coverage(&script, sc, r)?;
        }
        checked.push(format!("script {}", p.display()));
    }
    if let Some(p) = &a.scores {
        ingest_scores::<Real>(p)?;
        checked.push(format!("scores {}", p.display()));
    }
    if let Some(p) = &a.memory {
        load_stream(p)?;
        checked.push(format!("memory {}", p.display()));
    }
    if let Some(p) = &a.transcript {
        let (header, events) = load_transcript(p)?;
        let spec = match &scenario {
            Some(sc) => {
                let r = Roster::new(header.roster.clone())?;
                let spec = GrammarSpec::new(sc, &r).permissive();
                if header.complete {
                    spec
                } else {
                    spec.allow_incomplete()
                }
            }
            None => {
                return Err(CliError::usage("--transcript needs --scenario to check its grammar"))
            }
        };
        check_transcript(&events, &spec)
            .map_err(|v| CliError::new("grammar", v.to_string()))?;
        checked.push(format!("transcript {}", p.display()));
    }
    if let Some(d) = &a.templates {
        PromptTemplates::from_dir(d)?;
        checked.push(format!("templates {}", d.display()));
    }
    if checked.is_empty() {
        return Err(CliError::usage("validate needs at least one file flag"));
    }
    for c in checked {
        println!("ok {c}");
    }
    Ok(())
}

/// A script must hold enough completions for a full run of the scenario.
fn check_script_coverage(script: &Script, sc: &Scenario, r: &Roster) -> Result<(), CliError> {
    use delib_core::prompting::Phase;
    let reflectors = sc.reflecting_agents(r);
    let mut missing = Vec::new();
    for m in r.members() {
        let count = |p: Phase| {
            script
                .agents
                .get(&m.agent_id)
                .and_then(|phases| phases.get(&p))
                .map_or(0, Vec::len)
        };
        let need_reflections = if reflectors.contains(&m.agent_id) {
            sc.reflection_questions.len()
        } else {
            0
        };
        for (phase, need) in [
            (Phase::Opening, 1),
            (Phase::Turn, sc.cycles as usize),
            (Phase::Interpretation, sc.cycles as usize),
            (Phase::Reflection, need_reflections),
        ] {
            let have = count(phase);
            if have < need {
                missing.push(format!("{} {phase}: {have} of {need}", m.agent_id));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "validation",
            format!("script too short: {}", missing.join("; ")),
        ))
    }
}
