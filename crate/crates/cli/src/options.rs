use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "delib", version, about = "Committee deliberation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario to completion in batch mode.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Output directory for the transcript, memory dumps and run metadata.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Serve the control API for stepped runs.
    Serve {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Directory that receives one sub-directory per finished run.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Scores file appended to by the scores endpoint (default: <out>/scores.csv).
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
        /// Delay between auto-steps.
        #[arg(long, value_name = "MS", default_value_t = 500)]
        auto_interval_ms: u64,
    },
    /// Re-run a scenario purely from a recorded completion cache.
    Replay {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_name = "DIR")]
        cache: PathBuf,
        #[arg(long, default_value = delib_core::engine::DEFAULT_MODEL)]
        model: String,
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        seed: i64,
        #[arg(long, value_name = "DIR")]
        templates: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate agent profiles from seed records and write a roster.
    GenProfiles {
        /// JSON list of {name, party, state, agent_id?, years_of_service?}.
        #[arg(long, value_name = "PATH")]
        seeds: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Output directory; the roster is written to <out>/roster.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Believability report from a scores CSV.
    Eval {
        #[arg(long, value_name = "PATH")]
        scores: PathBuf,
        /// Test H1: correlation > 0 instead of the two-tailed default.
        #[arg(long)]
        one_tailed: bool,
        /// Print the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
        /// Also write report.txt and report.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Check input files without running anything.
    Validate {
        #[arg(long, value_name = "PATH")]
        scenario: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        roster: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        script: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        memory: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        transcript: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        templates: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub roster: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Openai,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Openai)]
    pub backend: BackendKind,
    /// Canned completions for the scripted backend.
    #[arg(long, value_name = "PATH")]
    pub script: Option<PathBuf>,
    /// OpenAI-compatible endpoint; the key is read from OPENAI_API_KEY.
    #[arg(long, value_name = "URL", default_value = "https://api.openai.com/v1")]
    pub base_url: String,
    #[arg(long, default_value = delib_core::engine::DEFAULT_MODEL)]
    pub model: String,
    /// Completion cache consulted before the backend.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Write completions that miss the cache into it.
    #[arg(long)]
    pub record: bool,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub seed: i64,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,
}
