//! `r2p`: enroll personal concepts, query them, evaluate the pipeline and
//! build reference/query splits. Results go to stdout as JSON; logs and
//! errors go to stderr.
//!
//! Exit codes: 0 success, 1 runtime error, 2 domain error (e.g. an unknown
//! target concept), 64 usage error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use r2p_core::gateway::BackendKind;
use r2p_core::inference::{Preset, RecognitionMode, Verification};
use r2p_core::retrieval::RetrievalMode;

use crate::config::{FileConfig, Settings};
use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "r2p", version, about = "Personal concept recognition with retrieval and verified reasoning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Backend for both the encoder and the chat model.
    #[arg(long, global = true, env = "R2P_BACKEND", value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Configuration file (defaults to ./r2p.toml when present).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Fix timestamps (and derive ids from names) for reproducible output.
    /// Without a value, 2000-01-01T00:00:00Z is used.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "2000-01-01T00:00:00Z")]
    pub fixed_clock: Option<String>,
    /// Maximum number of queries processed concurrently.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, env = "R2P_VLM_BASE_URL")]
    pub vlm_base_url: Option<String>,
    /// Name of the environment variable holding the chat model API key.
    #[arg(long, global = true, env = "R2P_VLM_API_KEY_ENV")]
    pub vlm_api_key_env: Option<String>,
    #[arg(long, global = true)]
    pub vlm_model: Option<String>,
    #[arg(long, global = true, env = "R2P_EMBED_BASE_URL")]
    pub embed_base_url: Option<String>,
    /// Name of the environment variable holding the encoder API key.
    #[arg(long, global = true)]
    pub embed_api_key_env: Option<String>,
    #[arg(long, global = true)]
    pub embed_model: Option<String>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    /// Mock chat model: JSON array of scripted turns.
    #[arg(long, global = true)]
    pub vlm_script: Option<PathBuf>,
    /// Mock encoder: JSON map of label to vector.
    #[arg(long, global = true)]
    pub encoder_fixtures: Option<PathBuf>,
    /// Mock encoder: seed for generated vectors.
    #[arg(long, global = true)]
    pub mock_seed: Option<u64>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Component preset: full, retrieval_only, cot_only, pairwise_only, no_fingerprints.
    #[arg(long, value_parser = |s: &str| s.parse::<Preset>())]
    pub preset: Option<Preset>,
    /// Number of retrieved candidates.
    #[arg(long)]
    pub k: Option<usize>,
    /// fused, image_only, text_only or two_step:<pool>.
    #[arg(long, value_parser = |s: &str| s.parse::<RetrievalMode>())]
    pub retrieval_mode: Option<RetrievalMode>,
    /// attribute, abstention, logits_based, pairwise_always or none.
    #[arg(long, value_parser = |s: &str| s.parse::<Verification>())]
    pub verification: Option<Verification>,
    /// pipeline_match or direct_pairwise.
    #[arg(long, value_parser = |s: &str| s.parse::<RecognitionMode>())]
    pub recognition_mode: Option<RecognitionMode>,
    #[arg(long)]
    pub no_cot: bool,
    #[arg(long)]
    pub no_pairwise: bool,
    #[arg(long)]
    pub no_fingerprints: bool,
    #[arg(long)]
    pub pairwise_threshold: Option<f64>,
    /// Use the raw yes/no ratio instead of the two-way softmax.
    #[arg(long)]
    pub logit_ratio_literal: bool,
    /// Template for attribute embedding, e.g. "a photo of {attribute}".
    #[arg(long)]
    pub attribute_template: Option<String>,
    #[arg(long)]
    pub logits_margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QueryTask {
    Recognize,
    Caption,
    Vqa,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enroll a concept from its reference image.
    Enroll {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        category: String,
        /// Comma-separated attributes; skips the chat model.
        #[arg(long, requires = "description")]
        attributes: Option<String>,
        /// Description used with --attributes.
        #[arg(long, requires = "attributes")]
        description: Option<String>,
    },
    /// Answer a query about an image.
    Query {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        task: QueryTask,
        /// Concept name to recognize (required for --task recognize).
        #[arg(long, required_if_eq("task", "recognize"))]
        target: Option<String>,
        /// Question for --task vqa.
        #[arg(long, required_if_eq("task", "vqa"))]
        question: Option<String>,
        /// Answer choices for --task vqa, separated by '|'.
        #[arg(long, required_if_eq("task", "vqa"))]
        choices: Option<String>,
        /// Also write the inference trace to this file.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Evaluate the pipeline on a dataset manifest.
    Eval {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// recognition, caption, vqa or all.
        #[arg(long, default_value = "all")]
        task: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        report_out: Option<PathBuf>,
        #[arg(long)]
        traces_out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Pick reference and query images per concept.
    Split {
        /// JSON object mapping concept name to image paths.
        #[arg(long)]
        images_manifest: PathBuf,
        /// Queries kept per concept (default: all remaining images).
        #[arg(long)]
        n_query: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the database manifest and records.
    Inspect {
        #[arg(long)]
        db: Option<PathBuf>,
        /// Print one record in full, embeddings included.
        #[arg(long)]
        name: Option<String>,
    },
}

fn init_logging(level: Option<&str>) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if let Some(level) = level {
        builder.parse_filters(level);
    }
    builder.target(env_logger::Target::Stderr).try_init().ok();
}

fn run(cli: Cli) -> Result<String, CliError> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    init_logging(cli.global.log_level.as_deref().or(file.log_level.as_deref()));
    let settings = Settings::resolve(&cli.global, file);
    commands::dispatch(&cli.global, &settings, cli.command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            e.print().ok();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("command failed: {e:?}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit as u8)
        }
    }
}
