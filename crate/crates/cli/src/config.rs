//! Layered configuration: command-line flags override environment
//! variables (handled by clap), which override `r2p.toml`.

use std::path::{Path, PathBuf};

use r2p_core::gateway::{BackendKind, EncoderBackendConfig, VlmBackendConfig};
use r2p_core::inference::PipelineConfig;
use serde::Deserialize;

use crate::error::CliError;
use crate::{GlobalArgs, PipelineArgs};

pub const DEFAULT_CONFIG_FILE: &str = "r2p.toml";

/// Contents of `r2p.toml`. Relative paths are resolved against the file's
/// directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub db_path: Option<PathBuf>,
    pub log_level: Option<String>,
    pub backend: Option<BackendKind>,
    pub jobs: Option<usize>,
    pub encoder: EncoderBackendConfig,
    pub vlm: VlmBackendConfig,
    pub pipeline: PipelineConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub report: Option<PathBuf>,
    pub traces: Option<PathBuf>,
}

fn rebase(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl FileConfig {
    /// Reads `path`; when no path was given, reads `r2p.toml` from the
    /// working directory if it exists.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let (path, required) = match path {
            Some(p) => (p.to_path_buf(), true),
            None => (PathBuf::from(DEFAULT_CONFIG_FILE), false),
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Self::default())
            }
            Err(e) => {
                return Err(CliError::runtime(
                    "IO_ERROR",
                    format!("cannot read config {}: {e}", path.display()),
                ))
            }
        };
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| {
            CliError::usage(format!("invalid config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut cfg.db_path);
        rebase(base, &mut cfg.encoder.mock_fixtures);
        rebase(base, &mut cfg.vlm.mock_script);
        rebase(base, &mut cfg.output.report);
        rebase(base, &mut cfg.output.traces);
        Ok(cfg)
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub encoder: EncoderBackendConfig,
    pub vlm: VlmBackendConfig,
    pub pipeline: PipelineConfig,
    pub db_path: Option<PathBuf>,
    pub jobs: usize,
    pub output: OutputConfig,
}

impl Settings {
    pub fn resolve(global: &GlobalArgs, file: FileConfig) -> Self {
        let mut encoder = file.encoder;
        let mut vlm = file.vlm;
        if let Some(kind) = global.backend.or(file.backend) {
            encoder.kind = kind;
            vlm.kind = kind;
        }
        if let Some(url) = &global.vlm_base_url {
            vlm.base_url = Some(url.clone());
        }
        if let Some(var) = &global.vlm_api_key_env {
            vlm.api_key_env = Some(var.clone());
        }
        if let Some(model) = &global.vlm_model {
            vlm.model_id = model.clone();
        }
        if let Some(url) = &global.embed_base_url {
            encoder.base_url = Some(url.clone());
        }
        if let Some(var) = &global.embed_api_key_env {
            encoder.api_key_env = Some(var.clone());
        }
        if let Some(model) = &global.embed_model {
            encoder.model_id = model.clone();
        }
        if let Some(dim) = global.embed_dim {
            encoder.embedding_dim = dim;
        }
        if let Some(seed) = global.mock_seed {
            encoder.mock_seed = seed;
        }
        if let Some(path) = &global.vlm_script {
            vlm.mock_script = Some(path.clone());
        }
        if let Some(path) = &global.encoder_fixtures {
            encoder.mock_fixtures = Some(path.clone());
        }
        let jobs = global.jobs.or(file.jobs).unwrap_or(1).max(1);
        Self {
            encoder,
            vlm,
            pipeline: file.pipeline,
            db_path: file.db_path,
            jobs,
            output: file.output,
        }
    }

    /// Pipeline configuration with command-line overrides applied.
    pub fn pipeline_with(&self, args: &PipelineArgs) -> PipelineConfig {
        let mut cfg = self.pipeline.clone();
        if let Some(preset) = args.preset {
            let p = PipelineConfig::preset(preset);
            cfg.enable_cot = p.enable_cot;
            cfg.enable_pairwise = p.enable_pairwise;
            cfg.enable_fingerprints = p.enable_fingerprints;
            cfg.verification = p.verification;
        }
        if let Some(k) = args.k {
            cfg.k = k;
        }
        if let Some(mode) = args.retrieval_mode {
            cfg.retrieval_mode = mode;
        }
        if let Some(v) = args.verification {
            cfg.verification = v;
        }
        if let Some(m) = args.recognition_mode {
            cfg.recognition_mode = m;
        }
        if args.no_cot {
            cfg.enable_cot = false;
        }
        if args.no_pairwise {
            cfg.enable_pairwise = false;
        }
        if args.no_fingerprints {
            cfg.enable_fingerprints = false;
        }
        if let Some(t) = args.pairwise_threshold {
            cfg.pairwise_threshold = t;
        }
        if args.logit_ratio_literal {
            cfg.logit_ratio_literal = true;
        }
        if let Some(t) = &args.attribute_template {
            cfg.attribute_template = t.clone();
        }
        if let Some(m) = args.logits_margin {
            cfg.logits_margin = m;
        }
        if self.jobs == 1 {
            cfg.parallel_pairwise = false;
        }
        cfg
    }
}
