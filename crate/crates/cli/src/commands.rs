//! Subcommand implementations. Each returns the JSON text for stdout.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use r2p_core::db::{Database, MANIFEST_FILE};
use r2p_core::enrollment::{enroll_concept, enroll_with_privileged_attributes, EnrollContext};
use r2p_core::eval::run::{run_eval, DatasetManifest, EvalOptions, TaskKind};
use r2p_core::eval::build_split;
use r2p_core::gateway::{build_encoder, build_vlm, Encoder, Vlm};
use r2p_core::image::{FsImageStore, ImageFile};
use r2p_core::inference::{Pipeline, Task};
use serde::Serialize;
use serde_json::json;

use crate::config::Settings;
use crate::error::CliError;
use crate::{Command, GlobalArgs, PipelineArgs, QueryTask};

pub fn dispatch(global: &GlobalArgs, settings: &Settings, command: Command) -> Result<String, CliError> {
    match command {
        Command::Enroll {
            db,
            image,
            name,
            category,
            attributes,
            description,
        } => {
            let db_dir = db_dir(db, settings)?;
            let ctx = enroll_context(global)?;
            cmd_enroll(settings, &db_dir, &image, &name, &category, attributes.as_deref(), description.as_deref(), &ctx)
        }
        Command::Query {
            db,
            image,
            task,
            target,
            question,
            choices,
            trace_out,
            pipeline,
        } => {
            let task = match task {
                QueryTask::Recognize => Task::Recognition {
                    target: target.ok_or_else(|| CliError::usage("--target is required for --task recognize"))?,
                },
                QueryTask::Caption => Task::Caption,
                QueryTask::Vqa => Task::Vqa {
                    question: question.ok_or_else(|| CliError::usage("--question is required for --task vqa"))?,
                    choices: split_list(
                        &choices.ok_or_else(|| CliError::usage("--choices is required for --task vqa"))?,
                        '|',
                    ),
                },
            };
            cmd_query(settings, &db_dir(db, settings)?, &image, &task, trace_out.as_deref(), &pipeline)
        }
        Command::Eval {
            db,
            dataset,
            task,
            seeds,
            report_out,
            traces_out,
            pipeline,
        } => {
            let options = EvalOptions {
                tasks: parse_tasks(&task)?,
                seeds: parse_seeds(&seeds)?,
                jobs: settings.jobs,
                traces_out: traces_out.or_else(|| settings.output.traces.clone()),
            };
            let report_out = report_out.or_else(|| settings.output.report.clone());
            cmd_eval(settings, &db_dir(db, settings)?, &dataset, &options, report_out.as_deref(), &pipeline)
        }
        Command::Split {
            images_manifest,
            n_query,
            out,
        } => cmd_split(settings, &images_manifest, n_query, out.as_deref()),
        Command::Inspect { db, name } => cmd_inspect(&db_dir(db, settings)?, name.as_deref()),
    }
}

fn db_dir(flag: Option<PathBuf>, settings: &Settings) -> Result<PathBuf, CliError> {
    flag.or_else(|| settings.db_path.clone())
        .ok_or_else(|| CliError::usage("--db is required (or set db_path in the config file)"))
}

fn enroll_context(global: &GlobalArgs) -> Result<EnrollContext, CliError> {
    match &global.fixed_clock {
        Some(raw) => {
            let at: DateTime<Utc> = DateTime::parse_from_rfc3339(raw)
                .map_err(|e| CliError::usage(format!("--fixed-clock {raw:?}: {e}")))?
                .with_timezone(&Utc);
            Ok(EnrollContext::deterministic(at))
        }
        None => Ok(EnrollContext::new()),
    }
}

fn split_list(raw: &str, sep: char) -> Vec<String> {
    raw.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_tasks(raw: &str) -> Result<Vec<TaskKind>, CliError> {
    if raw.trim().eq_ignore_ascii_case("all") {
        return Ok(TaskKind::ALL.to_vec());
    }
    split_list(raw, ',')
        .iter()
        .map(|t| t.parse().map_err(CliError::usage))
        .collect()
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    let seeds = split_list(raw, ',')
        .iter()
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| CliError::usage(format!("invalid seed {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::usage("--seeds needs at least one seed"));
    }
    Ok(seeds)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output types serialize")
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))
}

/// Absolute path with `.` and `..` resolved lexically.
fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    let abs = std::path::absolute(path).map_err(|e| CliError::io(path, e))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// `target` expressed relative to `base`, so databases can be moved
/// together with their images.
fn relative_to(base: &Path, target: &Path) -> PathBuf {
    let b: Vec<Component> = base.components().collect();
    let t: Vec<Component> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target.to_path_buf();
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c);
    }
    rel
}

fn load_db(dir: &Path) -> Result<Database, CliError> {
    Ok(Database::load(dir)?)
}

fn encoder(settings: &Settings) -> Result<Arc<dyn Encoder>, CliError> {
    Ok(build_encoder(&settings.encoder)?)
}

fn vlm(settings: &Settings) -> Result<Arc<dyn Vlm>, CliError> {
    Ok(build_vlm(&settings.vlm)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_enroll(
    settings: &Settings,
    db_dir: &Path,
    image_path: &Path,
    name: &str,
    category: &str,
    attributes: Option<&str>,
    description: Option<&str>,
    ctx: &EnrollContext,
) -> Result<String, CliError> {
    let encoder = encoder(settings)?;
    let db = if db_dir.join(MANIFEST_FILE).exists() {
        load_db(db_dir)?
    } else {
        Database::new(encoder.encoder_id())
    };
    let mut image = ImageFile::read(image_path)?;
    image.path = relative_to(&absolute(db_dir)?, &absolute(image_path)?);
    let record = match (attributes, description) {
        (Some(attrs), Some(desc)) => enroll_with_privileged_attributes(
            &image,
            name,
            category,
            &split_list(attrs, ','),
            desc,
            &db,
            encoder.as_ref(),
            ctx,
        )?,
        _ => enroll_concept(&image, name, category, &db, vlm(settings)?.as_ref(), encoder.as_ref(), ctx)?,
    };
    db.save(db_dir)?;
    Ok(to_json(&record))
}

fn build_pipeline(settings: &Settings, db_dir: &Path, args: &PipelineArgs) -> Result<Pipeline, CliError> {
    Ok(Pipeline::new(
        encoder(settings)?,
        vlm(settings)?,
        Arc::new(FsImageStore::with_base_dir(db_dir)),
        settings.pipeline_with(args),
    )?)
}

fn cmd_query(
    settings: &Settings,
    db_dir: &Path,
    image_path: &Path,
    task: &Task,
    trace_out: Option<&Path>,
    args: &PipelineArgs,
) -> Result<String, CliError> {
    let db = load_db(db_dir)?;
    let pipeline = build_pipeline(settings, db_dir, args)?;
    let image = ImageFile::read(image_path)?;
    let answer = pipeline.answer_query(&image.payload, task, &db.snapshot())?;
    if let Some(path) = trace_out {
        write_file(path, &serde_json::to_string(&answer.trace).expect("trace serializes"))?;
    }
    let task_name = match task {
        Task::Recognition { .. } => "recognize",
        Task::Caption => "caption",
        Task::Vqa { .. } => "vqa",
    };
    Ok(to_json(&json!({
        "task": task_name,
        "answer": answer.text,
        "concept": answer.concept_name,
        "concept_id": answer.concept_id,
        "trace": answer.trace,
    })))
}

fn cmd_eval(
    settings: &Settings,
    db_dir: &Path,
    dataset: &Path,
    options: &EvalOptions,
    report_out: Option<&Path>,
    args: &PipelineArgs,
) -> Result<String, CliError> {
    let manifest = DatasetManifest::load(dataset)?;
    let db = load_db(db_dir)?;
    let pipeline = build_pipeline(settings, db_dir, args)?;
    let base = dataset.parent().unwrap_or(Path::new(""));
    let report = run_eval(&manifest, base, &pipeline, &db.snapshot(), options)?;
    let text = to_json(&report);
    if let Some(path) = report_out {
        write_file(path, &text)?;
    }
    Ok(text)
}

fn cmd_split(
    settings: &Settings,
    manifest_path: &Path,
    n_query: Option<usize>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let concepts: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| {
        CliError::runtime(
            "MANIFEST_ERROR",
            format!("{}: expected an object of concept name to image paths: {e}", manifest_path.display()),
        )
    })?;
    if n_query == Some(0) {
        return Err(CliError::usage("--n-query must be at least 1"));
    }
    let encoder = encoder(settings)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut embedded = BTreeMap::new();
    for (concept, images) in concepts {
        let mut list = Vec::with_capacity(images.len());
        for image in images {
            let file = ImageFile::read(base.join(&image))?;
            list.push((image, encoder.encode_image(&file.payload)?));
        }
        embedded.insert(concept, list);
    }
    let split = build_split(&embedded, n_query)?;
    let text = to_json(&split);
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(text)
}

fn cmd_inspect(db_dir: &Path, name: Option<&str>) -> Result<String, CliError> {
    let db = load_db(db_dir)?;
    let snap = db.snapshot();
    if let Some(name) = name {
        let record = snap
            .by_name(name)
            .ok_or_else(|| CliError::domain("UNKNOWN_CONCEPT", format!("no concept named {name:?}")))?;
        return Ok(to_json(record));
    }
    let records: Vec<_> = snap
        .records()
        .map(|r| {
            json!({
                "concept_id": r.concept_id,
                "name": r.name,
                "category": r.category,
                "description": r.description,
                "attributes": r.attributes,
                "reference_image": r.reference_image,
                "enrolled_at": r.enrolled_at,
            })
        })
        .collect();
    Ok(to_json(&json!({
        "manifest": snap.manifest(),
        "records": records,
    })))
}
