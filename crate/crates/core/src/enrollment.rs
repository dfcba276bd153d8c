//! Turning a reference image plus a user-given name and category into a
//! stored [`ConceptRecord`].
//!
//! The chat model describes the concept and lists its fingerprint
//! attributes; the encoder embeds the image and the description. Nothing is
//! written to the database unless every step succeeds.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::db::{new_concept_id, ConceptRecord, Database, DbError};
use crate::gateway::{ChatRequest, Encoder, GatewayError, Vlm};
use crate::image::{ImageError, ImageFile, ImageHook, ImagePayload};
use crate::protocol::{self, ParseFailure, RenderError};

/// Attribute lists longer than this are truncated with a warning.
pub const MAX_ATTRIBUTES: usize = 12;

pub const ENROLLMENT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum EnrollmentError {
    #[error("a concept named {name:?} already exists ({existing_id})")]
    DuplicateName { name: String, existing_id: String },
    #[error("invalid enrollment input: {0}")]
    InvalidInput(String),
    #[error("database encoder {expected:?} differs from the configured encoder {actual:?}")]
    EncoderMismatch { expected: String, actual: String },
    #[error("enrollment reply could not be parsed: {0}")]
    Parse(#[from] ParseFailure),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Db(DbError),
}

impl From<DbError> for EnrollmentError {
    fn from(e: DbError) -> Self {
        match e {
            DbError::DuplicateName { name, existing_id } => {
                EnrollmentError::DuplicateName { name, existing_id }
            }
            other => EnrollmentError::Db(other),
        }
    }
}

impl From<RenderError> for EnrollmentError {
    fn from(e: RenderError) -> Self {
        EnrollmentError::InvalidInput(e.to_string())
    }
}

impl EnrollmentError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            EnrollmentError::DuplicateName { .. } => "DUPLICATE_NAME",
            EnrollmentError::InvalidInput(_) => "INVALID_INPUT",
            EnrollmentError::EncoderMismatch { .. } => "ENCODER_MISMATCH",
            EnrollmentError::Parse(_) => "ENROLLMENT_PARSE_FAILURE",
            EnrollmentError::Gateway(GatewayError::BackendUnavailable { .. }) => {
                "BACKEND_UNAVAILABLE"
            }
            EnrollmentError::Gateway(_) => "GATEWAY_ERROR",
            EnrollmentError::Image(_) => "IMAGE_ERROR",
            EnrollmentError::Db(_) => "DATABASE_ERROR",
        }
    }
}

/// Where timestamps and concept ids come from.
#[derive(Clone, Default)]
pub struct EnrollContext {
    /// Fixed timestamp; `None` uses the system clock.
    pub fixed_clock: Option<DateTime<Utc>>,
    /// Derive concept ids from the name instead of drawing them at random.
    pub deterministic_ids: bool,
    /// Applied to the image before encoding (e.g. a cropper).
    pub hook: Option<Arc<dyn ImageHook>>,
    pub max_attributes: usize,
}

impl std::fmt::Debug for EnrollContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnrollContext")
            .field("fixed_clock", &self.fixed_clock)
            .field("deterministic_ids", &self.deterministic_ids)
            .field("hook", &self.hook.is_some())
            .field("max_attributes", &self.max_attributes)
            .finish()
    }
}

impl EnrollContext {
    pub fn new() -> Self {
        Self {
            max_attributes: MAX_ATTRIBUTES,
            ..Self::default()
        }
    }

    /// Fixed clock and name-derived ids, for reproducible output.
    pub fn deterministic(at: DateTime<Utc>) -> Self {
        Self {
            fixed_clock: Some(at),
            deterministic_ids: true,
            ..Self::new()
        }
    }

    pub fn with_hook(mut self, hook: Arc<dyn ImageHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    fn now(&self) -> DateTime<Utc> {
        self.fixed_clock.unwrap_or_else(Utc::now)
    }

    fn concept_id(&self, name: &str) -> String {
        if self.deterministic_ids {
            let digest = Sha256::digest(name.trim().to_lowercase().as_bytes());
            hex::encode(&digest[..16])
        } else {
            new_concept_id()
        }
    }

    fn encoding_input(&self, image: &ImagePayload) -> Result<ImagePayload, ImageError> {
        match &self.hook {
            Some(hook) => hook.apply(image),
            None => Ok(image.clone()),
        }
    }
}

fn check_preconditions(
    name: &str,
    category: &str,
    db: &Database,
    encoder: &dyn Encoder,
) -> Result<(), EnrollmentError> {
    if name.trim().is_empty() {
        return Err(EnrollmentError::InvalidInput("name must not be empty".into()));
    }
    if category.trim().is_empty() {
        return Err(EnrollmentError::InvalidInput("category must not be empty".into()));
    }
    let snap = db.snapshot();
    if let Some(existing) = snap.by_name(name) {
        return Err(EnrollmentError::DuplicateName {
            name: name.trim().to_string(),
            existing_id: existing.concept_id.clone(),
        });
    }
    let actual = encoder.encoder_id();
    if !snap.encoder_id().is_empty() && snap.encoder_id() != actual {
        return Err(EnrollmentError::EncoderMismatch {
            expected: snap.encoder_id().to_string(),
            actual,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn store(
    image: &ImageFile,
    name: &str,
    category: &str,
    description: String,
    attributes: Vec<String>,
    db: &Database,
    encoder: &dyn Encoder,
    ctx: &EnrollContext,
) -> Result<ConceptRecord, EnrollmentError> {
    let pixels = ctx.encoding_input(&image.payload)?;
    let visual_embedding = encoder.encode_image(&pixels)?;
    let textual_embedding = encoder.encode_text(&description)?;
    let record = ConceptRecord {
        concept_id: ctx.concept_id(name),
        name: name.trim().to_string(),
        category: category.trim().to_string(),
        description,
        attributes,
        visual_embedding,
        textual_embedding,
        reference_image: image.image_ref(),
        extra_reference_images: Vec::new(),
        enrolled_at: ctx.now(),
    };
    let stored = db.upsert(record)?;
    db.ensure_encoder(&encoder.encoder_id())?;
    Ok(stored)
}

/// Enrolls a concept from its reference image using the chat model to
/// extract the description and fingerprint attributes. Costs one model call,
/// or two when the first reply has to be re-asked.
pub fn enroll_concept(
    image: &ImageFile,
    name: &str,
    category: &str,
    db: &Database,
    vlm: &dyn Vlm,
    encoder: &dyn Encoder,
    ctx: &EnrollContext,
) -> Result<ConceptRecord, EnrollmentError> {
    check_preconditions(name, category, db, encoder)?;
    let prompt = protocol::render_enrollment_prompt(category, name)?;
    let request = ChatRequest::new(prompt)
        .image(image.payload.clone())
        .max_tokens(ENROLLMENT_MAX_TOKENS);
    let asked = protocol::ask_with_reask(vlm, &request, protocol::parse_enrollment)?;
    let reply = asked.value?;
    if !reply.category.trim().eq_ignore_ascii_case(category.trim()) {
        log::info!(
            "model described {name:?} as {:?}; keeping user category {category:?}",
            reply.category
        );
    }
    let mut attributes = reply.distinct_features;
    let cap = ctx.max_attributes.max(1);
    if attributes.len() > cap {
        log::warn!(
            "{name:?}: keeping the first {cap} of {} fingerprint attributes",
            attributes.len()
        );
        attributes.truncate(cap);
    }
    store(image, name, category, reply.general, attributes, db, encoder, ctx)
}

/// Enrolls a concept with human-provided attributes and description,
/// bypassing the chat model.
#[allow(clippy::too_many_arguments)]
pub fn enroll_with_privileged_attributes(
    image: &ImageFile,
    name: &str,
    category: &str,
    attributes: &[String],
    description: &str,
    db: &Database,
    encoder: &dyn Encoder,
    ctx: &EnrollContext,
) -> Result<ConceptRecord, EnrollmentError> {
    let attributes: Vec<String> = attributes
        .iter()
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
        .collect();
    if attributes.is_empty() {
        return Err(EnrollmentError::InvalidInput(
            "at least one attribute is required".into(),
        ));
    }
    if description.trim().is_empty() {
        return Err(EnrollmentError::InvalidInput("description must not be empty".into()));
    }
    check_preconditions(name, category, db, encoder)?;
    store(
        image,
        name,
        category,
        description.trim().to_string(),
        attributes,
        db,
        encoder,
        ctx,
    )
}
