//! Image payloads, content digests and reference-image storage.
//!
//! Images are never decoded here. The media type is sniffed from the
//! magic bytes and payloads are passed through to the gateways untouched.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const JPEG_MAGIC: &[u8] = &[0xFF, 0xD8, 0xFF];

/// Keyword of the PNG `tEXt` chunk that carries a test label for the mock
/// backends.
pub const LABEL_KEYWORD: &str = "r2p-label";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image payload is empty")]
    Empty,
    #[error("unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat,
    #[error("failed to read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reference image {path} changed on disk (sha256 {actual}, recorded {expected})")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("image preprocessing failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaType {
    #[serde(rename = "image/png")]
    Png,
    #[serde(rename = "image/jpeg")]
    Jpeg,
}

impl MediaType {
    pub fn sniff(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.is_empty() {
            Err(ImageError::Empty)
        } else if bytes.starts_with(PNG_MAGIC) {
            Ok(MediaType::Png)
        } else if bytes.starts_with(JPEG_MAGIC) {
            Ok(MediaType::Jpeg)
        } else {
            Err(ImageError::UnsupportedFormat)
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }
}

impl fmt::Display for MediaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mime())
    }
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Image bytes with their sniffed media type.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    bytes: Arc<[u8]>,
    media_type: MediaType,
}

impl ImagePayload {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Result<Self, ImageError> {
        let bytes = bytes.into();
        let media_type = MediaType::sniff(&bytes)?;
        Ok(Self { bytes, media_type })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> MediaType {
        self.media_type
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

/// Content-addressed handle to an image stored outside the database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub sha256: String,
}

/// An image together with the path it was read from.
#[derive(Debug, Clone)]
pub struct ImageFile {
    pub path: PathBuf,
    pub payload: ImagePayload,
}

impl ImageFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            payload: ImagePayload::new(bytes)?,
        })
    }

    pub fn from_bytes(path: impl Into<PathBuf>, bytes: Vec<u8>) -> Result<Self, ImageError> {
        Ok(Self {
            path: path.into(),
            payload: ImagePayload::new(bytes)?,
        })
    }

    pub fn image_ref(&self) -> ImageRef {
        ImageRef {
            path: self.path.to_string_lossy().into_owned(),
            sha256: self.payload.sha256(),
        }
    }
}

/// Resolves stored [`ImageRef`]s back to bytes.
pub trait ImageStore: Send + Sync {
    fn load(&self, image: &ImageRef) -> Result<ImagePayload, ImageError>;
}

/// Reads reference images from the filesystem and checks their digest.
#[derive(Debug, Default, Clone)]
pub struct FsImageStore {
    base_dir: Option<PathBuf>,
}

impl FsImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Relative paths are resolved against `base_dir`.
    pub fn with_base_dir(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: Some(base_dir.into()),
        }
    }
}

impl ImageStore for FsImageStore {
    fn load(&self, image: &ImageRef) -> Result<ImagePayload, ImageError> {
        let path = Path::new(&image.path);
        let resolved = match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        };
        let file = ImageFile::read(&resolved)?;
        let actual = file.payload.sha256();
        if actual != image.sha256 {
            return Err(ImageError::DigestMismatch {
                path: image.path.clone(),
                expected: image.sha256.clone(),
                actual,
            });
        }
        Ok(file.payload)
    }
}

/// In-memory image store keyed by path, mostly for tests.
#[derive(Debug, Default, Clone)]
pub struct MemoryImageStore {
    images: HashMap<String, ImagePayload>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, payload: ImagePayload) {
        self.images.insert(path.into(), payload);
    }
}

impl ImageStore for MemoryImageStore {
    fn load(&self, image: &ImageRef) -> Result<ImagePayload, ImageError> {
        self.images
            .get(&image.path)
            .cloned()
            .ok_or_else(|| ImageError::Io {
                path: PathBuf::from(&image.path),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not in memory store"),
            })
    }
}

/// Optional pre-encoding transform, e.g. an external cropper that isolates
/// the concept from a cluttered scene.
pub trait ImageHook: Send + Sync {
    fn apply(&self, image: &ImagePayload) -> Result<ImagePayload, ImageError>;
}

/// Extracts the mock label from a PNG `tEXt` chunk with keyword
/// [`LABEL_KEYWORD`], if present.
pub fn embedded_label(bytes: &[u8]) -> Option<String> {
    if !bytes.starts_with(PNG_MAGIC) {
        return None;
    }
    let mut pos = PNG_MAGIC.len();
    while pos + 8 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().ok()?) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let data_start = pos + 8;
        let data_end = data_start.checked_add(len)?;
        if data_end > bytes.len() {
            return None;
        }
        if kind == b"tEXt" {
            let data = &bytes[data_start..data_end];
            if let Some(nul) = data.iter().position(|&b| b == 0) {
                if &data[..nul] == LABEL_KEYWORD.as_bytes() {
                    return Some(String::from_utf8_lossy(&data[nul + 1..]).into_owned());
                }
            }
        }
        if kind == b"IEND" {
            return None;
        }
        pos = data_end + 4;
    }
    None
}

/// The label mock backends use for an image: the embedded test label, or
/// `sha256:<digest>` when there is none.
pub fn mock_label(image: &ImagePayload) -> String {
    embedded_label(image.bytes()).unwrap_or_else(|| format!("sha256:{}", image.sha256()))
}

/// Builds a valid 1x1 grayscale PNG carrying `label` in a `tEXt` chunk.
pub fn labeled_png(label: &str) -> Vec<u8> {
    fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
        out.extend_from_slice(&(data.len() as u32).to_be_bytes());
        out.extend_from_slice(kind);
        out.extend_from_slice(data);
        let mut h = crc32fast::Hasher::new();
        h.update(kind);
        h.update(data);
        out.extend_from_slice(&h.finalize().to_be_bytes());
    }

    let mut out = PNG_MAGIC.to_vec();
    // width 1, height 1, bit depth 8, grayscale, deflate, no filter, no interlace
    chunk(&mut out, b"IHDR", &[0, 0, 0, 1, 0, 0, 0, 1, 8, 0, 0, 0, 0]);
    let mut text = LABEL_KEYWORD.as_bytes().to_vec();
    text.push(0);
    text.extend_from_slice(label.as_bytes());
    chunk(&mut out, b"tEXt", &text);
    // zlib stream of one scanline: filter byte 0, pixel 0
    chunk(
        &mut out,
        b"IDAT",
        &[0x78, 0x01, 0x01, 0x02, 0x00, 0xFD, 0xFF, 0x00, 0x00, 0x00, 0x02, 0x00, 0x01],
    );
    chunk(&mut out, b"IEND", &[]);
    out
}
