//! Image and text encoders projecting into one shared embedding space.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use lru::LruCache;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{join_url, BackendKind, GatewayError, HttpJson, RetryPolicy};
use crate::embedding::Embedding;
use crate::image::{mock_label, ImagePayload};

pub trait Encoder: Send + Sync {
    /// Tag identifying the embedding space; stored in the database manifest.
    fn encoder_id(&self) -> String;

    fn dim(&self) -> usize;

    /// Whether image and text embeddings are comparable with each other.
    fn cross_modal(&self) -> bool {
        true
    }

    fn encode_image(&self, image: &ImagePayload) -> Result<Embedding, GatewayError>;

    fn encode_text(&self, text: &str) -> Result<Embedding, GatewayError>;

    fn encode_text_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        check_batch(texts)?;
        texts.iter().map(|t| self.encode_text(t)).collect()
    }
}

fn check_text(text: &str) -> Result<(), GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::InvalidRequest("text to encode is empty".into()));
    }
    Ok(())
}

fn check_batch(texts: &[String]) -> Result<(), GatewayError> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(i) => Err(GatewayError::InvalidRequest(format!(
            "text at batch index {i} is empty"
        ))),
        None => Ok(()),
    }
}

fn check_dim(expected: usize, e: Embedding) -> Result<Embedding, GatewayError> {
    if e.dim() != expected {
        return Err(GatewayError::DimensionMismatch {
            expected,
            actual: e.dim(),
        });
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderBackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub model_id: String,
    pub embedding_dim: usize,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub cache_capacity: usize,
    /// Set to false when image and text encoders do not share a space.
    pub cross_modal: bool,
    /// Mock only: seed mixed into every generated vector.
    pub mock_seed: u64,
    /// Mock only: JSON map of label to vector overriding generated vectors.
    pub mock_fixtures: Option<PathBuf>,
}

impl Default for EncoderBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            api_key_env: None,
            model_id: "mock-encoder".into(),
            embedding_dim: 64,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            max_in_flight: 4,
            cache_capacity: 4096,
            cross_modal: true,
            mock_seed: 0,
            mock_fixtures: None,
        }
    }
}

pub(crate) mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl EncoderBackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be at least 1".into()));
        }
        if self.kind == BackendKind::Remote && self.base_url.as_deref().unwrap_or("").is_empty() {
            return Err(GatewayError::Config("remote encoder requires base_url".into()));
        }
        Ok(())
    }
}

/// Builds the configured encoder wrapped in an LRU cache.
pub fn build_encoder(config: &EncoderBackendConfig) -> Result<Arc<dyn Encoder>, GatewayError> {
    config.validate()?;
    let capacity = config.cache_capacity;
    Ok(match config.kind {
        BackendKind::Mock => {
            let mut mock = MockEncoder::new(config.embedding_dim, config.mock_seed);
            if let Some(path) = &config.mock_fixtures {
                mock = mock.with_fixture_file(path)?;
            }
            Arc::new(CachedEncoder::new(mock, capacity))
        }
        BackendKind::Remote => Arc::new(CachedEncoder::new(RemoteEncoder::new(config)?, capacity)),
    })
}

/// Deterministic offline encoder.
///
/// Every input is reduced to a label (text: the text itself; image: its
/// embedded test label or content digest). A label listed in the fixture
/// table maps to that vector; any other label seeds a PRNG that draws a
/// Gaussian vector. Images and texts share one label space, so a test can
/// pin exact cross-modal similarities.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
    fixtures: HashMap<String, Embedding>,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            fixtures: HashMap::new(),
        }
    }

    pub fn with_fixture(mut self, label: impl Into<String>, values: Vec<f64>) -> Result<Self, GatewayError> {
        let label = label.into();
        if values.len() != self.dim {
            return Err(GatewayError::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        let e = Embedding::normalize(values)
            .map_err(|e| GatewayError::Config(format!("fixture {label:?}: {e}")))?;
        self.fixtures.insert(label, e);
        Ok(self)
    }

    pub fn with_fixtures(
        mut self,
        fixtures: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, GatewayError> {
        for (label, values) in fixtures {
            self = self.with_fixture(label, values)?;
        }
        Ok(self)
    }

    /// Loads a JSON object mapping labels to number arrays.
    pub fn with_fixture_file(self, path: &std::path::Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read encoder fixtures {}: {e}", path.display()))
        })?;
        let map: std::collections::BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| {
                GatewayError::Config(format!("bad encoder fixtures {}: {e}", path.display()))
            })?;
        self.with_fixtures(map)
    }

    pub fn embed_label(&self, label: &str) -> Embedding {
        if let Some(e) = self.fixtures.get(label) {
            return e.clone();
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        loop {
            let values: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(e) = Embedding::normalize(values) {
                return e;
            }
        }
    }
}

impl Encoder for MockEncoder {
    fn encoder_id(&self) -> String {
        format!("mock:seed={}:dim={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, image: &ImagePayload) -> Result<Embedding, GatewayError> {
        Ok(self.embed_label(&mock_label(image)))
    }

    fn encode_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        check_text(text)?;
        Ok(self.embed_label(text))
    }
}

/// Client for an HTTP embedding service.
///
/// `POST {base_url}/embeddings` with `{"model", "input": [...]}` where each
/// input is a string or `{"image": <base64>, "media_type": ...}`.
pub struct RemoteEncoder {
    http: HttpJson,
    url: String,
    model_id: String,
    dim: usize,
    cross_modal: bool,
}

impl RemoteEncoder {
    pub fn new(config: &EncoderBackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let retry = RetryPolicy {
            max_retries: config.max_retries,
            ..RetryPolicy::default()
        };
        Ok(Self {
            http: HttpJson::new(
                config.timeout,
                config.api_key_env.as_deref(),
                retry,
                config.max_in_flight,
            )?,
            url: join_url(config.base_url.as_deref().unwrap_or_default(), "embeddings"),
            model_id: config.model_id.clone(),
            dim: config.embedding_dim,
            cross_modal: config.cross_modal,
        })
    }

    fn embed(&self, inputs: Vec<Value>) -> Result<Vec<Embedding>, GatewayError> {
        let expected = inputs.len();
        let body = json!({ "model": self.model_id, "input": inputs });
        let resp = self.http.post(&self.url, &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
        if data.len() != expected {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {expected} embeddings, got {}",
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let values: Vec<f64> = serde_json::from_value(
                item.get("embedding").cloned().unwrap_or(Value::Null),
            )
            .map_err(|e| GatewayError::MalformedResponse(format!("bad embedding: {e}")))?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        rows.into_iter()
            .map(|(_, values)| {
                if values.len() != self.dim {
                    return Err(GatewayError::DimensionMismatch {
                        expected: self.dim,
                        actual: values.len(),
                    });
                }
                Ok(Embedding::normalize(values)?)
            })
            .collect()
    }

    fn one(&self, input: Value) -> Result<Embedding, GatewayError> {
        self.embed(vec![input])?
            .pop()
            .ok_or_else(|| GatewayError::MalformedResponse("empty data array".into()))
    }
}

impl Encoder for RemoteEncoder {
    fn encoder_id(&self) -> String {
        format!("remote:{}", self.model_id)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cross_modal(&self) -> bool {
        self.cross_modal
    }

    fn encode_image(&self, image: &ImagePayload) -> Result<Embedding, GatewayError> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image.bytes());
        self.one(json!({ "image": b64, "media_type": image.media_type().mime() }))
    }

    fn encode_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        check_text(text)?;
        self.one(Value::String(text.to_string()))
    }

    fn encode_text_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        check_batch(texts)?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.embed(texts.iter().cloned().map(Value::String).collect())
    }
}

/// LRU cache in front of any encoder, keyed by input digest.
pub struct CachedEncoder<E> {
    inner: E,
    cache: Option<Mutex<LruCache<[u8; 32], Embedding>>>,
}

impl<E: Encoder> CachedEncoder<E> {
    /// A zero capacity disables caching.
    pub fn new(inner: E, capacity: usize) -> Self {
        Self {
            inner,
            cache: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn key(kind: u8, bytes: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([kind]);
        h.update(bytes);
        h.finalize().into()
    }

    fn get(&self, key: &[u8; 32]) -> Option<Embedding> {
        self.cache.as_ref()?.lock().expect("cache poisoned").get(key).cloned()
    }

    fn put(&self, key: [u8; 32], e: &Embedding) {
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache poisoned").put(key, e.clone());
        }
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn encoder_id(&self) -> String {
        self.inner.encoder_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn cross_modal(&self) -> bool {
        self.inner.cross_modal()
    }

    fn encode_image(&self, image: &ImagePayload) -> Result<Embedding, GatewayError> {
        let key = Self::key(b'i', image.bytes());
        if let Some(e) = self.get(&key) {
            return Ok(e);
        }
        let e = check_dim(self.dim(), self.inner.encode_image(image)?)?;
        self.put(key, &e);
        Ok(e)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        check_text(text)?;
        let key = Self::key(b't', text.as_bytes());
        if let Some(e) = self.get(&key) {
            return Ok(e);
        }
        let e = check_dim(self.dim(), self.inner.encode_text(text)?)?;
        self.put(key, &e);
        Ok(e)
    }

    fn encode_text_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        check_batch(texts)?;
        let keys: Vec<_> = texts.iter().map(|t| Self::key(b't', t.as_bytes())).collect();
        let mut out: Vec<Option<Embedding>> = keys.iter().map(|k| self.get(k)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.encode_text_batch(&batch)?;
            if fresh.len() != batch.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "batch of {} returned {} embeddings",
                    batch.len(),
                    fresh.len()
                )));
            }
            for (&i, e) in missing.iter().zip(fresh) {
                let e = check_dim(self.dim(), e)?;
                self.put(keys[i], &e);
                out[i] = Some(e);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled above")).collect())
    }
}
