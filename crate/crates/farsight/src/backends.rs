//! Provider interfaces for candidate generation and embeddings.
//!
//! Everything above this module talks to two narrow traits:
//! [`PolicyProvider`] (sample a continuation conditioned on prompt, image,
//! and committed prefix) and [`EmbeddingProvider`] (embed text and images
//! into one shared vector space). [`http`] implements both against a
//! JSON-over-HTTP endpoint; [`crate::simlab`] implements both as pure
//! functions for deterministic testing.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod http;

/// Reference to the image half of a (prompt, image) pair.
///
/// File paths are read and inlined by HTTP providers; URLs are forwarded
/// as-is; opaque sim ids are only meaningful to the simulator backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ImageRef {
    FilePath(String),
    Url(String),
    #[serde(rename = "opaque-sim-id")]
    SimId(String),
}

impl ImageRef {
    pub fn value(&self) -> &str {
        match self {
            ImageRef::FilePath(v) | ImageRef::Url(v) | ImageRef::SimId(v) => v,
        }
    }

    /// Checks the structural invariants: non-empty value, and file-path
    /// variants must point at a readable file at time of use.
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.value().is_empty() {
            return Err(ProviderError::InvalidRequest(
                "image reference value is empty".into(),
            ));
        }
        if let ImageRef::FilePath(p) = self {
            if !Path::new(p).is_file() {
                return Err(ProviderError::ImageUnreadable {
                    image: p.clone(),
                    reason: "file not found or not a regular file".into(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::FilePath(v) => write!(f, "file:{v}"),
            ImageRef::Url(v) => write!(f, "url:{v}"),
            ImageRef::SimId(v) => write!(f, "sim:{v}"),
        }
    }
}

/// Decoding mode for one generation request.
///
/// Greedy is a distinct flag rather than temperature zero: providers
/// disagree on temperature-0 semantics, a flag does not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Temperature(f64),
}

impl Decode {
    pub fn is_greedy(self) -> bool {
        matches!(self, Decode::Greedy)
    }

    pub fn temperature(self) -> Option<f64> {
        match self {
            Decode::Greedy => None,
            Decode::Temperature(t) => Some(t),
        }
    }
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decode::Greedy => write!(f, "greedy"),
            Decode::Temperature(t) => write!(f, "{t}"),
        }
    }
}

// Serialized as the string "greedy" or a bare number, so JSONL records stay
// one self-describing field.
impl Serialize for Decode {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            Decode::Greedy => ser.serialize_str("greedy"),
            Decode::Temperature(t) => ser.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for Decode {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Decode;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"greedy\" or a temperature number")
            }
            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<Decode, E> {
                if s == "greedy" {
                    Ok(Decode::Greedy)
                } else {
                    Err(E::custom(format!("unknown decode mode {s:?}")))
                }
            }
            fn visit_f64<E: serde::de::Error>(self, t: f64) -> Result<Decode, E> {
                Ok(Decode::Temperature(t))
            }
            fn visit_u64<E: serde::de::Error>(self, t: u64) -> Result<Decode, E> {
                Ok(Decode::Temperature(t as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, t: i64) -> Result<Decode, E> {
                Ok(Decode::Temperature(t as f64))
            }
        }
        de.deserialize_any(V)
    }
}

/// One continuation request: prompt, image, committed prefix sentences, and
/// sampling parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub image: ImageRef,
    /// Sentences already committed, in order.
    pub prefix: Vec<String>,
    pub decode: Decode,
    /// Generation budget in provider units (tokens or sim sentences). The
    /// caller truncates to one sentence afterwards.
    pub max_new_units: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if let Decode::Temperature(t) = self.decode {
            if t < 0.0 || t.is_nan() {
                return Err(ProviderError::InvalidRequest(format!(
                    "temperature must be >= 0, got {t}"
                )));
            }
        }
        if self.max_new_units == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_new_units must be >= 1".into(),
            ));
        }
        self.image.validate()
    }
}

/// Connection settings for one HTTP provider endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_id: String,
    /// Bearer token. Loaded from an environment variable by the CLI; never
    /// serialized back out.
    #[serde(skip_serializing, default)]
    pub auth_token: Option<String>,
    #[serde(with = "duration_ms", default = "default_timeout")]
    pub request_timeout: Duration,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(with = "duration_ms", default = "default_backoff")]
    pub retry_backoff: Duration,
}

fn default_timeout() -> Duration {
    Duration::from_secs(60)
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> Duration {
    Duration::from_millis(250)
}

mod duration_ms {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.request_timeout.is_zero() {
            return Err(ProviderError::InvalidConfig(
                "request timeout must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A fixed-length real vector from one provider's embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Rejects empty and non-finite vectors.
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::Protocol("empty embedding vector".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(ProviderError::Protocol(format!(
                "non-finite embedding entry {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Returns a unit-norm copy. Errors on (near-)zero vectors.
    pub fn normalized(&self) -> Result<Embedding, ProviderError> {
        let n = self.norm();
        if n < 1e-12 {
            return Err(ProviderError::Protocol("zero embedding vector".into()));
        }
        Ok(Embedding {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }
}

/// Errors shared by all provider implementations.
///
/// `Network` failures are retried by implementations up to `max_retries`;
/// `Protocol` failures (malformed responses, bad status semantics) are not.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("network error after {attempts} attempt(s): {reason}")]
    Network { attempts: u32, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("image {image} unreadable: {reason}")]
    ImageUnreadable { image: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Samples a continuation of the response, conditioned on prompt, image,
/// and the committed prefix. An empty (or whitespace-only) return value is
/// the end-of-sequence signal: the policy has nothing further to say.
pub trait PolicyProvider: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError>;
}

/// Embeds text and images into one shared space of dimension `dim()`.
/// Implementations must be deterministic per (input, model).
pub trait EmbeddingProvider: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Embedding, ProviderError>;
    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, ProviderError>;
    fn dim(&self) -> usize;
}
