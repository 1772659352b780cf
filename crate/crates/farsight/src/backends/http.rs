//! JSON-over-HTTP provider implementations.
//!
//! The wire format is the engine's own provider protocol (see
//! `docs/provider-protocol.md`): one generation endpoint and one embedding
//! endpoint, both plain JSON POST. The engine depends only on that
//! protocol, not on any specific vendor; adapting a vendor API means
//! writing a thin proxy or another impl of the traits, never touching the
//! engine.

use std::fs;
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Embedding, EmbeddingProvider, GenerationRequest, ImageRef, PolicyProvider, ProviderConfig,
    ProviderError,
};

const GENERATE_PATH: &str = "/v1/generate";
const EMBED_PATH: &str = "/v1/embed";

/// Image payload as it travels on the wire. Files are inlined as base64 so
/// requests are self-contained; URLs are forwarded for the provider to
/// fetch.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ImagePayload {
    Base64 { data: String },
    Url { url: String },
}

fn image_payload(image: &ImageRef) -> Result<ImagePayload, ProviderError> {
    match image {
        ImageRef::FilePath(p) => {
            let bytes = fs::read(p).map_err(|e| ProviderError::ImageUnreadable {
                image: p.clone(),
                reason: e.to_string(),
            })?;
            Ok(ImagePayload::Base64 {
                data: base64::engine::general_purpose::STANDARD.encode(bytes),
            })
        }
        ImageRef::Url(u) => Ok(ImagePayload::Url { url: u.clone() }),
        ImageRef::SimId(id) => Err(ProviderError::InvalidRequest(format!(
            "opaque sim id {id:?} cannot be sent to an HTTP provider"
        ))),
    }
}

fn build_client(cfg: &ProviderConfig) -> Result<Client, ProviderError> {
    cfg.validate()?;
    Client::builder()
        .timeout(cfg.request_timeout)
        .connect_timeout(cfg.request_timeout)
        .build()
        .map_err(|e| ProviderError::InvalidConfig(e.to_string()))
}

/// POSTs `body`, retrying timeout and 5xx-class failures with exponential
/// backoff. Total attempts are `1 + max_retries`; protocol failures (4xx,
/// malformed bodies) abort immediately.
fn post_with_retries(
    client: &Client,
    cfg: &ProviderConfig,
    path: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ProviderError> {
    let url = format!("{}{}", cfg.endpoint_url.trim_end_matches('/'), path);
    let attempts = 1 + cfg.max_retries;
    let mut last_failure = String::new();

    for attempt in 0..attempts {
        if attempt > 0 {
            let backoff = cfg.retry_backoff.as_millis() as u64;
            thread::sleep(Duration::from_millis(backoff << (attempt - 1).min(16)));
        }

        let mut req = client.post(&url).json(body);
        if let Some(token) = &cfg.auth_token {
            req = req.bearer_auth(token);
        }

        match req.send() {
            Err(e) => last_failure = e.to_string(),
            Ok(resp) => {
                let status = resp.status();
                if status.is_server_error() {
                    last_failure = format!("server error {status}");
                    continue;
                }
                if !status.is_success() {
                    return Err(ProviderError::Protocol(format!(
                        "endpoint returned {status} for {path}"
                    )));
                }
                return resp
                    .json::<serde_json::Value>()
                    .map_err(|e| ProviderError::Protocol(format!("malformed JSON body: {e}")));
            }
        }
    }

    Err(ProviderError::Network {
        attempts,
        reason: last_failure,
    })
}

/// [`PolicyProvider`] backed by the protocol's generation endpoint.
pub struct HttpPolicyProvider {
    cfg: ProviderConfig,
    client: Client,
}

impl HttpPolicyProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        let client = build_client(&cfg)?;
        Ok(Self { cfg, client })
    }
}

impl PolicyProvider for HttpPolicyProvider {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let mut body = json!({
            "model": self.cfg.model_id,
            "prompt": req.prompt,
            "image": image_payload(&req.image)?,
            "prefix": req.prefix,
            "greedy": req.decode.is_greedy(),
            "max_units": req.max_new_units,
        });
        if let Some(t) = req.decode.temperature() {
            body["temperature"] = json!(t);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }

        let resp = post_with_retries(&self.client, &self.cfg, GENERATE_PATH, &body)?;
        match resp.get("text").and_then(|t| t.as_str()) {
            Some(text) => Ok(text.to_string()),
            None => Err(ProviderError::Protocol(
                "generation response missing string field `text`".into(),
            )),
        }
    }
}

/// [`EmbeddingProvider`] backed by the protocol's embedding endpoint.
///
/// The text and image halves may be distinct models provider-side, but they
/// must share one vector dimension; that is checked once at construction
/// and against every response.
pub struct HttpEmbeddingProvider {
    cfg: ProviderConfig,
    client: Client,
    dim: usize,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: ProviderConfig, text_dim: usize, image_dim: usize) -> Result<Self, ProviderError> {
        if text_dim != image_dim {
            return Err(ProviderError::InvalidConfig(format!(
                "text ({text_dim}) and image ({image_dim}) embedding dims differ; the halves must share one space"
            )));
        }
        if text_dim == 0 {
            return Err(ProviderError::InvalidConfig("embedding dim must be > 0".into()));
        }
        let client = build_client(&cfg)?;
        Ok(Self { cfg, client, dim: text_dim })
    }

    fn embed(&self, modality: &str, input: serde_json::Value) -> Result<Embedding, ProviderError> {
        let body = json!({
            "model": self.cfg.model_id,
            "modality": modality,
            "input": input,
        });
        let resp = post_with_retries(&self.client, &self.cfg, EMBED_PATH, &body)?;
        let raw = resp
            .get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| {
                ProviderError::Protocol("embedding response missing array field `embedding`".into())
            })?;
        let values = raw
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    ProviderError::Protocol("non-numeric entry in embedding array".into())
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let emb = Embedding::new(values)?;
        if emb.dim() != self.dim {
            return Err(ProviderError::DimMismatch {
                expected: self.dim,
                got: emb.dim(),
            });
        }
        Ok(emb)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_text(&self, text: &str) -> Result<Embedding, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::InvalidRequest("cannot embed empty text".into()));
        }
        self.embed("text", json!(text))
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, ProviderError> {
        image.validate()?;
        let payload = image_payload(image)?;
        self.embed("image", serde_json::to_value(payload).unwrap())
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
