//! Process reward: image-text embedding similarity.
//!
//! The immediate quality of one step sentence is the cosine similarity
//! between its text embedding and the image embedding, taken raw in
//! [-1, 1] with no rescaling. Scores are cached per (sentence, image)
//! because dataset construction re-scores identical sentences heavily.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Embedding, EmbeddingProvider, ImageRef, ProviderError};

/// A process reward in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardScore(f64);

impl RewardScore {
    /// Accepts values within [-1, 1] up to a 1e-9 tolerance (clamping the
    /// overshoot), rejects anything else.
    pub fn new(value: f64) -> Result<Self, RewardError> {
        if !value.is_finite() || value.abs() > 1.0 + 1e-9 {
            return Err(RewardError::OutOfRange(value));
        }
        Ok(Self(value.clamp(-1.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("embedding dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("zero-norm vector has no direction")]
    ZeroVector,
    #[error("sentence is empty")]
    EmptySentence,
    #[error("response has no sentences")]
    EmptyResponse,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to [-1, 1] against rounding.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, RewardError> {
    if a.dim() != b.dim() {
        return Err(RewardError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(RewardError::ZeroVector);
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The process reward model: scores a sentence against an image through an
/// embedding provider, caching per (sentence, image) content.
pub struct RewardModel {
    embedder: Arc<dyn EmbeddingProvider>,
    cache: Mutex<HashMap<(String, String), f64>>,
}

impl RewardModel {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            embedder,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.embedder
    }

    /// Reward of one (sentence, image) pair:
    /// `cosine(embed_text(sentence), embed_image(image))`.
    pub fn prm_score(&self, sentence: &str, image: &ImageRef) -> Result<RewardScore, RewardError> {
        if sentence.trim().is_empty() {
            return Err(RewardError::EmptySentence);
        }
        let key = (sentence.to_string(), image.to_string());
        if let Some(&hit) = self.cache.lock().unwrap().get(&key) {
            return RewardScore::new(hit);
        }
        let text = self.embedder.embed_text(sentence)?;
        let img = self.embedder.embed_image(image)?;
        let score = cosine(&text, &img)?;
        self.cache.lock().unwrap().insert(key, score);
        RewardScore::new(score)
    }

    /// Arithmetic mean of per-sentence rewards over a whole response.
    pub fn mean_prm_over_response(
        &self,
        response: &[String],
        image: &ImageRef,
    ) -> Result<RewardScore, RewardError> {
        if response.is_empty() {
            return Err(RewardError::EmptyResponse);
        }
        let mut sum = 0.0;
        for sentence in response {
            sum += self.prm_score(sentence, image)?.value();
        }
        RewardScore::new(sum / response.len() as f64)
    }
}
