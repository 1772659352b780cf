//! Engine for value-guided inference-time search over stepwise image
//! descriptions.
//!
//! A generation policy produces a response one sentence at a time. At each
//! step the engine samples candidate sentences across several temperatures,
//! scores each candidate against the image, and commits the best one. Two
//! scorers are built in: an immediate image-text similarity reward, and a
//! learned value head trained by temporal-difference learning to predict the
//! discounted long-term reward of committing a sentence.
//!
//! Everything is backend-agnostic: generation and embeddings go through the
//! [`backends`] traits, with an HTTP implementation for real providers and a
//! deterministic simulator ([`simlab`]) whose exact dynamic-programming
//! values make every search and training claim testable.
//!
//! Module map:
//! - [`backends`] — provider traits, request/config types, HTTP client.
//! - [`segmenter`] — rule-based sentence segmentation (the step boundary).
//! - [`reward`] — cosine-similarity process reward with a score cache.
//! - [`value`] — state featurization, value heads, TD(0) training,
//!   checkpoints.
//! - [`search`] — guided search, greedy decoding, best-of-N, step-size
//!   sweeps.
//! - [`data`] — TD training-data construction and JSONL/SFT export.
//! - [`eval`] — CHAIR hallucination metrics, pairwise judge harness,
//!   reports.
//! - [`simlab`] — synthetic episodic MDPs with exact oracles and provider
//!   bindings.

pub mod backends;
pub mod data;
pub mod eval;
mod fanout;
pub mod reward;
pub mod search;
pub mod segmenter;
pub mod simlab;
pub mod value;
