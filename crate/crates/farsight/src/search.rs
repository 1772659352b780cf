//! Inference-time search strategies.
//!
//! [`guided_search`] is the stepwise loop: at each step it samples K
//! continuations per temperature (plus one greedy candidate), truncates
//! each to a single sentence, scores every candidate sentence against the
//! image, and commits the argmax. The scorer decides the strategy: a
//! [`PrmScorer`] is myopic (immediate reward), a [`ValueScorer`] is
//! far-sighted (learned long-term value). [`greedy_decode`] and
//! [`best_of_n`] are the whole-response baselines, and
//! [`sweep_step_size`] scales the per-step sample count at one fixed
//! temperature.
//!
//! Candidate sample seeds are derived from (search seed, step, temperature
//! index, sample index) only — never from the guidance mode or the sample
//! count — so differently-guided searches see identical candidate sets
//! until their choices diverge, and larger step sizes see supersets of
//! smaller ones.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Decode, GenerationRequest, ImageRef, PolicyProvider, ProviderError};
use crate::fanout::bounded_map;
use crate::reward::{RewardError, RewardModel};
use crate::segmenter::{first_sentence, is_terminal, SegmentationRules};
use crate::simlab::splitmix64;
use crate::value::{Featurizer, ValueError, ValueHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    Value,
    Prm,
    None,
}

impl std::fmt::Display for Guidance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Guidance::Value => write!(f, "value"),
            Guidance::Prm => write!(f, "prm"),
            Guidance::None => write!(f, "none"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// The N temperature configurations.
    pub temperatures: Vec<f64>,
    /// K samples drawn per temperature per step.
    pub samples_per_temperature: usize,
    pub include_greedy_candidate: bool,
    pub max_steps: usize,
    pub guidance: Guidance,
    pub seed: u64,
    /// Bound on concurrent provider calls within one step.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Generation budget passed to the provider; the segmenter truncates
    /// the continuation to one sentence regardless.
    #[serde(default = "default_max_new_units")]
    pub max_new_units: u32,
}

fn default_in_flight() -> usize {
    6
}
fn default_max_new_units() -> u32 {
    64
}

impl Default for SearchConfig {
    fn default() -> Self {
        // The standard six-candidate configuration: five temperatures at
        // one sample each, plus the greedy candidate.
        Self {
            temperatures: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            samples_per_temperature: 1,
            include_greedy_candidate: true,
            max_steps: 40,
            guidance: Guidance::Value,
            seed: 0,
            max_in_flight: default_in_flight(),
            max_new_units: default_max_new_units(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.guidance != Guidance::None && self.temperatures.is_empty() && !self.include_greedy_candidate {
            return Err(SearchError::InvalidConfig(
                "guided search needs at least one temperature or the greedy candidate".into(),
            ));
        }
        if self.guidance != Guidance::None && self.temperatures.is_empty() {
            return Err(SearchError::InvalidConfig(
                "temperature list must be non-empty when guidance is enabled".into(),
            ));
        }
        if let Some(t) = self.temperatures.iter().find(|t| **t < 0.0 || t.is_nan()) {
            return Err(SearchError::InvalidConfig(format!("negative temperature {t}")));
        }
        if self.samples_per_temperature == 0 {
            return Err(SearchError::InvalidConfig("samples per temperature must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(SearchError::InvalidConfig("max steps must be >= 1".into()));
        }
        if self.max_new_units == 0 {
            return Err(SearchError::InvalidConfig("max new units must be >= 1".into()));
        }
        Ok(())
    }
}

/// The search position: prompt, image, and committed sentences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchState {
    pub prompt: String,
    pub image: ImageRef,
    pub steps: Vec<String>,
}

impl SearchState {
    pub fn response(&self) -> String {
        self.steps.join(" ")
    }
}

/// One scored candidate sentence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCandidate {
    pub sentence: String,
    pub decode: Decode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

/// All candidates of one step plus the committed choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepChoice {
    pub candidates: Vec<StepCandidate>,
    pub scores: Vec<f64>,
    pub chosen_index: usize,
    /// Candidates whose continuation was empty (end-of-sequence) and were
    /// dropped before scoring.
    pub dropped_empty: usize,
}

/// Full record of one search. Wall-clock timings live only in memory; the
/// serialized schema is deterministic so trace files can be compared and
/// cached byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub schema_version: u32,
    pub guidance: Guidance,
    pub config: SearchConfig,
    pub prompt: String,
    pub image: ImageRef,
    pub steps: Vec<StepChoice>,
    pub final_response: String,
    pub provider_calls: usize,
    #[serde(skip)]
    pub wall_clock_per_step: Vec<Duration>,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("scorer kind {scorer} does not match configured guidance {expected}")]
    GuidanceMismatch { expected: Guidance, scorer: Guidance },
    #[error("degenerate policy: every candidate at the first step was empty")]
    DegeneratePolicy,
    #[error("all responses were empty")]
    AllResponsesEmpty,
    #[error("search aborted at step {step}: {cause}")]
    Aborted {
        step: usize,
        #[source]
        cause: Box<SearchError>,
        partial: Box<SearchTrace>,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Value(#[from] ValueError),
}

/// Scores one candidate sentence against the image.
pub trait StepScorer: Sync {
    fn kind(&self) -> Guidance;
    fn score(&self, sentence: &str, image: &ImageRef) -> Result<f64, SearchError>;
}

/// Far-sighted scorer: the value head's prediction on the candidate state.
pub struct ValueScorer<'a> {
    pub head: &'a ValueHead,
    pub featurizer: &'a Featurizer,
}

impl StepScorer for ValueScorer<'_> {
    fn kind(&self) -> Guidance {
        Guidance::Value
    }
    fn score(&self, sentence: &str, image: &ImageRef) -> Result<f64, SearchError> {
        let features = self.featurizer.featurize(sentence, image)?;
        Ok(self.head.predict(&features)?)
    }
}

/// Myopic scorer: immediate embedding-similarity reward.
pub struct PrmScorer<'a> {
    pub reward: &'a RewardModel,
}

impl StepScorer for PrmScorer<'_> {
    fn kind(&self) -> Guidance {
        Guidance::Prm
    }
    fn score(&self, sentence: &str, image: &ImageRef) -> Result<f64, SearchError> {
        Ok(self.reward.prm_score(sentence, image)?.value())
    }
}

/// No scoring: every candidate ties at zero, so the first one is committed.
pub struct NoGuidance;

impl StepScorer for NoGuidance {
    fn kind(&self) -> Guidance {
        Guidance::None
    }
    fn score(&self, _sentence: &str, _image: &ImageRef) -> Result<f64, SearchError> {
        Ok(0.0)
    }
}

/// First-max argmax: ties break toward the lowest index.
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Sample seed for one candidate slot. Depends only on the search seed,
/// step index, temperature index, and sample index within the
/// temperature — not on the sample count or guidance — so candidate sets
/// are nested across step sizes and shared across scorers.
fn candidate_seed(base: u64, step: usize, temp_idx: usize, sample_idx: usize) -> u64 {
    splitmix64(
        splitmix64(base ^ 0x5354_4550) // "STEP"
            ^ (step as u64).wrapping_mul(1_000_003)
            ^ (temp_idx as u64).wrapping_mul(10_007)
            ^ sample_idx as u64,
    )
}

struct CandidateSlot {
    decode: Decode,
    seed: u64,
}

/// Stepwise guided search: sample N x K candidates (+ greedy), score, and
/// commit the argmax; stop when every candidate signals end-of-sequence or
/// `max_steps` is reached. Provider failures abort with the partial trace
/// attached.
pub fn guided_search(
    policy: &dyn PolicyProvider,
    scorer: &dyn StepScorer,
    prompt: &str,
    image: &ImageRef,
    cfg: &SearchConfig,
    rules: &SegmentationRules,
) -> Result<(String, SearchTrace), SearchError> {
    cfg.validate()?;
    if scorer.kind() != cfg.guidance {
        return Err(SearchError::GuidanceMismatch {
            expected: cfg.guidance,
            scorer: scorer.kind(),
        });
    }

    let mut state = SearchState {
        prompt: prompt.to_string(),
        image: image.clone(),
        steps: Vec::new(),
    };
    let mut trace = SearchTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        guidance: cfg.guidance,
        config: cfg.clone(),
        prompt: prompt.to_string(),
        image: image.clone(),
        steps: Vec::new(),
        final_response: String::new(),
        provider_calls: 0,
        wall_clock_per_step: Vec::new(),
    };

    for step in 0..cfg.max_steps {
        let started = Instant::now();

        let mut slots = Vec::new();
        if cfg.include_greedy_candidate {
            slots.push(CandidateSlot {
                decode: Decode::Greedy,
                seed: candidate_seed(cfg.seed, step, usize::MAX, 0),
            });
        }
        for (ti, &t) in cfg.temperatures.iter().enumerate() {
            for k in 0..cfg.samples_per_temperature {
                slots.push(CandidateSlot {
                    decode: Decode::Temperature(t),
                    seed: candidate_seed(cfg.seed, step, ti, k),
                });
            }
        }

        let requests: Vec<GenerationRequest> = slots
            .iter()
            .map(|slot| GenerationRequest {
                prompt: prompt.to_string(),
                image: image.clone(),
                prefix: state.steps.clone(),
                decode: slot.decode,
                max_new_units: cfg.max_new_units,
                seed: Some(slot.seed),
            })
            .collect();

        trace.provider_calls += requests.len();
        let results = bounded_map(&requests, cfg.max_in_flight, |_, req| policy.generate(req));

        let mut raw = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(text) => raw.push((slots[i].decode, text)),
                Err(e) => {
                    trace.final_response = state.response();
                    return Err(SearchError::Aborted {
                        step,
                        cause: Box::new(e.into()),
                        partial: Box::new(trace),
                    });
                }
            }
        }

        // Truncate to one sentence and drop end-of-sequence candidates.
        let mut candidates: Vec<StepCandidate> = Vec::new();
        let mut dropped_empty = 0usize;
        for (decode, text) in raw {
            if is_terminal(&text) {
                dropped_empty += 1;
                continue;
            }
            let (sentence, _) = first_sentence(&text, rules);
            if sentence.is_empty() {
                dropped_empty += 1;
                continue;
            }
            candidates.push(StepCandidate {
                sentence,
                decode,
                reward: None,
                value: None,
            });
        }

        if candidates.is_empty() {
            if step == 0 {
                return Err(SearchError::DegeneratePolicy);
            }
            break; // every candidate signalled end-of-sequence
        }

        // Exact duplicates are scored once and share the score.
        let mut scores = vec![0.0; candidates.len()];
        for i in 0..candidates.len() {
            let duplicate_of = (0..i).find(|&j| candidates[j].sentence == candidates[i].sentence);
            let score = match duplicate_of {
                Some(j) => scores[j],
                None => match scorer.score(&candidates[i].sentence, image) {
                    Ok(s) => s,
                    Err(e) => {
                        trace.final_response = state.response();
                        return Err(SearchError::Aborted {
                            step,
                            cause: Box::new(e),
                            partial: Box::new(trace),
                        });
                    }
                },
            };
            scores[i] = score;
            match cfg.guidance {
                Guidance::Value => candidates[i].value = Some(score),
                Guidance::Prm => candidates[i].reward = Some(score),
                Guidance::None => {}
            }
        }

        let chosen_index = argmax_first(&scores);
        state.steps.push(candidates[chosen_index].sentence.clone());
        trace.steps.push(StepChoice {
            candidates,
            scores,
            chosen_index,
            dropped_empty,
        });
        trace.wall_clock_per_step.push(started.elapsed());
    }

    trace.final_response = state.response();
    Ok((trace.final_response.clone(), trace))
}

/// Plain greedy decoding: commit the provider's highest-probability
/// sentence each step until end-of-sequence or `max_steps`.
#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub response: String,
    pub steps: Vec<String>,
    /// True when the policy terminated immediately (zero sentences).
    pub degenerate: bool,
}

pub fn greedy_decode(
    policy: &dyn PolicyProvider,
    prompt: &str,
    image: &ImageRef,
    max_steps: usize,
    max_new_units: u32,
    rules: &SegmentationRules,
) -> Result<GreedyResult, SearchError> {
    let mut steps: Vec<String> = Vec::new();
    for _ in 0..max_steps {
        let req = GenerationRequest {
            prompt: prompt.to_string(),
            image: image.clone(),
            prefix: steps.clone(),
            decode: Decode::Greedy,
            max_new_units,
            seed: Some(0),
        };
        let text = policy.generate(&req)?;
        if is_terminal(&text) {
            break;
        }
        let (sentence, _) = first_sentence(&text, rules);
        if sentence.is_empty() {
            break;
        }
        steps.push(sentence);
    }
    Ok(GreedyResult {
        response: steps.join(" "),
        degenerate: steps.is_empty(),
        steps,
    })
}

/// Scores a complete response for best-of-N selection.
pub trait ResponseSelector: Sync {
    fn name(&self) -> &'static str;
    fn score_response(&self, sentences: &[String], image: &ImageRef) -> Result<f64, SearchError>;
}

/// Selects by the mean per-sentence reward over the whole response.
pub struct MeanPrmSelector<'a> {
    pub reward: &'a RewardModel,
}

impl ResponseSelector for MeanPrmSelector<'_> {
    fn name(&self) -> &'static str {
        "mean-prm"
    }
    fn score_response(&self, sentences: &[String], image: &ImageRef) -> Result<f64, SearchError> {
        Ok(self.reward.mean_prm_over_response(sentences, image)?.value())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BonCandidate {
    pub decode: Decode,
    pub sentences: Vec<String>,
    pub response: String,
    /// Selector score; empty responses are never selected and carry none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BonOutcome {
    pub selector: String,
    pub chosen_index: usize,
    pub response: String,
    pub candidates: Vec<BonCandidate>,
    pub provider_calls: usize,
}

/// Best-of-N: generate `n` complete responses spread evenly over the
/// temperature list (remainder round-robin from the front), score each
/// with the selector, return the argmax with ties broken toward the lowest
/// index.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    policy: &dyn PolicyProvider,
    selector: &dyn ResponseSelector,
    prompt: &str,
    image: &ImageRef,
    n: usize,
    temperatures: &[f64],
    cfg: &SearchConfig,
    rules: &SegmentationRules,
) -> Result<BonOutcome, SearchError> {
    if n == 0 {
        return Err(SearchError::InvalidConfig("best-of-n needs n >= 1".into()));
    }
    if temperatures.is_empty() {
        return Err(SearchError::InvalidConfig("best-of-n needs a temperature list".into()));
    }

    let assignments: Vec<f64> = (0..n).map(|i| temperatures[i % temperatures.len()]).collect();

    struct Rollout {
        temperature: f64,
        index: usize,
    }
    let rollouts: Vec<Rollout> = assignments
        .iter()
        .enumerate()
        .map(|(index, &temperature)| Rollout { temperature, index })
        .collect();

    let results = bounded_map(&rollouts, cfg.max_in_flight, |_, r| {
        rollout_response(policy, prompt, image, r.temperature, r.index, cfg, rules)
    });

    let mut provider_calls = 0;
    let mut candidates = Vec::with_capacity(n);
    for (i, res) in results.into_iter().enumerate() {
        let (sentences, calls) = res?;
        provider_calls += calls;
        candidates.push(BonCandidate {
            decode: Decode::Temperature(assignments[i]),
            response: sentences.join(" "),
            sentences,
            score: None,
        });
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in candidates.iter_mut().enumerate() {
        if cand.sentences.is_empty() {
            continue;
        }
        let score = selector.score_response(&cand.sentences, image)?;
        cand.score = Some(score);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let (chosen_index, _) = best.ok_or(SearchError::AllResponsesEmpty)?;

    Ok(BonOutcome {
        selector: selector.name().to_string(),
        chosen_index,
        response: candidates[chosen_index].response.clone(),
        candidates,
        provider_calls,
    })
}

fn rollout_response(
    policy: &dyn PolicyProvider,
    prompt: &str,
    image: &ImageRef,
    temperature: f64,
    response_idx: usize,
    cfg: &SearchConfig,
    rules: &SegmentationRules,
) -> Result<(Vec<String>, usize), SearchError> {
    let mut sentences: Vec<String> = Vec::new();
    let mut calls = 0;
    for step in 0..cfg.max_steps {
        let req = GenerationRequest {
            prompt: prompt.to_string(),
            image: image.clone(),
            prefix: sentences.clone(),
            decode: Decode::Temperature(temperature),
            max_new_units: cfg.max_new_units,
            seed: Some(candidate_seed(cfg.seed ^ 0x424f_4e21, response_idx, 0, step)), // "BON!"
        };
        calls += 1;
        let text = policy.generate(&req)?;
        if is_terminal(&text) {
            break;
        }
        let (sentence, _) = first_sentence(&text, rules);
        if sentence.is_empty() {
            break;
        }
        sentences.push(sentence);
    }
    Ok((sentences, calls))
}

/// Scores a finished response for sweep aggregation.
pub trait ResponseMetric: Sync {
    fn name(&self) -> &'static str;
    fn score(&self, sentences: &[String], image: &ImageRef) -> Result<f64, SearchError>;
}

pub struct MeanPrmMetric<'a> {
    pub reward: &'a RewardModel,
}

impl ResponseMetric for MeanPrmMetric<'_> {
    fn name(&self) -> &'static str {
        "mean-prm"
    }
    fn score(&self, sentences: &[String], image: &ImageRef) -> Result<f64, SearchError> {
        Ok(self.reward.mean_prm_over_response(sentences, image)?.value())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub pair_index: usize,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub step_size: usize,
    pub runs: Vec<SweepRun>,
    /// Mean metric over successful runs; absent when every run failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_metric: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub metric: String,
    pub fixed_temperature: f64,
    pub rows: Vec<SweepRow>,
}

/// Runs guided search at one fixed temperature while varying the per-step
/// sample count, aggregating the metric per step size. Failures are
/// reported per cell; other cells continue.
#[allow(clippy::too_many_arguments)]
pub fn sweep_step_size(
    policy: &dyn PolicyProvider,
    scorer: &dyn StepScorer,
    pairs: &[(String, ImageRef)],
    step_sizes: &[usize],
    fixed_temperature: f64,
    base_cfg: &SearchConfig,
    rules: &SegmentationRules,
    metric: &dyn ResponseMetric,
) -> Result<SweepTable, SearchError> {
    if step_sizes.contains(&0) {
        return Err(SearchError::InvalidConfig("step sizes must be positive".into()));
    }
    let mut sizes: Vec<usize> = step_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let cfg = SearchConfig {
            temperatures: vec![fixed_temperature],
            samples_per_temperature: size,
            include_greedy_candidate: false,
            ..base_cfg.clone()
        };
        let mut runs = Vec::with_capacity(pairs.len());
        let mut sum = 0.0;
        let mut ok = 0usize;
        for (pair_index, (prompt, image)) in pairs.iter().enumerate() {
            match guided_search(policy, scorer, prompt, image, &cfg, rules) {
                Ok((response, _trace)) => {
                    let sentences: Vec<String> =
                        crate::segmenter::split_sentences(&response, rules);
                    match metric.score(&sentences, image) {
                        Ok(m) => {
                            sum += m;
                            ok += 1;
                            runs.push(SweepRun {
                                pair_index,
                                response,
                                metric: Some(m),
                                error: None,
                            });
                        }
                        Err(e) => runs.push(SweepRun {
                            pair_index,
                            response,
                            metric: None,
                            error: Some(e.to_string()),
                        }),
                    }
                }
                Err(e) => runs.push(SweepRun {
                    pair_index,
                    response: String::new(),
                    metric: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        let failures = runs.iter().filter(|r| r.error.is_some()).count();
        rows.push(SweepRow {
            step_size: size,
            mean_metric: (ok > 0).then(|| sum / ok as f64),
            runs,
            failures,
        });
    }

    Ok(SweepTable {
        metric: metric.name().to_string(),
        fixed_temperature,
        rows,
    })
}
