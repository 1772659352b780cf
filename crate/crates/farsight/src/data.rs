//! Training-data construction and file formats.
//!
//! The TD dataset is built by generating several responses per
//! (prompt, image) pair — one greedy, the rest temperature-sampled —
//! segmenting each response into sentences, and emitting one record per
//! sentence with its successor and its reward. Rewards are scored at build
//! time and stored, so training never re-contacts the reward provider.
//!
//! File formats are JSONL with a schema header line; see
//! `docs/file-formats.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Decode, GenerationRequest, ImageRef, PolicyProvider, ProviderError};
use crate::fanout::bounded_map;
use crate::reward::{RewardError, RewardModel, RewardScore};
use crate::search::{Guidance, SearchTrace};
use crate::segmenter::{split_sentences, SegmentationRules};
use crate::simlab::splitmix64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    ParseLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("schema mismatch in {path}: expected {expected_name} v{expected_version}, found {found}")]
    SchemaMismatch {
        path: String,
        expected_name: String,
        expected_version: u32,
        found: String,
    },
    #[error("every pair failed during generation; first error: {first_error}")]
    AllPairsFailed { first_error: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptImagePair {
    pub pair_id: String,
    pub prompt: String,
    pub image: ImageRef,
}

/// One row of the TD training set on disk: a sentence, its successor
/// (absent on the last sentence of a response), and its stored reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub pair_id: String,
    pub response_index: usize,
    pub step_index: usize,
    pub image: ImageRef,
    pub current_sentence: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_sentence: Option<String>,
    pub terminal: bool,
    pub reward: RewardScore,
    pub generation_temperature: Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMethod {
    ValueSearch,
    PrmSearch,
    Greedy,
    Bon,
}

/// One supervised fine-tuning tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub image: ImageRef,
    pub prompt: String,
    pub response: String,
    pub source_method: SourceMethod,
}

// ---------------------------------------------------------------------------
// Pair and triplet construction
// ---------------------------------------------------------------------------

/// One pair per image, prompt drawn uniformly with the seeded RNG.
pub fn build_pairs(
    images: &[ImageRef],
    prompts: &[String],
    seed: u64,
) -> Result<Vec<PromptImagePair>, DataError> {
    if images.is_empty() {
        return Err(DataError::EmptyInput("image list".into()));
    }
    if prompts.is_empty() {
        return Err(DataError::EmptyInput("prompt list".into()));
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7061_6972)); // "pair"
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, image)| PromptImagePair {
            pair_id: format!("pair-{i:05}"),
            prompt: prompts[rng.gen_range(0..prompts.len())].clone(),
            image: image.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Responses generated per pair: one greedy plus temperature-sampled.
    pub responses_per_pair: usize,
    /// Cycled over the sampled responses.
    pub temperatures: Vec<f64>,
    pub seed: u64,
    pub max_new_units: u32,
    pub max_in_flight: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            responses_per_pair: 5,
            temperatures: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            seed: 0,
            max_new_units: 64,
            max_in_flight: 6,
        }
    }
}

#[derive(Debug)]
pub struct PairFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct TripletBuild {
    pub records: Vec<TripletRecord>,
    pub skipped: Vec<PairFailure>,
}

/// Generates the configured responses for every pair, decomposes each into
/// sentences, and emits one reward-scored record per sentence. Per-pair
/// provider failures are skipped and reported; the build fails only if all
/// pairs fail.
pub fn build_triplets(
    pairs: &[PromptImagePair],
    cfg: &BuildConfig,
    policy: &dyn PolicyProvider,
    reward: &RewardModel,
    rules: &SegmentationRules,
) -> Result<TripletBuild, DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyInput("pair list".into()));
    }
    if cfg.responses_per_pair == 0 {
        return Err(DataError::EmptyInput("responses_per_pair must be >= 1".into()));
    }
    if cfg.responses_per_pair > 1 && cfg.temperatures.is_empty() {
        return Err(DataError::EmptyInput(
            "temperature list must be non-empty for sampled responses".into(),
        ));
    }

    let per_pair: Vec<Result<Vec<TripletRecord>, DataError>> =
        bounded_map(pairs, cfg.max_in_flight, |pair_index, pair| {
            build_pair_records(pair, pair_index, cfg, policy, reward, rules)
        });

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (pair, result) in pairs.iter().zip(per_pair) {
        match result {
            Ok(mut rs) => records.append(&mut rs),
            Err(e) => skipped.push(PairFailure {
                pair_id: pair.pair_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    if records.is_empty() && !skipped.is_empty() {
        return Err(DataError::AllPairsFailed {
            first_error: skipped[0].error.clone(),
        });
    }
    Ok(TripletBuild { records, skipped })
}

fn build_pair_records(
    pair: &PromptImagePair,
    pair_index: usize,
    cfg: &BuildConfig,
    policy: &dyn PolicyProvider,
    reward: &RewardModel,
    rules: &SegmentationRules,
) -> Result<Vec<TripletRecord>, DataError> {
    let mut records = Vec::new();
    for response_index in 0..cfg.responses_per_pair {
        let decode = if response_index == 0 {
            Decode::Greedy
        } else {
            Decode::Temperature(cfg.temperatures[(response_index - 1) % cfg.temperatures.len()])
        };
        let req = GenerationRequest {
            prompt: pair.prompt.clone(),
            image: pair.image.clone(),
            prefix: vec![],
            decode,
            max_new_units: cfg.max_new_units,
            seed: Some(splitmix64(
                cfg.seed
                    ^ (pair_index as u64).wrapping_mul(0x9E37_79B9)
                    ^ (response_index as u64).wrapping_mul(0x85EB_CA6B),
            )),
        };
        let text = policy.generate(&req)?;
        let sentences = split_sentences(&text, rules);
        let last = sentences.len().saturating_sub(1);
        for (step_index, sentence) in sentences.iter().enumerate() {
            let score = reward.prm_score(sentence, &pair.image)?;
            records.push(TripletRecord {
                pair_id: pair.pair_id.clone(),
                response_index,
                step_index,
                image: pair.image.clone(),
                current_sentence: sentence.clone(),
                next_sentence: sentences.get(step_index + 1).cloned(),
                terminal: step_index == last,
                reward: score,
                generation_temperature: decode,
            });
        }
    }
    Ok(records)
}

/// Converts stored triplet records into in-memory TD samples by
/// featurizing sentences through the embedding provider (rewards come from
/// the records, already scored at build time).
pub fn td_samples_from_records(
    records: &[TripletRecord],
    featurizer: &crate::value::Featurizer,
) -> Result<Vec<crate::value::TDSample>, crate::value::ValueError> {
    use crate::value::TDSample;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let current = featurizer.featurize(&r.current_sentence, &r.image)?;
        samples.push(match &r.next_sentence {
            Some(next) => {
                TDSample::step(current, r.reward, featurizer.featurize(next, &r.image)?)
            }
            None => TDSample::terminal(current, r.reward),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// JSONL with schema header
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct JsonlSchema {
    pub name: &'static str,
    pub version: u32,
}

pub const TRIPLET_SCHEMA: JsonlSchema = JsonlSchema { name: "td-triplets", version: 1 };
pub const SFT_SCHEMA: JsonlSchema = JsonlSchema { name: "sft-tuples", version: 1 };
pub const CAPTIONS_SCHEMA: JsonlSchema = JsonlSchema { name: "captions", version: 1 };

#[derive(Debug, Serialize, Deserialize)]
struct JsonlHeader {
    schema: String,
    version: u32,
}

/// One JSON object per line, UTF-8, trailing newline; the first line is the
/// schema header. An empty record list writes an empty file.
pub fn write_jsonl<T: Serialize>(
    records: &[T],
    path: &Path,
    schema: JsonlSchema,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    if records.is_empty() {
        return w.flush().map_err(|e| io_err(path, e));
    }
    let header = JsonlHeader {
        schema: schema.name.to_string(),
        version: schema.version,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| io_err(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a header-checked JSONL file. Parse failures name the 1-based file
/// line; an empty file reads as an empty list.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: JsonlSchema) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut saw_header = false;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: JsonlHeader =
                serde_json::from_str(&line).map_err(|e| DataError::ParseLine {
                    path: path.display().to_string(),
                    line: lineno,
                    message: format!("bad schema header: {e}"),
                })?;
            if header.schema != schema.name || header.version != schema.version {
                return Err(DataError::SchemaMismatch {
                    path: path.display().to_string(),
                    expected_name: schema.name.to_string(),
                    expected_version: schema.version,
                    found: format!("{} v{}", header.schema, header.version),
                });
            }
            saw_header = true;
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DataError::ParseLine {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// SFT export
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ExportStats {
    pub written: usize,
    pub skipped_degenerate: usize,
}

pub fn sft_record_from_trace(trace: &SearchTrace) -> Option<SftRecord> {
    if trace.final_response.trim().is_empty() {
        return None;
    }
    let source_method = match trace.guidance {
        Guidance::Value => SourceMethod::ValueSearch,
        Guidance::Prm => SourceMethod::PrmSearch,
        Guidance::None => SourceMethod::Greedy,
    };
    Some(SftRecord {
        image: trace.image.clone(),
        prompt: trace.prompt.clone(),
        response: trace.final_response.clone(),
        source_method,
    })
}

/// Writes one SFT tuple per valid trace; degenerate (empty-response)
/// traces are skipped and counted.
pub fn export_sft(traces: &[SearchTrace], path: &Path) -> Result<ExportStats, DataError> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for trace in traces {
        match sft_record_from_trace(trace) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    write_jsonl(&records, path, SFT_SCHEMA)?;
    Ok(ExportStats {
        written: records.len(),
        skipped_degenerate: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::{make_random_mdp, sim_as_providers};

    fn sim_setup(seed: u64) -> (crate::simlab::SimMdp, std::sync::Arc<crate::simlab::SimPolicyProvider>, RewardModel) {
        let mdp = make_random_mdp(seed, 14);
        let (policy, embedder) = sim_as_providers(&mdp, seed);
        (mdp, policy, RewardModel::new(embedder))
    }

    #[test]
    fn build_pairs_examples() {
        let images: Vec<ImageRef> = (0..3).map(|i| ImageRef::SimId(format!("img-{i}"))).collect();
        let prompts = vec!["describe the image.".to_string()];
        let pairs = build_pairs(&images, &prompts, 1).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.prompt == prompts[0]));
        let ids: std::collections::BTreeSet<_> = pairs.iter().map(|p| p.pair_id.clone()).collect();
        assert_eq!(ids.len(), 3);

        let many: Vec<String> = (0..9).map(|i| format!("prompt {i}.")).collect();
        let a = build_pairs(&images, &many, 7).unwrap();
        let b = build_pairs(&images, &many, 7).unwrap();
        assert_eq!(a, b);

        assert!(build_pairs(&[], &prompts, 0).is_err());
        assert!(build_pairs(&images, &[], 0).is_err());
    }

    #[test]
    fn build_pairs_scales_one_pair_per_image() {
        // reference-scale shape: 9,215 images drawing from 9 prompts
        let images: Vec<ImageRef> = (0..9215).map(|i| ImageRef::SimId(format!("i{i}"))).collect();
        let prompts: Vec<String> = (0..9).map(|i| format!("prompt {i}.")).collect();
        let pairs = build_pairs(&images, &prompts, 42).unwrap();
        assert_eq!(pairs.len(), 9215);
        let used: std::collections::BTreeSet<&str> =
            pairs.iter().map(|p| p.prompt.as_str()).collect();
        assert_eq!(used.len(), 9, "every prompt gets drawn at this scale");
    }

    #[test]
    fn triplet_chains_are_well_formed() {
        let (mdp, policy, reward) = sim_setup(31);
        let pairs = build_pairs(&[mdp.image()], &["p.".to_string()], 0).unwrap();
        let cfg = BuildConfig { responses_per_pair: 4, seed: 5, ..BuildConfig::default() };
        let build =
            build_triplets(&pairs, &cfg, policy.as_ref(), &reward, &SegmentationRules::default())
                .unwrap();
        assert!(build.skipped.is_empty());
        assert!(!build.records.is_empty());

        // group by (pair, response)
        let mut by_response: std::collections::BTreeMap<(String, usize), Vec<&TripletRecord>> =
            Default::default();
        for r in &build.records {
            by_response
                .entry((r.pair_id.clone(), r.response_index))
                .or_default()
                .push(r);
        }
        assert_eq!(by_response.len(), 4);
        for ((_, _), chain) in by_response {
            for (k, r) in chain.iter().enumerate() {
                assert_eq!(r.step_index, k);
                assert_eq!(r.terminal, r.next_sentence.is_none());
                if let Some(next) = &r.next_sentence {
                    assert_eq!(next, &chain[k + 1].current_sentence);
                }
            }
            let terminals = chain.iter().filter(|r| r.terminal).count();
            assert_eq!(terminals, 1);
            assert!(chain.last().unwrap().terminal);
        }
    }

    #[test]
    fn stored_rewards_match_recomputation() {
        let (mdp, policy, reward) = sim_setup(8);
        let (_, fresh_embedder) = sim_as_providers(&mdp, 8);
        let fresh = RewardModel::new(fresh_embedder);

        let pairs = build_pairs(&[mdp.image()], &["p.".to_string()], 3).unwrap();
        let cfg = BuildConfig { responses_per_pair: 3, seed: 3, ..BuildConfig::default() };
        let build =
            build_triplets(&pairs, &cfg, policy.as_ref(), &reward, &SegmentationRules::default())
                .unwrap();
        for r in &build.records {
            let again = fresh.prm_score(&r.current_sentence, &r.image).unwrap();
            assert!((again.value() - r.reward.value()).abs() < 1e-9);
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let (mdp, policy, reward) = sim_setup(77);
        let pairs = build_pairs(&[mdp.image()], &["p.".to_string()], 0).unwrap();
        let cfg = BuildConfig { responses_per_pair: 5, seed: 9, ..BuildConfig::default() };
        let rules = SegmentationRules::default();
        let a = build_triplets(&pairs, &cfg, policy.as_ref(), &reward, &rules).unwrap();
        let b = build_triplets(&pairs, &cfg, policy.as_ref(), &reward, &rules).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn failing_pairs_are_skipped_and_total_failure_errors() {
        use crate::backends::{GenerationRequest, PolicyProvider, ProviderError};

        // fails for one specific image id, succeeds elsewhere
        struct Partial {
            inner: std::sync::Arc<crate::simlab::SimPolicyProvider>,
            poison: String,
        }
        impl PolicyProvider for Partial {
            fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
                if req.image.value() == self.poison {
                    return Err(ProviderError::Network {
                        attempts: 1,
                        reason: "down".into(),
                    });
                }
                self.inner.generate(req)
            }
        }

        let (mdp, policy, reward) = sim_setup(44);
        let poison = "poisoned-img".to_string();
        let partial = Partial { inner: policy, poison: poison.clone() };

        let images = vec![mdp.image(), ImageRef::SimId(poison.clone())];
        let pairs = build_pairs(&images, &["p.".to_string()], 0).unwrap();
        let cfg = BuildConfig { responses_per_pair: 2, ..BuildConfig::default() };
        let rules = SegmentationRules::default();

        let build = build_triplets(&pairs, &cfg, &partial, &reward, &rules).unwrap();
        assert!(!build.records.is_empty());
        assert_eq!(build.skipped.len(), 1);
        assert_eq!(build.skipped[0].pair_id, pairs[1].pair_id);
        assert!(build.records.iter().all(|r| r.pair_id == pairs[0].pair_id));

        // every pair poisoned: the build fails loudly
        let all_poisoned = vec![ImageRef::SimId(poison.clone())];
        let pairs = build_pairs(&all_poisoned, &["p.".to_string()], 0).unwrap();
        match build_triplets(&pairs, &cfg, &partial, &reward, &rules) {
            Err(DataError::AllPairsFailed { .. }) => {}
            other => panic!("expected AllPairsFailed, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.jsonl");

        let (mdp, policy, reward) = sim_setup(2);
        let pairs = build_pairs(&[mdp.image()], &["p.".to_string()], 1).unwrap();
        let cfg = BuildConfig { responses_per_pair: 3, ..BuildConfig::default() };
        let build =
            build_triplets(&pairs, &cfg, policy.as_ref(), &reward, &SegmentationRules::default())
                .unwrap();

        write_jsonl(&build.records, &path, TRIPLET_SCHEMA).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        let back: Vec<TripletRecord> = read_jsonl(&path, TRIPLET_SCHEMA).unwrap();
        assert_eq!(back, build.records);

        // corrupt one line; the error names it (1-based, header included)
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        assert!(lines.len() >= 7, "fixture needs at least 7 lines, got {}", lines.len());
        lines[6] = "{ definitely not json".to_string();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match read_jsonl::<TripletRecord>(&path, TRIPLET_SCHEMA) {
            Err(DataError::ParseLine { line: 7, .. }) => {}
            other => panic!("expected ParseLine at 7, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_empty_list_round_trips_as_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_jsonl::<TripletRecord>(&[], &path, TRIPLET_SCHEMA).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        let back: Vec<TripletRecord> = read_jsonl(&path, TRIPLET_SCHEMA).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn jsonl_schema_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wrong.jsonl");
        let records = vec![SftRecord {
            image: ImageRef::SimId("x".into()),
            prompt: "p".into(),
            response: "r.".into(),
            source_method: SourceMethod::Greedy,
        }];
        write_jsonl(&records, &path, SFT_SCHEMA).unwrap();
        match read_jsonl::<TripletRecord>(&path, TRIPLET_SCHEMA) {
            Err(DataError::SchemaMismatch { .. }) => {}
            other => panic!("expected SchemaMismatch, got {other:?}"),
        }
    }

    #[test]
    fn export_skips_degenerate_traces() {
        use crate::search::{SearchConfig, SearchTrace, TRACE_SCHEMA_VERSION};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");

        let make_trace = |response: &str, guidance: Guidance| SearchTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            guidance,
            config: SearchConfig::default(),
            prompt: "p".into(),
            image: ImageRef::SimId("img".into()),
            steps: vec![],
            final_response: response.to_string(),
            provider_calls: 0,
            wall_clock_per_step: vec![],
        };
        let traces = vec![
            make_trace("A fine sentence.", Guidance::Value),
            make_trace("", Guidance::Value),
            make_trace("Another one.", Guidance::Prm),
        ];
        let stats = export_sft(&traces, &path).unwrap();
        assert_eq!(stats.written, 2);
        assert_eq!(stats.skipped_degenerate, 1);
        let back: Vec<SftRecord> = read_jsonl(&path, SFT_SCHEMA).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].source_method, SourceMethod::ValueSearch);
        assert_eq!(back[1].source_method, SourceMethod::PrmSearch);
    }
}
