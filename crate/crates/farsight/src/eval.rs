//! Hallucination evaluation and reporting.
//!
//! CHAIR compares the objects a caption mentions against the image's
//! ground-truth annotations: the sentence-level score is the fraction of
//! captions containing any hallucinated object, the instance-level score is
//! hallucinated mentions over all mentions, aggregated corpus-wide
//! (sum over sum, so zero-mention captions contribute nothing to the
//! denominator). Object extraction is lexicon-driven: lowercase, tokenize,
//! longest-match-first with plural normalization and synonym resolution.
//!
//! The pairwise judge harness is optional: it sends a fixed rubric with two
//! responses to a judge endpoint, randomizing presentation order per call
//! with a recorded seed so position bias cannot leak into win rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Decode, GenerationRequest, ImageRef, PolicyProvider, ProviderError};
use crate::search::SweepTable;
use crate::simlab::splitmix64;

/// The pairwise judging rubric sent verbatim to the judge endpoint, with
/// `{}` slots for the two responses.
pub const JUDGE_RUBRIC: &str = include_str!("../../../assets/judge_rubric.txt");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown image ids in captions: {}", .0.join(", "))]
    UnknownImageIds(Vec<String>),
    #[error("no captions to evaluate")]
    NoCaptions,
    #[error("invalid lexicon: {0}")]
    LexiconInvalid(String),
    #[error("invalid annotations: {0}")]
    AnnotationsInvalid(String),
    #[error("every judge outcome was invalid")]
    AllInvalid,
    #[error("judge endpoint not configured; pairwise evaluation is disabled")]
    JudgeNotConfigured,
    #[error("report needs at least one section")]
    NoSections,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Lexicon and object extraction
// ---------------------------------------------------------------------------

/// Canonical object vocabulary with a synonym table and plural suffix
/// rules. Surfaces may span multiple words; matching is
/// longest-match-first with matched words consumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectLexicon {
    pub objects: BTreeSet<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    /// (suffix, replacement) singularization rules, tried in order.
    #[serde(default = "default_suffix_rules")]
    pub plural_suffix_rules: Vec<(String, String)>,
}

fn default_suffix_rules() -> Vec<(String, String)> {
    [
        ("ies", "y"),
        ("ves", "fe"),
        ("shes", "sh"),
        ("ches", "ch"),
        ("sses", "ss"),
        ("xes", "x"),
        ("zes", "z"),
        ("oes", "o"),
        ("s", ""),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

impl ObjectLexicon {
    pub fn new(objects: impl IntoIterator<Item = String>, synonyms: BTreeMap<String, String>) -> Result<Self, EvalError> {
        let lex = Self {
            objects: objects.into_iter().collect(),
            synonyms,
            plural_suffix_rules: default_suffix_rules(),
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.objects.is_empty() {
            return Err(EvalError::LexiconInvalid("no canonical objects".into()));
        }
        for o in &self.objects {
            if o != &o.to_lowercase() {
                return Err(EvalError::LexiconInvalid(format!("canonical object {o:?} is not lowercase")));
            }
        }
        for (surface, canonical) in &self.synonyms {
            if !self.objects.contains(canonical) {
                return Err(EvalError::LexiconInvalid(format!(
                    "synonym {surface:?} maps to unknown object {canonical:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let lex: ObjectLexicon = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        lex.validate()?;
        Ok(lex)
    }

    fn singularize(&self, word: &str) -> Option<String> {
        for (suffix, replacement) in &self.plural_suffix_rules {
            if word.len() > suffix.len() + 1 && word.ends_with(suffix.as_str()) {
                return Some(format!("{}{replacement}", &word[..word.len() - suffix.len()]));
            }
        }
        None
    }

    /// Resolves a space-joined surface (already lowercased) to a canonical
    /// object: direct object hit, synonym hit, or either after
    /// singularizing the final word.
    fn resolve(&self, surface: &str) -> Option<String> {
        if self.objects.contains(surface) {
            return Some(surface.to_string());
        }
        if let Some(c) = self.synonyms.get(surface) {
            return Some(c.clone());
        }
        let mut words: Vec<&str> = surface.split(' ').collect();
        let last = words.pop()?;
        if let Some(singular) = self.singularize(last) {
            let mut rebuilt = words.join(" ");
            if !rebuilt.is_empty() {
                rebuilt.push(' ');
            }
            rebuilt.push_str(&singular);
            if self.objects.contains(rebuilt.as_str()) {
                return Some(rebuilt);
            }
            if let Some(c) = self.synonyms.get(rebuilt.as_str()) {
                return Some(c.clone());
            }
        }
        None
    }

    fn max_surface_words(&self) -> usize {
        self.objects
            .iter()
            .map(|o| o.split(' ').count())
            .chain(self.synonyms.keys().map(|s| s.split(' ').count()))
            .max()
            .unwrap_or(1)
    }
}

fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Canonical objects mentioned by a caption: tokenized, plural-normalized,
/// synonym-resolved, longest-match-first with consumed words, set
/// semantics.
pub fn extract_objects(caption: &str, lexicon: &ObjectLexicon) -> BTreeSet<String> {
    let tokens = tokenize(caption);
    let max_n = lexicon.max_surface_words();
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = false;
        for n in (1..=max_n.min(tokens.len() - i)).rev() {
            let surface = tokens[i..i + n].join(" ");
            if let Some(canonical) = lexicon.resolve(&surface) {
                found.insert(canonical);
                i += n;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    found
}

// ---------------------------------------------------------------------------
// CHAIR
// ---------------------------------------------------------------------------

/// One line of a caption corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// Ground truth: image id to annotated canonical objects.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub by_image: BTreeMap<String, BTreeSet<String>>,
}

impl AnnotationSet {
    pub fn from_json_file(path: &Path, lexicon: &ObjectLexicon) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        set.validate(lexicon)?;
        Ok(set)
    }

    pub fn validate(&self, lexicon: &ObjectLexicon) -> Result<(), EvalError> {
        for (image, objects) in &self.by_image {
            for o in objects {
                if !lexicon.objects.contains(o) {
                    return Err(EvalError::AnnotationsInvalid(format!(
                        "image {image:?} annotates unknown object {o:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionBreakdown {
    pub image_id: String,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChairReport {
    /// Fraction of captions containing at least one hallucinated object.
    pub chair_s: f64,
    /// Hallucinated mentions over all mentions, corpus-level.
    pub chair_i: f64,
    pub caption_count: usize,
    pub captions_with_hallucination: usize,
    pub total_mentions: usize,
    pub total_hallucinated: usize,
    pub per_caption: Vec<CaptionBreakdown>,
}

/// Scores a caption corpus. Every image id must be annotated; captions
/// mentioning no objects count as non-hallucinated and add nothing to the
/// instance-level sums.
pub fn chair_scores(
    captions: &[(String, String)],
    annotations: &AnnotationSet,
    lexicon: &ObjectLexicon,
) -> Result<ChairReport, EvalError> {
    if captions.is_empty() {
        return Err(EvalError::NoCaptions);
    }
    let unknown: Vec<String> = {
        let mut seen = BTreeSet::new();
        captions
            .iter()
            .filter(|(id, _)| !annotations.by_image.contains_key(id))
            .filter(|(id, _)| seen.insert(id.clone()))
            .map(|(id, _)| id.clone())
            .collect()
    };
    if !unknown.is_empty() {
        return Err(EvalError::UnknownImageIds(unknown));
    }

    let mut per_caption = Vec::with_capacity(captions.len());
    let mut total_mentions = 0usize;
    let mut total_hallucinated = 0usize;
    let mut bad_captions = 0usize;

    for (image_id, caption) in captions {
        let truth = &annotations.by_image[image_id];
        let mentioned = extract_objects(caption, lexicon);
        let hallucinated: BTreeSet<String> = mentioned.difference(truth).cloned().collect();
        total_mentions += mentioned.len();
        total_hallucinated += hallucinated.len();
        if !hallucinated.is_empty() {
            bad_captions += 1;
        }
        per_caption.push(CaptionBreakdown {
            image_id: image_id.clone(),
            mentioned: mentioned.into_iter().collect(),
            hallucinated: hallucinated.into_iter().collect(),
        });
    }

    Ok(ChairReport {
        chair_s: bad_captions as f64 / captions.len() as f64,
        chair_i: if total_mentions == 0 {
            0.0
        } else {
            total_hallucinated as f64 / total_mentions as f64
        },
        caption_count: captions.len(),
        captions_with_hallucination: bad_captions,
        total_mentions,
        total_hallucinated,
        per_caption,
    })
}

// ---------------------------------------------------------------------------
// Pairwise judge harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeOutcome {
    AWins,
    BWins,
    Tie,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeRecord {
    /// None when the judge's reply carried no parseable verdict.
    pub outcome: Option<JudgeOutcome>,
    /// Whether the two responses were swapped on presentation.
    pub swapped: bool,
    pub seed: u64,
    pub raw_reply: String,
}

/// Fills the rubric's two `{}` slots in order.
pub fn fill_rubric(rubric: &str, first: &str, second: &str) -> String {
    rubric.replacen("{}", first, 1).replacen("{}", second, 1)
}

/// Parses the verdict format: the earliest occurrence of one of the three
/// exact verdict strings wins; anything else is an invalid verdict.
pub fn parse_verdict(reply: &str) -> Option<&'static str> {
    const VERDICTS: [&str; 3] = ["Response1 is better", "Response2 is better", "Tie"];
    VERDICTS
        .iter()
        .filter_map(|v| reply.find(v).map(|pos| (pos, *v)))
        .min_by_key(|&(pos, _)| pos)
        .map(|(_, v)| v)
}

/// Maps a presentation-order verdict back to (a, b) given the swap flag.
pub fn map_verdict(verdict: &str, swapped: bool) -> Option<JudgeOutcome> {
    match (verdict, swapped) {
        ("Tie", _) => Some(JudgeOutcome::Tie),
        ("Response1 is better", false) | ("Response2 is better", true) => Some(JudgeOutcome::AWins),
        ("Response2 is better", false) | ("Response1 is better", true) => Some(JudgeOutcome::BWins),
        _ => None,
    }
}

/// Asks the judge to compare two responses for one image. The A/B order is
/// randomized from `seed` (recorded in the result) and the verdict mapped
/// back, so position bias averages out over a batch of seeds.
pub fn pairwise_judge(
    response_a: &str,
    response_b: &str,
    image: &ImageRef,
    judge: &dyn PolicyProvider,
    rubric: &str,
    seed: u64,
) -> Result<JudgeRecord, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6a75_6467)); // "judg"
    let swapped: bool = rng.gen();
    let (first, second) = if swapped {
        (response_b, response_a)
    } else {
        (response_a, response_b)
    };
    let prompt = fill_rubric(rubric, first, second);
    let req = GenerationRequest {
        prompt,
        image: image.clone(),
        prefix: vec![],
        decode: Decode::Greedy,
        max_new_units: 64,
        seed: Some(seed),
    };
    let raw_reply = judge.generate(&req)?;
    let outcome = parse_verdict(&raw_reply).and_then(|v| map_verdict(v, swapped));
    Ok(JudgeRecord {
        outcome,
        swapped,
        seed,
        raw_reply,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub wins_pct: f64,
    pub ties_pct: f64,
    pub losses_pct: f64,
    pub valid: usize,
    pub invalid: usize,
}

/// Percentages over valid outcomes; invalid records are excluded and
/// counted. Errors when nothing valid remains.
pub fn win_rate(records: &[JudgeRecord]) -> Result<WinRate, EvalError> {
    let invalid = records.iter().filter(|r| r.outcome.is_none()).count();
    let valid: Vec<JudgeOutcome> = records.iter().filter_map(|r| r.outcome).collect();
    if valid.is_empty() {
        return Err(EvalError::AllInvalid);
    }
    let n = valid.len() as f64;
    let count = |o: JudgeOutcome| valid.iter().filter(|&&x| x == o).count() as f64;
    Ok(WinRate {
        wins_pct: 100.0 * count(JudgeOutcome::AWins) / n,
        ties_pct: 100.0 * count(JudgeOutcome::Tie) / n,
        losses_pct: 100.0 * count(JudgeOutcome::BWins) / n,
        valid: valid.len(),
        invalid,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedWinRate {
    pub comparison: String,
    pub rate: WinRate,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportSections {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_rates: Option<Vec<NamedWinRate>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    /// Config hashes and other provenance strings.
    pub provenance: BTreeMap<String, String>,
    #[serde(flatten)]
    pub sections: ReportSections,
}

pub const REPORT_FORMAT: &str = "farsight-report";
pub const REPORT_VERSION: u32 = 1;

/// Writes `report.json` (machine-readable) and `report.txt` (plain table)
/// under `out_dir`; returns the two paths.
pub fn render_report(
    sections: ReportSections,
    provenance: BTreeMap<String, String>,
    out_dir: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf), EvalError> {
    if sections.chair.is_none() && sections.sweep.is_none() && sections.win_rates.is_none() {
        return Err(EvalError::NoSections);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let report = Report {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        provenance,
        sections,
    };

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(|e| io_err(&json_path, e))?;

    let txt_path = out_dir.join("report.txt");
    fs::write(&txt_path, render_text(&report)).map_err(|e| io_err(&txt_path, e))?;
    Ok((json_path, txt_path))
}

fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("evaluation report\n=================\n");
    for (k, v) in &report.provenance {
        out.push_str(&format!("{k}: {v}\n"));
    }
    if let Some(chair) = &report.sections.chair {
        out.push_str("\n[chair]\n");
        out.push_str(&format!(
            "captions: {}   mentions: {}   hallucinated: {}\n",
            chair.caption_count, chair.total_mentions, chair.total_hallucinated
        ));
        out.push_str(&format!(
            "CHAIR_S = {:.6}   CHAIR_I = {:.6}\n",
            chair.chair_s, chair.chair_i
        ));
    }
    if let Some(sweep) = &report.sections.sweep {
        out.push_str(&format!(
            "\n[step-size sweep]  metric: {}  T = {}\n",
            sweep.metric, sweep.fixed_temperature
        ));
        out.push_str(&format!("{:>10} {:>14} {:>9}\n", "step-size", "mean-metric", "failures"));
        for row in &sweep.rows {
            let mean = row
                .mean_metric
                .map(|m| format!("{m:.6}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!("{:>10} {:>14} {:>9}\n", row.step_size, mean, row.failures));
        }
    }
    if let Some(rates) = &report.sections.win_rates {
        out.push_str("\n[pairwise win rates]\n");
        out.push_str(&format!("{:<28} {:>7} {:>7} {:>7}\n", "comparison", "win%", "tie%", "loss%"));
        for r in rates {
            out.push_str(&format!(
                "{:<28} {:>7.1} {:>7.1} {:>7.1}\n",
                r.comparison, r.rate.wins_pct, r.rate.ties_pct, r.rate.losses_pct
            ));
        }
    }
    out
}
