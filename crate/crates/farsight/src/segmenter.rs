//! Rule-based sentence segmentation.
//!
//! A "step" of generation is one sentence, so the segmenter is the step
//! boundary for everything downstream: candidate truncation, training-data
//! decomposition, and termination detection. The rules are deliberately
//! small and deterministic: split at a terminator (`.`, `!`, `?`) followed
//! by whitespace or end of text, unless the terminator closes a known
//! abbreviation or sits inside a decimal number. Unterminated trailing
//! fragments are kept as sentences — silently dropping policy output would
//! corrupt training triplets.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

/// Split rules: terminators, abbreviation guard, and the minimum sentence
/// length below which a split point is skipped (the fragment merges into
/// the following sentence).
#[derive(Debug, Clone)]
pub struct SegmentationRules {
    terminators: BTreeSet<char>,
    /// Lowercased entries, each ending in '.'.
    abbreviations: BTreeSet<String>,
    min_sentence_chars: usize,
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.", "no.", "vs.", "etc.", "e.g.",
    "i.e.", "fig.", "inc.", "ltd.", "co.", "u.s.", "a.m.", "p.m.",
];

impl Default for SegmentationRules {
    fn default() -> Self {
        Self::new(DEFAULT_ABBREVIATIONS.iter().copied(), 1)
    }
}

impl SegmentationRules {
    pub fn new<'a>(abbreviations: impl IntoIterator<Item = &'a str>, min_sentence_chars: usize) -> Self {
        Self {
            terminators: ['.', '!', '?'].into_iter().collect(),
            abbreviations: abbreviations
                .into_iter()
                .map(|a| a.to_lowercase())
                .filter(|a| a.ends_with('.'))
                .collect(),
            min_sentence_chars: min_sentence_chars.max(1),
        }
    }

    /// Loads an abbreviation list from a plain-text file, one entry per
    /// line. Blank lines and lines starting with `#` are ignored; entries
    /// not ending in '.' are rejected.
    pub fn from_abbreviation_file(path: &Path, min_sentence_chars: usize) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !line.ends_with('.') {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: abbreviation {line:?} does not end with '.'", path.display(), i + 1),
                ));
            }
            entries.push(line.to_string());
        }
        Ok(Self::new(entries.iter().map(String::as_str), min_sentence_chars))
    }
}

/// Splits `text` into sentences. Total function: empty input gives an
/// empty list, an unterminated trailing fragment is returned as the last
/// sentence. Every returned sentence is non-empty after trimming, and the
/// non-whitespace characters of the input are preserved in order.
pub fn split_sentences(text: &str, rules: &SegmentationRules) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    for end in split_points(text, rules) {
        let s = text[start..end].trim();
        if !s.is_empty() {
            sentences.push(s.to_string());
        }
        start = end;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Returns the first sentence and the untouched remainder. Used to
/// truncate a multi-sentence provider continuation to exactly one step.
pub fn first_sentence(text: &str, rules: &SegmentationRules) -> (String, String) {
    match split_points(text, rules).into_iter().find(|&e| !text[..e].trim().is_empty()) {
        Some(end) => (
            text[..end].trim().to_string(),
            text[end..].trim().to_string(),
        ),
        None => (text.trim().to_string(), String::new()),
    }
}

/// End-of-sequence test: a continuation consisting only of whitespace
/// means the policy is done.
pub fn is_terminal(continuation: &str) -> bool {
    continuation.trim().is_empty()
}

/// Byte offsets just past each accepted split terminator.
fn split_points(text: &str, rules: &SegmentationRules) -> Vec<usize> {
    let mut points = Vec::new();
    let mut word_start = 0; // byte offset of the token containing the current char
    let mut nonws_in_sentence = 0usize;

    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c.is_whitespace() {
            word_start = i + c.len_utf8();
            continue;
        }
        nonws_in_sentence += 1;
        if !rules.terminators.contains(&c) {
            continue;
        }
        let after = i + c.len_utf8();
        let next = chars.peek().map(|&(_, n)| n);
        // Split only at a step boundary: terminator then whitespace/end.
        if next.is_some_and(|n| !n.is_whitespace()) {
            continue;
        }
        if c == '.' {
            // Decimal guard: "3.50" never splits (subsumed by the
            // whitespace rule, kept explicit for clarity with odd inputs).
            if next.is_some_and(|n| n.is_ascii_digit()) {
                continue;
            }
            let word = text[word_start..after].to_lowercase();
            if rules.abbreviations.contains(&word) {
                continue;
            }
        }
        if nonws_in_sentence < rules.min_sentence_chars {
            continue;
        }
        points.push(after);
        nonws_in_sentence = 0;
    }
    points
}
