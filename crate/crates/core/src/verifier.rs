//! Benchmark-aware answer extraction, normalization, and hard matching.
//!
//! Matching is deterministic and rule-based: no judge model, no partial
//! credit. MCQ answers are accepted as the final option letter or the
//! normalized option text after stripping leading markers such as `A.`,
//! `(A)`, or `A:`. Numeric answers are canonicalized (signs, thousands
//! separators, decimal notation) and compared under an absolute tolerance.
//! The rules are fixed rather than configurable so scores stay comparable
//! across runs.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{AnswerKind, Query};

/// Gold answer for one query. The variant fields mirror the answer kind so a
/// key can never carry fields for the wrong kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerKey {
    McqLetter {
        letter: char,
    },
    McqText {
        text: String,
    },
    Numeric {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tolerance: Option<f64>,
    },
}

impl AnswerKey {
    pub fn kind(&self) -> AnswerKind {
        match self {
            AnswerKey::McqLetter { .. } => AnswerKind::McqLetter,
            AnswerKey::McqText { .. } => AnswerKind::McqText,
            AnswerKey::Numeric { .. } => AnswerKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchReason {
    LetterMatch,
    OptionTextMatch,
    NumericMatch,
    NoAnswerFound,
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierOutcome {
    pub correct: bool,
    /// Normalized prediction extracted from the generation.
    pub extracted: String,
    pub reason: MatchReason,
}

impl VerifierOutcome {
    fn incorrect(extracted: impl Into<String>, reason: MatchReason) -> Self {
        VerifierOutcome { correct: false, extracted: extracted.into(), reason }
    }
}

/// 0-based option index for an option letter (`A` or `a` -> 0).
pub fn letter_index(letter: char) -> Option<usize> {
    let upper = letter.to_ascii_uppercase();
    upper.is_ascii_uppercase().then(|| (upper as u8 - b'A') as usize)
}

/// Canonical letter for a 0-based option index (0 -> `A`). Only defined for
/// the first 26 options.
pub fn index_letter(index: usize) -> Option<char> {
    (index < 26).then(|| (b'A' + index as u8) as char)
}

fn nfkc(s: &str) -> String {
    s.nfkc().collect()
}

/// Pull the final answer out of a generation.
///
/// The accepted tag forms are `<answer>...</answer>` and an
/// `Answer: ...` line; when both appear, the later occurrence wins. With no
/// tag at all, the last non-empty line is returned. Never fails; the result
/// may be empty.
pub fn extract_final_answer(generation: &str) -> String {
    let (answer, _) = extract_with_span(generation);
    answer
}

/// Split a generation into its reasoning body and the final answer. The
/// reasoning is everything before the answer tag; with no tag, the whole
/// generation is kept as reasoning.
pub fn split_final_answer(generation: &str) -> (String, String) {
    let (answer, span) = extract_with_span(generation);
    let reasoning = match span {
        Some(start) => generation[..start].trim_end().to_string(),
        None => generation.trim_end().to_string(),
    };
    (reasoning, answer)
}

/// Returns the extracted answer and the byte offset where the matched tag
/// construct starts (None when the last-non-empty-line fallback was used).
fn extract_with_span(generation: &str) -> (String, Option<usize>) {
    let tag = last_answer_tag(generation);
    let line = last_answer_line(generation);
    match (tag, line) {
        (Some((t_start, t_content)), Some((l_start, l_content))) => {
            if t_start >= l_start {
                (t_content.trim().to_string(), Some(t_start))
            } else {
                (l_content.trim().to_string(), Some(l_start))
            }
        }
        (Some((start, content)), None) | (None, Some((start, content))) => {
            (content.trim().to_string(), Some(start))
        }
        (None, None) => {
            let last = generation
                .lines()
                .rev()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("");
            (last.trim().to_string(), None)
        }
    }
}

/// Last complete `<answer>...</answer>` pair: (start offset, content).
fn last_answer_tag(text: &str) -> Option<(usize, &str)> {
    const OPEN: &str = "<answer>";
    const CLOSE: &str = "</answer>";
    let mut best = None;
    let mut from = 0;
    while let Some(rel) = text[from..].find(OPEN) {
        let open_at = from + rel;
        let content_start = open_at + OPEN.len();
        if let Some(close_rel) = text[content_start..].find(CLOSE) {
            best = Some((open_at, &text[content_start..content_start + close_rel]));
        }
        from = content_start;
    }
    best
}

/// Last line of the form `Answer: ...` (case-insensitive): (start offset,
/// content after the colon).
fn last_answer_line(text: &str) -> Option<(usize, &str)> {
    let mut best = None;
    let mut offset = 0;
    for line in text.split('\n') {
        let trimmed = line.trim_start();
        let indent = line.len() - trimmed.len();
        let lower = trimmed.to_lowercase();
        if let Some(rest) = lower.strip_prefix("answer") {
            let after = rest.trim_start();
            if let Some(stripped) = after.strip_prefix(':') {
                let content_at = trimmed.len() - stripped.len();
                best = Some((offset + indent, &trimmed[content_at..]));
            }
        }
        offset += line.len() + 1;
    }
    best
}

/// Strip one leading option marker: `(A)`, `A.`, `A:`, or `A)`. Returns the
/// marker letter (uppercased) and the rest of the string.
fn strip_option_marker(s: &str) -> Option<(char, &str)> {
    let mut chars = s.chars();
    let first = chars.next()?;
    if first == '(' {
        let letter = chars.next()?;
        if letter.is_ascii_alphabetic() && chars.next() == Some(')') {
            return Some((letter.to_ascii_uppercase(), chars.as_str().trim_start()));
        }
        return None;
    }
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let punct = chars.next()?;
    if matches!(punct, '.' | ':' | ')') {
        let rest = chars.as_str();
        // Require a boundary so words like "B.Blue" are left alone.
        if rest.is_empty() || rest.starts_with(char::is_whitespace) {
            return Some((first.to_ascii_uppercase(), rest.trim_start()));
        }
    }
    None
}

/// Normalization applied to option texts and candidate answers before text
/// matching: NFKC, repeated leading-marker stripping, lowercasing, and
/// whitespace collapsing. Idempotent.
pub fn normalize_answer_text(s: &str) -> String {
    let folded = nfkc(s);
    let mut cur = folded.trim();
    while let Some((_, rest)) = strip_option_marker(cur) {
        cur = rest;
    }
    cur.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

pub(crate) enum McqResolution {
    Letter(usize),
    Text(usize),
}

pub(crate) fn resolve_mcq(candidate: &str, options: &[String]) -> Option<McqResolution> {
    if options.is_empty() {
        return None;
    }
    let folded = nfkc(candidate);
    let trimmed = folded.trim();
    if trimmed.is_empty() {
        return None;
    }

    // Letter reading first: a lone letter, or a marker form with nothing
    // after it. The letter interpretation wins ties with option text, and an
    // out-of-range letter is unanswered rather than falling back to text.
    let lone_letter = {
        let mut chars = trimmed.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => Some(c),
            _ => None,
        }
    };
    let marker_only = strip_option_marker(trimmed).filter(|(_, rest)| rest.is_empty());
    if let Some(letter) = lone_letter.or(marker_only.map(|(l, _)| l)) {
        let idx = letter_index(letter)?;
        return (idx < options.len()).then_some(McqResolution::Letter(idx));
    }

    let residual = match strip_option_marker(trimmed) {
        Some((_, rest)) => rest,
        None => trimmed,
    };
    let needle = normalize_answer_text(residual);
    if needle.is_empty() {
        return None;
    }
    let mut matches = options
        .iter()
        .enumerate()
        .filter(|(_, opt)| normalize_answer_text(opt) == needle)
        .map(|(i, _)| i);
    let first = matches.next()?;
    // Multiple distinct options matching is treated as unanswered.
    if matches.next().is_some() {
        return None;
    }
    Some(McqResolution::Text(first))
}

/// Resolve a candidate answer against the option list. A lone letter (or a
/// marker form like `(B)`) maps to its index; otherwise the marker-stripped
/// text is matched case-insensitively against the normalized option texts.
pub fn normalize_mcq(candidate: &str, options: &[String]) -> Option<usize> {
    resolve_mcq(candidate, options).map(|r| match r {
        McqResolution::Letter(i) | McqResolution::Text(i) => i,
    })
}

/// Canonical text form of a numeric answer: NFKC, trimmed, thousands commas
/// removed, unicode minus mapped to `-`, leading `+` dropped. Idempotent.
pub fn canonicalize_number_text(s: &str) -> String {
    let folded = nfkc(s);
    let cleaned: String = folded
        .chars()
        .filter(|c| *c != ',')
        .map(|c| if c == '\u{2212}' { '-' } else { c })
        .collect();
    let mut cur = cleaned.trim();
    while let Some(rest) = cur.strip_prefix('+') {
        cur = rest.trim_start();
    }
    cur.to_string()
}

/// Parse a canonicalized decimal number; `None` when the text is not a
/// plain finite number.
pub fn canonicalize_number(text: &str) -> Option<f64> {
    let cleaned = canonicalize_number_text(text);
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn gold_option_index(gold: &AnswerKey, options: &[String]) -> Option<usize> {
    match gold {
        AnswerKey::McqLetter { letter } => {
            letter_index(*letter).filter(|i| *i < options.len())
        }
        AnswerKey::McqText { text } => normalize_mcq(text, options),
        AnswerKey::Numeric { .. } => None,
    }
}

/// Verify one generation against a query: extract the final answer,
/// normalize it per the answer kind, and hard-match against the gold.
/// Numeric comparison is `|pred - gold| <= tolerance` with tolerance 0 when
/// absent. All failures map to `correct = false` with a reason.
pub fn verify(generation: &str, query: &Query) -> VerifierOutcome {
    let extracted_raw = extract_final_answer(generation);
    let extracted = nfkc(&extracted_raw).trim().to_string();
    if extracted.is_empty() {
        return VerifierOutcome::incorrect("", MatchReason::NoAnswerFound);
    }

    match query.answer_kind {
        AnswerKind::McqLetter | AnswerKind::McqText => {
            let options = match query.options.as_deref() {
                Some(opts) if !opts.is_empty() => opts,
                _ => return VerifierOutcome::incorrect(extracted, MatchReason::Mismatch),
            };
            let gold_idx = match gold_option_index(&query.gold, options) {
                Some(i) => i,
                None => return VerifierOutcome::incorrect(extracted, MatchReason::Mismatch),
            };
            match resolve_mcq(&extracted, options) {
                Some(McqResolution::Letter(idx)) => VerifierOutcome {
                    correct: idx == gold_idx,
                    extracted,
                    reason: if idx == gold_idx {
                        MatchReason::LetterMatch
                    } else {
                        MatchReason::Mismatch
                    },
                },
                Some(McqResolution::Text(idx)) => VerifierOutcome {
                    correct: idx == gold_idx,
                    extracted,
                    reason: if idx == gold_idx {
                        MatchReason::OptionTextMatch
                    } else {
                        MatchReason::Mismatch
                    },
                },
                None => VerifierOutcome::incorrect(extracted, MatchReason::NoAnswerFound),
            }
        }
        AnswerKind::Numeric => {
            let (value, tolerance) = match &query.gold {
                AnswerKey::Numeric { value, tolerance } => (*value, tolerance.unwrap_or(0.0)),
                _ => return VerifierOutcome::incorrect(extracted, MatchReason::Mismatch),
            };
            match canonicalize_number(&extracted) {
                Some(pred) => {
                    let correct = (pred - value).abs() <= tolerance;
                    VerifierOutcome {
                        correct,
                        extracted,
                        reason: if correct {
                            MatchReason::NumericMatch
                        } else {
                            MatchReason::Mismatch
                        },
                    }
                }
                None => VerifierOutcome::incorrect(extracted, MatchReason::NoAnswerFound),
            }
        }
    }
}
