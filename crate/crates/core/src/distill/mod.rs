//! Self-distillation trace filtering: the progressive F1-F3 passes that turn
//! raw rollouts over synthetic queries into a training-ready corpus.
//!
//! F1 keeps queries whose difficulty profile is informative (neither all
//! wrong nor solved nearly uniformly), F2 drops traces with perception
//! defects or stray media tokens, and F3 enforces consistency between the
//! reasoning body and the final answer tag, rewriting the tag when the
//! reasoning clearly arrives at the gold option. Each pass runs on the data
//! retained by the previous one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkManifest, MediaRef, Query};
use crate::modelgate::RolloutRecord;
use crate::verifier::{self, AnswerKey};

/// Rollouts sampled per synthetic query during self-distillation.
pub const DISTILL_ROLLOUTS: usize = 8;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("query {query_id} has {got} rollouts, expected {want}")]
    GroupSize { query_id: String, got: usize, want: usize },
    #[error("trace references unknown query {0}")]
    UnknownQuery(String),
    #[error("pattern file: {0}")]
    Patterns(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// One candidate reasoning trace: a rollout split into its reasoning body
/// and final answer tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub rollout_index: usize,
    pub reasoning: String,
    pub answer_tag: String,
    pub verified_correct: bool,
    #[serde(default)]
    pub rewritten: bool,
}

impl TraceRecord {
    /// Split a verified rollout into a trace record.
    pub fn from_rollout(record: &RolloutRecord) -> Self {
        let (reasoning, answer_tag) = verifier::split_final_answer(&record.generation);
        TraceRecord {
            query_id: record.query_id.clone(),
            rollout_index: record.rollout_index,
            reasoning,
            answer_tag,
            verified_correct: record.outcome.correct,
            rewritten: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassId {
    F1,
    F2,
    F3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStats {
    pub pass_id: PassId,
    pub queries_in: usize,
    pub queries_out: usize,
    pub rollouts_in: usize,
    pub rollouts_out: usize,
}

/// Versioned pattern lists behind the F2 defect checks. The defaults ship
/// embedded so runs are reproducible; custom lists can be loaded from a
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectPatterns {
    pub version: u32,
    pub perception_patterns: Vec<String>,
    pub media_tokens: Vec<String>,
}

impl DefectPatterns {
    pub fn default_v1() -> Self {
        serde_json::from_str(include_str!("defect_patterns.json"))
            .expect("embedded defect pattern file is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self, DistillError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| DistillError::Patterns(format!("{}: {e}", path.display())))
    }
}

impl Default for DefectPatterns {
    fn default() -> Self {
        Self::default_v1()
    }
}

/// Group trace records by query id, rollouts sorted by index.
pub fn group_by_query(records: Vec<TraceRecord>) -> BTreeMap<String, Vec<TraceRecord>> {
    let mut groups: BTreeMap<String, Vec<TraceRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.query_id.clone()).or_default().push(record);
    }
    for group in groups.values_mut() {
        group.sort_by_key(|r| r.rollout_index);
    }
    groups
}

/// F1, difficulty profile: keep a query iff its correct count is neither 0
/// nor within one of n. For the 8-rollout protocol that keeps 1..=6. All
/// rollouts of kept queries pass through to F2.
pub fn f1_difficulty(
    groups: BTreeMap<String, Vec<TraceRecord>>,
    n: usize,
) -> Result<(BTreeMap<String, Vec<TraceRecord>>, PassStats), DistillError> {
    let queries_in = groups.len();
    let rollouts_in: usize = groups.values().map(Vec::len).sum();
    let mut retained = BTreeMap::new();
    for (query_id, group) in groups {
        if group.len() != n {
            return Err(DistillError::GroupSize { query_id, got: group.len(), want: n });
        }
        let correct = group.iter().filter(|r| r.verified_correct).count();
        if correct >= 1 && correct + 1 < n {
            retained.insert(query_id, group);
        }
    }
    let stats = PassStats {
        pass_id: PassId::F1,
        queries_in,
        queries_out: retained.len(),
        rollouts_in,
        rollouts_out: retained.values().map(Vec::len).sum(),
    };
    Ok((retained, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F2DropReason {
    PerceptionDefect,
    MediaToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F2Decision {
    Keep,
    Drop(F2DropReason),
}

/// F2, defect screening: drop a trace whose reasoning states a perception
/// failure or whose output carries a stray media token.
pub fn f2_defects(record: &TraceRecord, patterns: &DefectPatterns) -> F2Decision {
    let reasoning = record.reasoning.to_lowercase();
    for pattern in &patterns.perception_patterns {
        if reasoning.contains(&pattern.to_lowercase()) {
            return F2Decision::Drop(F2DropReason::PerceptionDefect);
        }
    }
    let tag = record.answer_tag.to_lowercase();
    for token in &patterns.media_tokens {
        let token = token.to_lowercase();
        if reasoning.contains(&token) || tag.contains(&token) {
            return F2Decision::Drop(F2DropReason::MediaToken);
        }
    }
    F2Decision::Keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F3DropReason {
    WrongAnswer,
    NoConclusion,
}

#[derive(Debug, Clone, PartialEq)]
pub enum F3Outcome {
    Kept {
        record: TraceRecord,
        /// Numeric traces are kept without a reasoning-conclusion check and
        /// flagged for review.
        review: bool,
    },
    Dropped(F3DropReason),
}

/// Index of the last option mentioned in a reasoning body: the latest
/// occurrence of an option's normalized text, a `(X)` marker, or an
/// `option X` / `choice X` phrase, resolved through the shared MCQ
/// normalization.
pub fn last_option_mention(text: &str, options: &[String]) -> Option<usize> {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None; // (start, len, index)
    let mut consider = |start: usize, len: usize, index: usize| {
        let candidate = (start, len, index);
        best = Some(match best {
            Some(cur) if cur.0 > start || (cur.0 == start && cur.1 >= len) => cur,
            _ => candidate,
        });
    };

    for (idx, option) in options.iter().enumerate() {
        let needle = verifier::normalize_answer_text(option);
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(rel) = lower[from..].find(&needle) {
            let at = from + rel;
            consider(at, needle.len(), idx);
            from = at + 1;
        }
    }

    let letter_of = |idx: usize| verifier::index_letter(idx).map(|l| l.to_ascii_lowercase());
    for idx in 0..options.len() {
        let Some(letter) = letter_of(idx) else { break };
        let paren = format!("({letter})");
        let mut from = 0;
        while let Some(rel) = lower[from..].find(&paren) {
            let at = from + rel;
            consider(at, paren.len(), idx);
            from = at + 1;
        }
        for phrase in [format!("option {letter}"), format!("choice {letter}")] {
            let mut from = 0;
            while let Some(rel) = lower[from..].find(&phrase) {
                let at = from + rel;
                // Require a word boundary after the letter.
                let after = lower[at + phrase.len()..].chars().next();
                if after.map_or(true, |c| !c.is_alphanumeric()) {
                    consider(at, phrase.len(), idx);
                }
                from = at + 1;
            }
        }
    }
    best.map(|(_, _, idx)| idx)
}

/// F3, reasoning-answer consistency against the gold target.
///
/// MCQ traces are kept only when the reasoning's concluded option and the
/// answer tag both agree with gold; a trace whose reasoning concludes the
/// gold option but whose tag points elsewhere is kept with the tag rewritten
/// to the reasoning's choice. Numeric traces are kept or dropped on the tag
/// alone, never rewritten, and flagged for review.
pub fn f3_consistency(
    record: &TraceRecord,
    gold: &AnswerKey,
    options: Option<&[String]>,
) -> F3Outcome {
    match gold {
        AnswerKey::Numeric { value, tolerance } => {
            let tolerance = tolerance.unwrap_or(0.0);
            match verifier::canonicalize_number(&record.answer_tag) {
                Some(pred) if (pred - value).abs() <= tolerance => F3Outcome::Kept {
                    record: TraceRecord { verified_correct: true, ..record.clone() },
                    review: true,
                },
                _ => F3Outcome::Dropped(F3DropReason::WrongAnswer),
            }
        }
        AnswerKey::McqLetter { .. } | AnswerKey::McqText { .. } => {
            let options = match options {
                Some(opts) if !opts.is_empty() => opts,
                _ => return F3Outcome::Dropped(F3DropReason::WrongAnswer),
            };
            let gold_idx = match gold {
                AnswerKey::McqLetter { letter } => verifier::letter_index(*letter)
                    .filter(|i| *i < options.len()),
                AnswerKey::McqText { text } => verifier::normalize_mcq(text, options),
                AnswerKey::Numeric { .. } => unreachable!(),
            };
            let Some(gold_idx) = gold_idx else {
                return F3Outcome::Dropped(F3DropReason::WrongAnswer);
            };
            let Some(conclusion) = last_option_mention(&record.reasoning, options) else {
                return F3Outcome::Dropped(F3DropReason::NoConclusion);
            };
            if conclusion != gold_idx {
                return F3Outcome::Dropped(F3DropReason::WrongAnswer);
            }
            let tag_idx = verifier::normalize_mcq(&record.answer_tag, options);
            if tag_idx == Some(gold_idx) {
                F3Outcome::Kept {
                    record: TraceRecord { verified_correct: true, ..record.clone() },
                    review: false,
                }
            } else {
                // Reasoning arrives at gold but the tag points elsewhere:
                // rewrite the tag to the reasoning's choice.
                let letter = verifier::index_letter(conclusion)
                    .expect("mention indices stay within the lettered range");
                F3Outcome::Kept {
                    record: TraceRecord {
                        answer_tag: letter.to_string(),
                        verified_correct: true,
                        rewritten: true,
                        ..record.clone()
                    },
                    review: false,
                }
            }
        }
    }
}

/// One training-ready corpus row: the original media paired with the
/// synthetic query and a retained trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub query_id: String,
    pub media: Vec<MediaRef>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub rollout_index: usize,
    pub reasoning: String,
    pub answer_tag: String,
    pub provenance: CorpusProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProvenance {
    pub passes: Vec<PassId>,
    pub rewritten: bool,
    pub review: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput {
    pub corpus: Vec<CorpusRow>,
    pub stats: Vec<PassStats>,
}

/// Strict F1 -> F2 -> F3 composition over grouped trace records, using the
/// default pattern file and the 8-rollout protocol.
pub fn run_pipeline(
    records: Vec<TraceRecord>,
    manifest: &BenchmarkManifest,
) -> Result<DistillOutput, DistillError> {
    run_pipeline_with(records, manifest, &DefectPatterns::default_v1(), DISTILL_ROLLOUTS)
}

pub fn run_pipeline_with(
    records: Vec<TraceRecord>,
    manifest: &BenchmarkManifest,
    patterns: &DefectPatterns,
    n: usize,
) -> Result<DistillOutput, DistillError> {
    let index = manifest.query_index();
    let groups = group_by_query(records);
    for query_id in groups.keys() {
        if !index.contains_key(query_id.as_str()) {
            return Err(DistillError::UnknownQuery(query_id.clone()));
        }
    }

    let (f1_groups, f1_stats) = f1_difficulty(groups, n)?;

    // F2 drops offending rollouts; a query is dropped when none remain.
    let f2_rollouts_in: usize = f1_groups.values().map(Vec::len).sum();
    let mut f2_groups: BTreeMap<String, Vec<TraceRecord>> = BTreeMap::new();
    for (query_id, group) in &f1_groups {
        let kept: Vec<TraceRecord> = group
            .iter()
            .filter(|r| f2_defects(r, patterns) == F2Decision::Keep)
            .cloned()
            .collect();
        if !kept.is_empty() {
            f2_groups.insert(query_id.clone(), kept);
        }
    }
    let f2_stats = PassStats {
        pass_id: PassId::F2,
        queries_in: f1_groups.len(),
        queries_out: f2_groups.len(),
        rollouts_in: f2_rollouts_in,
        rollouts_out: f2_groups.values().map(Vec::len).sum(),
    };

    let f3_rollouts_in: usize = f2_groups.values().map(Vec::len).sum();
    let mut corpus = Vec::new();
    let mut f3_queries_out = 0;
    let mut f3_rollouts_out = 0;
    for (query_id, group) in &f2_groups {
        let query: &Query = index[query_id.as_str()];
        let mut kept_any = false;
        for record in group {
            match f3_consistency(record, &query.gold, query.options.as_deref()) {
                F3Outcome::Kept { record, review } => {
                    kept_any = true;
                    f3_rollouts_out += 1;
                    corpus.push(CorpusRow {
                        query_id: query.query_id.clone(),
                        media: query.media.clone(),
                        question: query.question.clone(),
                        options: query.options.clone(),
                        rollout_index: record.rollout_index,
                        provenance: CorpusProvenance {
                            passes: vec![PassId::F1, PassId::F2, PassId::F3],
                            rewritten: record.rewritten,
                            review,
                        },
                        reasoning: record.reasoning,
                        answer_tag: record.answer_tag,
                    });
                }
                F3Outcome::Dropped(_) => {}
            }
        }
        if kept_any {
            f3_queries_out += 1;
        }
    }
    let f3_stats = PassStats {
        pass_id: PassId::F3,
        queries_in: f2_groups.len(),
        queries_out: f3_queries_out,
        rollouts_in: f3_rollouts_in,
        rollouts_out: f3_rollouts_out,
    };

    Ok(DistillOutput { corpus, stats: vec![f1_stats, f2_stats, f3_stats] })
}

/// Corpus as one JSON object per line.
pub fn write_corpus_jsonl(rows: &[CorpusRow], path: &Path) -> Result<(), DistillError> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| DistillError::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Pass statistics sidecar.
pub fn write_stats_json(stats: &[PassStats], path: &Path) -> Result<(), DistillError> {
    let mut text =
        serde_json::to_string_pretty(stats).map_err(|e| DistillError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read trace records from a JSONL file.
pub fn read_traces_jsonl(path: &Path) -> Result<Vec<TraceRecord>, DistillError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line)
            .map_err(|e| DistillError::Format(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}
